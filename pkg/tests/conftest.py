import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make `reference` importable

FIXTURES = Path(__file__).parent.parent / "fixtures"

SESSION_START = time.monotonic()


def pytest_collection_modifyitems(items):
    """Run the acceptance module last so its wall-clock criterion can
    observe the rest of the suite."""
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def registry():
    from flowstable.prober import BlockpageRegistry

    return BlockpageRegistry.load((FIXTURES / "blockpages.json").read_text())


def load_fixture(name: str):
    from flowstable.simnet import load_topology

    return load_topology((FIXTURES / name).read_text())
