#!/usr/bin/env python3
"""Censorship-impact demo: full 208x8 grid sweeps against the shipped
split fixtures, then the downstream reports (affected table, clear-
fraction CDF, bit-group counts, effect classification).

Writes the run log and CSVs into --workdir (default ./sweep_out).
"""

import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from flowstable.cli import cli_main

FIXTURES = ROOT / "fixtures"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="sweep_out")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)

    for fixture, dest in (("half_split.topo", "3"), ("bits3of8.topo", "9")):
        name = fixture.split(".")[0]
        dests_file = workdir / f"{name}.dests"
        dests_file.write_text(dest + "\n")
        log = workdir / f"{name}.log"
        print(f"\n=== {fixture}: rq2 sweep (http) ===")
        code = cli_main([
            "rq2", "--topology", str(FIXTURES / fixture),
            "--dests", str(dests_file), "--seed", str(args.seed),
            "--out", str(log), "--protocols", "http",
            "--registry", str(FIXTURES / "blockpages.json"),
            "--trace-affected",
        ])
        if code:
            return code
        print((workdir / f"{name}_table.csv").read_text().strip())

        print(f"--- bit groups ({name}) ---")
        code = cli_main(["bits", "--log", str(log), "--group-by", "src_ip_low3"])
        if code:
            return code

        print(f"--- effect classification ({name}) ---")
        code = cli_main([
            "classify", "--log", str(log), "--topology", str(FIXTURES / fixture),
        ])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
