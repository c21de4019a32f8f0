from collections import Counter

import pytest

from flowstable.analysis import no_censorship_fraction, num_paths
from flowstable.core import AppProtocol, EPHEMERAL_PORT_RANGE, Ipv4Address
from flowstable.experiments import (
    EmptyCandidatesError,
    Rq1Variation,
    SampleMode,
    plan_rq1,
    plan_rq2,
    rq1_plans_from_json,
    rq1_plans_to_json,
    rq2_plan_from_json,
    rq2_plan_to_json,
    run_rq1,
    run_rq2,
    sample_destinations,
)
from flowstable.prober import SimTransport, is_affected

from conftest import load_fixture

DEST = Ipv4Address.parse("10.0.3.4")  # chain.topo endpoint


class TestPlanRq1:
    def test_four_plans_of_144(self):
        plans = plan_rq1(DEST, AppProtocol.HTTP, seed=1)
        assert [p.variation for p in plans] == list(Rq1Variation)
        assert all(len(p.samples) == 144 for p in plans)

    def test_all_constant_identical(self):
        plan = plan_rq1(DEST, AppProtocol.HTTP, seed=1)[0]
        assert len(set(plan.samples)) == 1

    def test_vary_port_distinct_ephemeral(self):
        plan = plan_rq1(DEST, AppProtocol.HTTP, seed=1)[1]
        assert len({s.src_port for s in plan.samples}) == 144
        assert len({s.src_ip for s in plan.samples}) == 1
        lo, hi = EPHEMERAL_PORT_RANGE
        assert all(lo <= s.src_port <= hi for s in plan.samples)

    def test_vary_ip_distinct_in_prefix(self):
        plan = plan_rq1(DEST, AppProtocol.HTTP, seed=1)[2]
        assert len({s.src_ip for s in plan.samples}) == 144
        assert len({s.src_port for s in plan.samples}) == 1
        for s in plan.samples:
            assert s.src_ip.value & 0xFFFFFF00 == 0xC6336400
            assert s.src_ip.host_octet not in (0, 255)

    def test_vary_both_12_by_12(self):
        plan = plan_rq1(DEST, AppProtocol.HTTP, seed=1)[3]
        assert len({s.src_ip for s in plan.samples}) == 12
        assert len({s.src_port for s in plan.samples}) == 12
        assert len(set(plan.samples)) == 144

    def test_same_seed_identical_plans(self):
        a = plan_rq1(DEST, AppProtocol.HTTP, seed=5)
        b = plan_rq1(DEST, AppProtocol.HTTP, seed=5)
        assert a == b

    def test_different_seed_differs(self):
        a = plan_rq1(DEST, AppProtocol.HTTP, seed=5)
        b = plan_rq1(DEST, AppProtocol.HTTP, seed=6)
        assert a != b


class TestPlanRq2:
    def test_grid_size_and_histogram(self):
        plan = plan_rq2([DEST], seed=3)
        assert len(plan.grid) == 1664
        ips = {s.src_ip for s in plan.grid}
        assert len(ips) == 208
        histogram = Counter(ip.low_bits(3) for ip in ips)
        assert histogram == Counter({c: 26 for c in range(8)})
        assert all(ip.host_octet not in (0, 255) for ip in ips)

    def test_ports_distinct_ephemeral(self):
        plan = plan_rq2([DEST], seed=3)
        ports = {s.src_port for s in plan.grid}
        assert len(ports) == 8
        lo, hi = EPHEMERAL_PORT_RANGE
        assert all(lo <= p <= hi for p in ports)

    def test_seed_changes_ports_histogram_invariant(self):
        a = plan_rq2([DEST], seed=3)
        b = plan_rq2([DEST], seed=4)
        assert {s.src_port for s in a.grid} != {s.src_port for s in b.grid}
        for plan in (a, b):
            histogram = Counter(ip.low_bits(3) for ip in {s.src_ip for s in plan.grid})
            assert set(histogram.values()) == {26}

    def test_empty_destinations(self):
        with pytest.raises(EmptyCandidatesError):
            plan_rq2([], seed=1)


class TestSampleDestinations:
    CANDIDATES = [
        (Ipv4Address(100 + i), 65000 + (i % 3)) for i in range(30)
    ]

    def test_one_per_as(self):
        picked = sample_destinations(self.CANDIDATES, SampleMode.ONE_PER_AS, seed=1)
        assert len(picked) == 3

    def test_cap_binding(self):
        one_as = [(Ipv4Address(i), 65001) for i in range(100)]
        picked = sample_destinations(one_as, SampleMode.CAP_PER_AS, seed=1, cap=60)
        assert len(picked) == 60

    def test_cap_not_binding(self):
        one_as = [(Ipv4Address(i), 65001) for i in range(10)]
        picked = sample_destinations(one_as, SampleMode.CAP_PER_AS, seed=1, cap=60)
        assert len(picked) == 10

    def test_deterministic(self):
        assert sample_destinations(self.CANDIDATES, SampleMode.ONE_PER_AS, 9) == \
            sample_destinations(self.CANDIDATES, SampleMode.ONE_PER_AS, 9)

    def test_empty(self):
        with pytest.raises(EmptyCandidatesError):
            sample_destinations([], SampleMode.ONE_PER_AS, 1)


class TestRunners:
    def test_rq1_all_constant_deterministic_fixture(self):
        topo = load_fixture("chain.topo")
        plans = [p for p in plan_rq1(DEST, AppProtocol.HTTP, seed=2)
                 if p.variation is Rq1Variation.ALL_CONSTANT]
        pathsets = run_rq1(plans, SimTransport(topo))
        assert num_paths(pathsets[Rq1Variation.ALL_CONSTANT]) == 1

    def test_scenario_hook_reproduces_constant_parameter_flap(self):
        """A scripted policy flip between measurements makes repeated
        constant-parameter traces see a second path, the route-flap mode
        the epoch hook exists for."""
        from flowstable.simnet import EcmpPolicy

        topo = load_fixture("half_split.topo")
        dest = topo.nodes[3].address
        original = topo.policies[0]
        flipped = EcmpPolicy(original.selector, tuple(reversed(original.next_hops)))
        state = {"count": 0}

        def flip_policy(topology, epoch):
            state["count"] += 1
            topology.policies[0] = flipped if state["count"] % 2 else original

        transport = SimTransport(topo)
        transport.epoch_hooks.append(flip_policy)
        plans = [p for p in plan_rq1(dest, AppProtocol.HTTP, seed=2)
                 if p.variation is Rq1Variation.ALL_CONSTANT]
        pathsets = run_rq1(plans, transport)
        assert num_paths(pathsets[Rq1Variation.ALL_CONSTANT]) == 2
        topo.policies[0] = original

    def test_rq1_vary_ip_exercises_every_branch(self):
        topo = load_fixture("bits3of8.topo")
        dest = topo.nodes[9].address
        plans = [p for p in plan_rq1(dest, AppProtocol.HTTP, seed=2)
                 if p.variation is Rq1Variation.VARY_IP]
        pathsets = run_rq1(plans, SimTransport(topo))
        assert num_paths(pathsets[Rq1Variation.VARY_IP]) == 8

    def test_rq2_half_split_affected(self, registry):
        topo = load_fixture("half_split.topo")
        dest = topo.nodes[3].address
        plan = plan_rq2([dest], seed=5)
        matrices = run_rq2(plan, SimTransport(topo),
                           protocols=[AppProtocol.HTTPS], registry=registry)
        matrix = matrices[(dest, AppProtocol.HTTPS)]
        assert is_affected(matrix)
        assert no_censorship_fraction(matrix) == 0.5

    def test_rq1_resumable(self, tmp_path):
        topo = load_fixture("half_split.topo")
        dest = topo.nodes[3].address
        plans = [p for p in plan_rq1(dest, AppProtocol.HTTP, seed=7)
                 if p.variation is Rq1Variation.VARY_IP]
        full_log = tmp_path / "full.log"
        full = run_rq1(plans, SimTransport(topo), log_path=full_log)

        # interruption between sample appends: keep the first 70 samples
        import json as _json

        partial_log = tmp_path / "partial.log"
        kept = [
            line
            for line in full_log.read_text().splitlines(keepends=True)
            if _json.loads(line)["sample_index"] < 70
        ]
        partial_log.write_text("".join(kept))
        resumed = run_rq1(plans, SimTransport(topo), log_path=partial_log)

        assert num_paths(full[Rq1Variation.VARY_IP]) == \
            num_paths(resumed[Rq1Variation.VARY_IP])
        assert sorted(full_log.read_text().splitlines()) == \
            sorted(partial_log.read_text().splitlines())

    def test_rq2_resumable(self, tmp_path, registry):
        import flowstable.experiments as exp

        topo = load_fixture("half_split.topo")
        dest = topo.nodes[3].address
        plan = exp.Rq2Plan(
            plan_rq2([dest], seed=5).grid, (dest,), ("control.example", "blocked.example")
        )
        full_log = tmp_path / "full.log"
        full = run_rq2(plan, SimTransport(topo), protocols=[AppProtocol.HTTP],
                       registry=registry, log_path=full_log)

        # interruption between cell appends: cut right after a verdict line
        import json as _json

        lines = full_log.read_text().splitlines(keepends=True)
        verdict_positions = [i for i, line in enumerate(lines)
                             if _json.loads(line)["record_kind"] == "verdict"]
        cut = verdict_positions[len(verdict_positions) // 3] + 1
        partial_log = tmp_path / "partial.log"
        partial_log.write_text("".join(lines[:cut]))
        resumed = run_rq2(plan, SimTransport(topo), protocols=[AppProtocol.HTTP],
                          registry=registry, log_path=partial_log)

        assert full[(dest, AppProtocol.HTTP)] == resumed[(dest, AppProtocol.HTTP)]
        assert sorted(full_log.read_text().splitlines()) == \
            sorted(partial_log.read_text().splitlines())

    def test_rq2_jobs_and_shuffle_equivalent(self, registry):
        topo = load_fixture("half_split.topo")
        dest = topo.nodes[3].address
        plan = plan_rq2([dest], seed=5)
        seq = run_rq2(plan, SimTransport(topo), protocols=[AppProtocol.HTTPS],
                      registry=registry)
        par = run_rq2(plan, SimTransport(topo), protocols=[AppProtocol.HTTPS],
                      registry=registry, jobs=4)
        shuffled = run_rq2(plan, SimTransport(topo), protocols=[AppProtocol.HTTPS],
                           registry=registry, shuffle=True)
        assert seq == par == shuffled


class TestPlanFiles:
    def test_rq1_round_trip(self):
        plans = plan_rq1(DEST, AppProtocol.HTTPS, seed=9)
        assert rq1_plans_from_json(rq1_plans_to_json(plans)) == plans

    def test_rq2_round_trip(self):
        plan = plan_rq2([DEST], seed=9)
        assert rq2_plan_from_json(rq2_plan_to_json(plan)) == plan
