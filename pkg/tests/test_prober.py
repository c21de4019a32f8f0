import random

import pytest

from flowstable.analysis import no_censorship_fraction
from flowstable.core import (
    AppProtocol,
    Ipv4Address,
    Mechanism,
    Sensitivity,
    SourceParams,
)
from flowstable.censors import Health
from flowstable.fixtures import random_topology
from flowstable.prober import (
    BlockpageRegistry,
    LengthMismatchError,
    LiveTransport,
    Observation,
    ObservationKind,
    ProbeSpec,
    SimTransport,
    TransportUnavailableError,
    classify,
    is_affected,
    run_cell,
    run_probe,
    verdict_matrix,
)

from conftest import load_fixture

PARAMS = SourceParams(Ipv4Address.parse("198.51.100.7"), 40000)
DOMAINS = ("control.example", "blocked.example")


def spec_for(topology, protocol, sensitivity, domain, params=PARAMS, reps=3):
    dst = topology.nodes[max(topology.nodes)].address
    return ProbeSpec.for_protocol(protocol, dst, domain, sensitivity, params,
                                  repetitions=reps)


def obs(*kinds, tag=""):
    return [Observation(i + 1, k, tag) for i, k in enumerate(kinds)]


P = ObservationKind.PAYLOAD_RESPONSE
R = ObservationKind.RST_RECEIVED
D = ObservationKind.DNS_RESPONSE
N = ObservationKind.NO_RESPONSE
H = ObservationKind.HANDSHAKE_FAILED


class TestClassify:
    def test_rst_all_repetitions(self):
        verdict = classify(obs(P, P, P), obs(R, R, R), AppProtocol.HTTPS)
        assert verdict.mechanism is Mechanism.RST_INJECTION

    def test_mixed_rst_excluded(self):
        verdict = classify(obs(P, P, P), obs(R, P, R), AppProtocol.HTTPS)
        assert verdict.is_excluded

    def test_clean_payloads_not_censored(self):
        verdict = classify(obs(P, P, P), obs(P, P, P), AppProtocol.HTTPS)
        assert verdict.is_not_censored

    def test_rst_in_control_blocks_censored(self):
        verdict = classify(obs(R, R, R), obs(R, R, R), AppProtocol.HTTPS)
        assert not verdict.is_censored

    def test_packet_drop(self):
        verdict = classify(obs(P, P, P), obs(N, H, N), AppProtocol.HTTPS)
        assert verdict.mechanism is Mechanism.PACKET_DROP

    def test_drop_needs_all_control_payloads(self):
        verdict = classify(obs(P, N, P), obs(N, N, N), AppProtocol.HTTPS)
        assert verdict.is_excluded

    def test_dns_injection(self):
        verdict = classify(obs(N, N, N), obs(D, D, D), AppProtocol.DNS)
        assert verdict.mechanism is Mechanism.DNS_INJECTION

    def test_dns_clean_is_silence(self):
        assert classify(obs(N, N, N), obs(N, N, N), AppProtocol.DNS).is_not_censored
        assert classify(obs(N, N, N), obs(D, D, N), AppProtocol.DNS).is_excluded

    def test_dns_injection_requires_dns_protocol(self):
        verdict = classify(obs(N, N, N), obs(D, D, D), AppProtocol.HTTP)
        assert verdict.is_excluded

    def test_blockpage_with_registry(self):
        registry = BlockpageRegistry({"bp-01": "x"})
        sensitive = obs(P, P, P, tag="bp-01")
        control = obs(P, P, P, tag="origin:control.example")
        verdict = classify(control, sensitive, AppProtocol.HTTP, registry)
        assert verdict.mechanism is Mechanism.BLOCKPAGE

    def test_unknown_template_is_not_blockpage(self):
        registry = BlockpageRegistry({"bp-01": "x"})
        sensitive = obs(P, P, P, tag="bp-99")
        control = obs(P, P, P, tag="origin:control.example")
        verdict = classify(control, sensitive, AppProtocol.HTTP, registry)
        assert verdict.is_not_censored  # payloads everywhere, no registry match

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            classify(obs(P, P), obs(P, P, P), AppProtocol.HTTP)
        with pytest.raises(LengthMismatchError):
            classify([], [], AppProtocol.HTTP)

    def test_monotone_repetitions_on_deterministic_outcomes(self):
        for reps in (1, 3, 7):
            clean = classify(obs(*[P] * reps), obs(*[P] * reps), AppProtocol.HTTP)
            censored = classify(obs(*[P] * reps), obs(*[R] * reps), AppProtocol.HTTP)
            assert clean.is_not_censored
            assert censored.mechanism is Mechanism.RST_INJECTION


class TestRunProbe:
    def test_clean_http_probe(self):
        topo = load_fixture("chain.topo")
        observations = run_probe(
            spec_for(topo, AppProtocol.HTTP, Sensitivity.SENSITIVE, DOMAINS[1]),
            SimTransport(topo),
        )
        assert [o.kind for o in observations] == [P, P, P]
        assert all(o.tag == "origin:blocked.example" for o in observations)

    def test_rst_censor_hits_sensitive_not_control(self):
        topo = load_fixture("rst_chain.topo")
        transport = SimTransport(topo)
        sens = run_probe(spec_for(topo, AppProtocol.HTTPS, Sensitivity.SENSITIVE,
                                  DOMAINS[1]), transport)
        ctrl = run_probe(spec_for(topo, AppProtocol.HTTPS, Sensitivity.CONTROL,
                                  DOMAINS[0]), transport)
        assert [o.kind for o in sens] == [R, R, R]
        assert [o.kind for o in ctrl] == [P, P, P]

    def test_dns_injection_vs_silent_control(self):
        topo = load_fixture("dns_inject_chain.topo")
        transport = SimTransport(topo)
        sens = run_probe(spec_for(topo, AppProtocol.DNS, Sensitivity.SENSITIVE,
                                  DOMAINS[1]), transport)
        ctrl = run_probe(spec_for(topo, AppProtocol.DNS, Sensitivity.CONTROL,
                                  DOMAINS[0]), transport)
        assert [o.kind for o in sens] == [D, D, D]
        assert all(o.tag == "answer-a" for o in sens)
        assert [o.kind for o in ctrl] == [N, N, N]

    def test_blockpage_censor(self):
        topo = load_fixture("blockpage_chain.topo")
        observations = run_probe(
            spec_for(topo, AppProtocol.HTTP, Sensitivity.SENSITIVE, DOMAINS[1]),
            SimTransport(topo),
        )
        assert [o.kind for o in observations] == [P, P, P]
        assert all(o.tag == "bp-01" for o in observations)

    def test_route_stability_all_packets_one_flow(self):
        topo = load_fixture("chain.topo")
        transport = SimTransport(topo)
        spec = spec_for(topo, AppProtocol.HTTPS, Sensitivity.SENSITIVE, DOMAINS[1])
        run_probe(spec, transport)
        flows = {p.flow for _, p in transport.packet_log}
        assert flows == {spec.flow}

    def test_observations_carry_distinct_epochs(self):
        topo = load_fixture("chain.topo")
        observations = run_probe(
            spec_for(topo, AppProtocol.HTTP, Sensitivity.SENSITIVE, DOMAINS[1]),
            SimTransport(topo),
        )
        assert [o.epoch for o in observations] == [1, 2, 3]

    def test_live_transport_always_errors(self):
        topo = load_fixture("chain.topo")
        with pytest.raises(TransportUnavailableError):
            run_probe(spec_for(topo, AppProtocol.HTTP, Sensitivity.CONTROL,
                               DOMAINS[0]), LiveTransport())

    def test_spec_port_protocol_coupling(self):
        with pytest.raises(ValueError):
            ProbeSpec(AppProtocol.DNS, Ipv4Address(1), 80, "d", Sensitivity.CONTROL,
                      PARAMS)


class TestVerdictMatrix:
    def test_half_split_odd_cells_censored(self):
        topo = load_fixture("half_split.topo")
        transport = SimTransport(topo)
        grid = [SourceParams(Ipv4Address(0xC6336400 + h), 40000) for h in range(1, 17)]
        matrix = verdict_matrix(
            topo.nodes[3].address, grid, AppProtocol.HTTPS, DOMAINS, transport
        )
        for params, verdict in matrix.items():
            if params.src_ip.host_octet % 2 == 1:
                assert verdict.mechanism is Mechanism.RST_INJECTION
            else:
                assert verdict.is_not_censored
        assert is_affected(matrix)
        assert no_censorship_fraction(matrix) == 0.5

    def test_censor_on_all_branches_not_affected(self):
        topo = load_fixture("rst_chain.topo")
        transport = SimTransport(topo)
        grid = [SourceParams(Ipv4Address(0xC6336400 + h), 40000) for h in range(1, 9)]
        matrix = verdict_matrix(
            topo.nodes[3].address, grid, AppProtocol.HTTPS, DOMAINS, transport
        )
        assert all(v.is_censored for v in matrix.values())
        assert not is_affected(matrix)

    def test_no_censor_not_affected(self):
        topo = load_fixture("chain.topo")
        transport = SimTransport(topo)
        grid = [SourceParams(Ipv4Address(0xC6336400 + h), 40000) for h in range(1, 9)]
        matrix = verdict_matrix(
            topo.nodes[3].address, grid, AppProtocol.HTTPS, DOMAINS, transport
        )
        assert all(v.is_not_censored for v in matrix.values())
        assert not is_affected(matrix)


class TestGroundTruth:
    def test_every_action_has_exactly_one_event(self):
        topo = load_fixture("rst_chain.topo")
        transport = SimTransport(topo)
        sens = run_probe(spec_for(topo, AppProtocol.HTTPS, Sensitivity.SENSITIVE,
                                  DOMAINS[1]), transport)
        assert [o.kind for o in sens] == [R, R, R]
        events = transport.censor_events
        assert len(events) == 3  # one per sensitive payload, none extra
        assert all(e.at == 1 for e in events)
        assert sorted(e.epoch for e in events) == [1, 2, 3]

    def test_drop_actions_are_also_logged(self):
        import json

        from conftest import FIXTURES

        doc = json.loads((FIXTURES / "rst_chain.topo").read_text())
        doc["censors"] = [{
            "attach_at": 1, "protocol": "https", "direction": "toward_destination",
            "domain_pattern": "blocked.example", "action": {"kind": "drop_silently"},
            "health": "active", "residual_epochs": 0,
        }]
        from flowstable.simnet import load_topology

        topo = load_topology(doc)
        transport = SimTransport(topo)
        sens = run_probe(spec_for(topo, AppProtocol.HTTPS, Sensitivity.SENSITIVE,
                                  DOMAINS[1]), transport)
        assert [o.kind for o in sens] == [N, N, N]
        assert len(transport.censor_events) == 3

    def test_residual_censorship_pollutes_controls_into_excluded(self):
        import json

        from conftest import FIXTURES

        doc = json.loads((FIXTURES / "rst_chain.topo").read_text())
        doc["censors"] = [{
            "attach_at": 1, "protocol": "https", "direction": "toward_destination",
            "domain_pattern": "blocked.example", "action": {"kind": "inject_rst"},
            "health": "active", "residual_epochs": 2,
        }]
        from flowstable.simnet import load_topology

        topo = load_topology(doc)
        transport = SimTransport(topo)
        ctrl = spec_for(topo, AppProtocol.HTTPS, Sensitivity.CONTROL, DOMAINS[0])
        sens = spec_for(topo, AppProtocol.HTTPS, Sensitivity.SENSITIVE, DOMAINS[1])
        obs_c, obs_s = run_cell(ctrl, sens, transport)
        # the sensitive hit at epoch 1 poisons the shared flow, so later
        # control repetitions see injected resets too
        assert obs_c[0].kind is ObservationKind.PAYLOAD_RESPONSE
        assert {o.kind for o in obs_c[1:]} == {ObservationKind.RST_RECEIVED}
        assert classify(obs_c, obs_s, AppProtocol.HTTPS).is_excluded

    def test_epoch_hooks_run_each_advance(self):
        topo = load_fixture("chain.topo")
        transport = SimTransport(topo)
        seen = []
        transport.epoch_hooks.append(lambda t, e: seen.append(e))
        run_probe(spec_for(topo, AppProtocol.HTTP, Sensitivity.CONTROL, DOMAINS[0]),
                  transport)
        assert seen == [1, 2, 3]

    def test_probe_order_flag_does_not_change_verdicts(self):
        topo = load_fixture("half_split.topo")
        dst = topo.nodes[3].address
        results = {}
        for control_first in (True, False):
            transport = SimTransport(topo)
            grid = [SourceParams(Ipv4Address(0xC6336400 + h), 40000)
                    for h in range(1, 9)]
            results[control_first] = verdict_matrix(
                dst, grid, AppProtocol.HTTPS, DOMAINS, transport,
                control_first=control_first,
            )
        assert results[True] == results[False]


class TestConservativeness:
    def test_no_censor_with_loss_never_censored(self):
        """Sampled version of the full acceptance property."""
        rng = random.Random(99)
        for trial in range(300):
            topo = random_topology(rng.randrange(1_000_000), max_nodes=8,
                                   loss_range=(0.0, 0.2))
            transport = SimTransport(topo)
            protocol = (AppProtocol.DNS, AppProtocol.HTTP, AppProtocol.HTTPS)[trial % 3]
            params = SourceParams(Ipv4Address(0xC6336400 + rng.randrange(1, 255)),
                                  rng.randrange(32768, 61000))
            dst = topo.nodes[max(topo.nodes)].address
            ctrl = ProbeSpec.for_protocol(protocol, dst, DOMAINS[0],
                                          Sensitivity.CONTROL, params)
            sens = ProbeSpec.for_protocol(protocol, dst, DOMAINS[1],
                                          Sensitivity.SENSITIVE, params)
            obs_c, obs_s = run_cell(ctrl, sens, transport)
            verdict = classify(obs_c, obs_s, protocol)
            assert not verdict.is_censored

    def test_flapping_censor_yields_excluded(self):
        topo = load_fixture("rst_chain.topo")
        topo.set_health(0, Health.FAILED, 2)
        topo.set_health(0, Health.ACTIVE, 3)
        topo.set_health(1, Health.FAILED, 2)
        topo.set_health(1, Health.ACTIVE, 3)
        transport = SimTransport(topo)
        dst = topo.nodes[3].address
        ctrl = ProbeSpec.for_protocol(AppProtocol.HTTPS, dst, DOMAINS[0],
                                      Sensitivity.CONTROL, PARAMS)
        sens = ProbeSpec.for_protocol(AppProtocol.HTTPS, dst, DOMAINS[1],
                                      Sensitivity.SENSITIVE, PARAMS)
        obs_c, obs_s = run_cell(ctrl, sens, transport)
        assert classify(obs_c, obs_s, AppProtocol.HTTPS).is_excluded

    def test_monotone_repetitions_end_to_end(self):
        topo = load_fixture("half_split.topo")
        dst = topo.nodes[3].address
        verdicts = {}
        for reps in (1, 3, 6):
            transport = SimTransport(topo)
            matrix = verdict_matrix(
                dst,
                [SourceParams(Ipv4Address(0xC6336401 + h), 40000) for h in range(4)],
                AppProtocol.HTTPS,
                DOMAINS,
                transport,
                repetitions=reps,
            )
            verdicts[reps] = {p: v.kind for p, v in matrix.items()}
        assert verdicts[1] == verdicts[3] == verdicts[6]
