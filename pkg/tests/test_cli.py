import csv
import json

import pytest

from flowstable.cli import cli_main

from conftest import FIXTURES


def run(capsys, *argv):
    code = cli_main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestValidate:
    def test_shipped_fixtures_validate(self, capsys):
        for topo in sorted(FIXTURES.glob("*.topo")):
            code, out, _ = run(capsys, "validate", str(topo))
            assert code == 0, topo

    def test_schema_error_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.topo"
        bad.write_text(json.dumps({"nodes": [], "policies": [], "seed": 0, "x": 1}))
        code, _, err = run(capsys, "validate", str(bad))
        assert code == 2
        assert "data error" in err

    def test_missing_file_exits_2(self, capsys):
        code, _, err = run(capsys, "validate", "no-such-file.topo")
        assert code == 2

    def test_usage_error_exits_1(self, capsys):
        assert cli_main(["rq1", "--topology", "x"]) == 1

    def test_unknown_subcommand_exits_1(self, capsys):
        assert cli_main(["frobnicate"]) == 1


class TestTrace:
    def test_chain_three_hops_then_reached(self, capsys):
        code, out, _ = run(
            capsys, "trace", "--topology", str(FIXTURES / "chain.topo"),
            "--dest", "3", "--src-ip", "198.51.100.7", "--src-port", "40000",
            "--protocol", "http",
        )
        assert code == 0
        assert out.splitlines() == ["1 0", "2 1", "3 2", "reached"]

    def test_gap_printed_as_star(self, capsys):
        code, out, _ = run(
            capsys, "trace", "--topology", str(FIXTURES / "type4_hidden.topo"),
            "--dest", "4", "--src-ip", "198.51.100.9", "--src-port", "40000",
            "--protocol", "http",
        )
        assert code == 0
        assert out.splitlines() == ["1 0", "2 1", "3 *", "reached"]

    def test_sensitive_trace_reports_censorship(self, capsys):
        code, out, _ = run(
            capsys, "trace", "--topology", str(FIXTURES / "rst_chain.topo"),
            "--dest", "3", "--src-ip", "198.51.100.9", "--src-port", "40000",
            "--protocol", "https", "--domain", "blocked.example", "--sensitive",
        )
        assert code == 0
        assert out.splitlines() == ["1 0", "2 1", "censored@2"]


class TestSeedPrecedence:
    def test_env_overrides_default_flag_overrides_env(self, tmp_path, capsys, monkeypatch):
        log_a = tmp_path / "a.log"
        log_b = tmp_path / "b.log"
        log_c = tmp_path / "c.log"
        base = ["rq1", "--topology", str(FIXTURES / "srcip_hash.topo"), "--dest", "5",
                "--protocol", "http"]
        monkeypatch.setenv("FLOWSTABLE_SEED", "77")
        assert cli_main(base + ["--out", str(log_a)]) == 0
        monkeypatch.delenv("FLOWSTABLE_SEED")
        assert cli_main(base + ["--out", str(log_b), "--seed", "77"]) == 0
        assert cli_main(base + ["--out", str(log_c), "--seed", "78"]) == 0
        capsys.readouterr()

        def meta_free(path):
            return sorted(
                line for line in path.read_text().splitlines()
                if json.loads(line)["record_kind"] != "meta"
            )

        assert meta_free(log_a) == meta_free(log_b)
        assert meta_free(log_a) != meta_free(log_c)


@pytest.fixture(scope="module")
def rq2_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("rq2")
    dests = tmp / "dests.txt"
    dests.write_text("3\n")
    log = tmp / "run.log"
    code = cli_main([
        "rq2", "--topology", str(FIXTURES / "half_split.topo"),
        "--dests", str(dests), "--seed", "5", "--out", str(log),
        "--protocols", "http", "--registry", str(FIXTURES / "blockpages.json"),
        "--trace-affected",
    ])
    assert code == 0
    return tmp, log


class TestRq2Reports:

    def test_table_marks_affected(self, rq2_run):
        tmp, log = rq2_run
        rows = list(csv.DictReader(open(tmp / "run_table.csv")))
        assert rows == [
            {"destination": "10.0.3.4", "asn": "303", "protocol": "http",
             "affected": "true"}
        ]

    def test_cdf_contains_half_step(self, rq2_run):
        tmp, log = rq2_run
        rows = list(csv.DictReader(open(tmp / "run_cdf.csv")))
        assert {"protocol": "http", "no_censorship_fraction": "0.5000",
                "cdf": "1.0000"} in rows

    def test_graph_command(self, rq2_run, capsys):
        tmp, log = rq2_run
        code, out, err = run(
            capsys, "graph", "--log", str(log), "--dest", "10.0.3.4",
            "--out", str(tmp / "g"), "--topology", str(FIXTURES / "half_split.topo"),
        )
        assert code == 0, err
        nodes = {r["node"]: r for r in csv.DictReader(open(tmp / "g_nodes.csv"))}
        assert nodes["0"]["color"] == "both"
        assert nodes["1"]["color"] == "only_clear"
        assert nodes["2"]["color"] == "only_censored"
        edges = list(csv.DictReader(open(tmp / "g_edges.csv")))
        assert {"src": "0", "dst": "2", "graph": "censored", "censoring": "true"} in edges

    def test_graph_without_topology_uses_base_columns(self, rq2_run, capsys):
        tmp, log = rq2_run
        code, _, err = run(
            capsys, "graph", "--log", str(log), "--dest", "10.0.3.4",
            "--out", str(tmp / "plain"),
        )
        assert code == 0, err
        header = (tmp / "plain_nodes.csv").read_text().splitlines()[0]
        assert header == "node,color"

    def test_classify_command(self, rq2_run, capsys):
        tmp, log = rq2_run
        code, out, err = run(
            capsys, "classify", "--log", str(log),
            "--topology", str(FIXTURES / "half_split.topo"),
        )
        assert code == 0, err
        rows = list(csv.DictReader(out.splitlines()))
        assert len(rows) == 1
        assert rows[0]["effect"] == "type1_failed_node"
        # the split happens at the transit router feeding the censoring AS
        assert rows[0]["scope"] == "inter"
        assert rows[0]["diverging_node"] == "0"

    def test_bits_command(self, rq2_run, capsys):
        tmp, log = rq2_run
        code, out, err = run(
            capsys, "bits", "--log", str(log), "--group-by", "src_ip_low3",
        )
        assert code == 0, err
        rows = list(csv.DictReader(out.splitlines()))
        assert len(rows) == 8
        odd_groups = {"001", "011", "101", "111"}
        for row in rows:
            if row["group"] in odd_groups:
                assert int(row["censored_cells"]) > 0
            else:
                assert int(row["censored_cells"]) == 0

    def test_log_verdicts_rederivable_from_observations(self, rq2_run):
        from flowstable import logio
        from flowstable.core import AppProtocol
        from flowstable.prober import (
            BlockpageRegistry, Observation, ObservationKind, classify,
        )

        tmp, log = rq2_run
        registry = BlockpageRegistry.load((FIXTURES / "blockpages.json").read_text())
        records = logio.read_log(log)
        obs = {}
        for r in records:
            if r["record_kind"] != "observation":
                continue
            key = (r["src_ip"], r["src_port"], r["sensitivity"])
            obs.setdefault(key, []).append(
                Observation(r["epoch"], ObservationKind(r["outcome"]), r["tag"])
            )
        checked = 0
        for r in records:
            if r["record_kind"] != "verdict":
                continue
            control = obs[(r["src_ip"], r["src_port"], "control")]
            sensitive = obs[(r["src_ip"], r["src_port"], "sensitive")]
            rederived = classify(control, sensitive, AppProtocol.HTTP, registry)
            assert logio.parse_verdict(r) == rederived
            checked += 1
        assert checked == 1664


class TestLiveTransportExit:
    def test_transport_error_exit_code(self, capsys, monkeypatch):
        import flowstable.cli as cli_mod
        from flowstable.prober import LiveTransport

        monkeypatch.setattr(cli_mod.prober, "SimTransport",
                            lambda topo, **kw: LiveTransport())
        code, _, err = run(
            capsys, "trace", "--topology", str(FIXTURES / "chain.topo"),
            "--dest", "3", "--src-ip", "198.51.100.7", "--src-port", "40000",
            "--protocol", "http",
        )
        assert code == 3
        assert "transport error" in err
