"""End-to-end CLI behaviour: exit codes, file outputs, determinism."""

import json

import pytest

from collgraph.cli import main, parse_size, parse_size_list, parse_topology_token
from collgraph.generators import AlgoSpec, Algorithm, generate
from collgraph.trace import (
    CollKind,
    CollectiveTrace,
    NodeKind,
    RecvAttrs,
    TraceBuilder,
    TraceNode,
    load_trace,
    save_trace,
)

MIB = 1024 * 1024


def run(*argv) -> int:
    return main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# Argument parsing helpers
# ---------------------------------------------------------------------------

def test_parse_size_suffixes():
    assert parse_size("4096") == 4096
    assert parse_size("4KiB") == 4096
    assert parse_size("2MiB") == 2 * MIB
    assert parse_size("1GiB") == 1 << 30
    with pytest.raises(Exception):
        parse_size("4MB")


def test_parse_size_list_geometric():
    assert parse_size_list("1KiB:64KiB:x4") == [1024, 4096, 16384, 65536]
    assert parse_size_list("1KiB,3KiB") == [1024, 3072]


def test_parse_topology_tokens():
    assert parse_topology_token("ring", 8).label() == "ring"
    assert parse_topology_token("fc", 8).n == 8
    assert parse_topology_token("mesh2d:2x4", 8).label() == "mesh2d:2x4"
    assert parse_topology_token("switch", 8).label() == "switch"
    with pytest.raises(Exception):
        parse_topology_token("hypercube", 8)


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def test_gen_single_rank_writes_empty_trace(tmp_path):
    out = tmp_path / "t.json"
    assert run("gen", "--algo", "ring-allreduce", "--ranks", 1,
               "--size", 1024, "-o", out) == 0
    trace = load_trace(out)
    assert trace.per_rank_nodes == ((),)


def test_gen_n4_writes_60_nodes(tmp_path):
    out = tmp_path / "t.json"
    assert run("gen", "--algo", "ring-allreduce", "--ranks", 4,
               "--size", 4194304, "-o", out) == 0
    trace = load_trace(out)
    assert sum(len(nodes) for nodes in trace.per_rank_nodes) == 60


def test_gen_rejects_non_power_of_two_recursive_doubling(tmp_path, capsys):
    code = run("gen", "--algo", "rd-allgather", "--ranks", 6,
               "--size", "1MiB", "-o", tmp_path / "t.json")
    assert code == 2
    assert "power-of-two" in capsys.readouterr().err


def test_unknown_flag_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("gen", "--bogus", "1")
    assert exc.value.code == 2


def test_gen_output_is_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert run("gen", "--algo", "ring-allgather", "--ranks", 4,
                   "--size", "1MiB", "-o", out) == 0
    assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------------------
# convert
# ---------------------------------------------------------------------------

def test_convert_fixture_then_validate(tmp_path, fixtures_dir):
    out = tmp_path / "conv.json"
    assert run("convert", "--msccl-xml", fixtures_dir / "ring_allreduce_n4.xml",
               "--size", "4MiB", "-o", out) == 0
    assert run("validate", out) == 0


def test_convert_malformed_xml_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.xml"
    bad.write_text("<algo name='x'")
    assert run("convert", "--msccl-xml", bad, "--size", 1024,
               "-o", tmp_path / "o.json") == 2
    assert "malformed" in capsys.readouterr().err


def test_convert_indivisible_size_exits_2(tmp_path, fixtures_dir, capsys):
    assert run("convert", "--msccl-xml", fixtures_dir / "ring_allreduce_n4.xml",
               "--size", 4 * MIB + 1, "-o", tmp_path / "o.json") == 2
    assert "divisible" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------

def test_validate_generated_trace_passes(tmp_path, capsys):
    path = tmp_path / "ar.json"
    save_trace(generate(AlgoSpec(Algorithm.RING_ALL_REDUCE, 4, 4 * MIB)), path)
    assert run("validate", path) == 0
    verdict = json.loads(capsys.readouterr().out)
    assert verdict["verdict"] == "PASS"
    assert verdict["violations"] == []


def test_validate_mutated_trace_fails_with_exit_3(tmp_path, capsys):
    trace = generate(AlgoSpec(Algorithm.RING_ALL_GATHER, 3, 999))
    rank1 = []
    for node in trace.per_rank_nodes[1]:
        if node.kind is NodeKind.COMM_RECV and node.attrs.chunks == (0,):
            node = TraceNode(node.id, node.name, node.kind, node.deps,
                             RecvAttrs(node.attrs.src_rank, node.attrs.comm_size,
                                       node.attrs.tag, (2,)))
        rank1.append(node)
    broken = CollectiveTrace(3, trace.claimed_collective,
                             [trace.per_rank_nodes[0], rank1, trace.per_rank_nodes[2]])
    path = tmp_path / "broken.json"
    save_trace(broken, path)
    assert run("validate", path) == 3
    verdict = json.loads(capsys.readouterr().out)
    assert verdict["verdict"] == "FAIL"
    assert verdict["violations"]


def test_validate_circular_wait_exits_4(fixtures_dir, capsys):
    assert run("validate", fixtures_dir / "circular_wait.json") == 4
    verdict = json.loads(capsys.readouterr().out)
    assert verdict["verdict"] == "STUCK"
    assert verdict["stuck_nodes"] == [[0, 0], [1, 0]]


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def test_simulate_reports_closed_form_duration(tmp_path, net_config, capsys):
    path = tmp_path / "ar.json"
    save_trace(generate(AlgoSpec(Algorithm.RING_ALL_REDUCE, 4, 4 * MIB)), path)
    out = tmp_path / "report.json"
    assert run("simulate", path, "--net", net_config, "-o", out) == 0
    report = json.loads(out.read_text())
    assert report["total_duration_s"] == pytest.approx(6.297456e-3, rel=1e-12)
    assert report["event_count"] > 0


def test_simulate_workload_exits_2(tmp_path, net_config, capsys):
    b = TraceBuilder(2)
    for r in range(2):
        b.add_coll(r, CollKind.ALL_REDUCE, 1024)
    path = tmp_path / "wl.json"
    save_trace(b.build_workload(), path)
    assert run("simulate", path, "--net", net_config) == 2
    assert "expanded" in capsys.readouterr().err


def test_simulate_circular_wait_exits_4(tmp_path, fixtures_dir, capsys):
    net = tmp_path / "net2.json"
    net.write_text('{"topology": {"kind": "ring", "n": 2}, "alpha_s": 1e-06, '
                   '"bandwidth_Bps": 1e9, "reduce_bandwidth_Bps": null}\n')
    assert run("simulate", fixtures_dir / "circular_wait.json", "--net", net) == 4
    err = capsys.readouterr().err
    assert "(0, 0)" in err and "(1, 0)" in err


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def test_sweep_csv_contents_and_determinism(tmp_path, net_config):
    out1, out2 = tmp_path / "s1.csv", tmp_path / "s2.csv"
    for out, jobs in ((out1, 1), (out2, 2)):
        assert run("sweep", "--algo", "ring-allreduce", "--ranks", 8,
                   "--sizes", "8KiB:128KiB:x4", "--topologies", "ring,fc,switch",
                   "--net", net_config, "--jobs", jobs, "-o", out) == 0
    assert out1.read_bytes() == out2.read_bytes()
    lines = out1.read_text().splitlines()
    assert lines[0] == "topology,size_bytes,duration_s,slowdown"
    rows = [line.split(",") for line in lines[1:]]
    assert [r[0] for r in rows] == ["ring"] * 3 + ["fc"] * 3 + ["switch"] * 3
    assert [int(r[1]) for r in rows[:3]] == [8192, 32768, 131072]
    for row in rows:
        if row[0] in ("ring", "fc"):
            assert float(row[3]) == 1.0
        else:
            assert 1.0 < float(row[3]) < 2.0


# ---------------------------------------------------------------------------
# expand
# ---------------------------------------------------------------------------

def write_chain_workload(path, n=4, size=4 * MIB):
    b = TraceBuilder(n)
    for r in range(n):
        c1 = b.add_comp(r, "fwd", 8 * MIB, name="fwd")
        ar = b.add_coll(r, CollKind.ALL_REDUCE, size, deps=[c1], name="sync")
        c2 = b.add_comp(r, "opt", 2 * MIB, deps=[ar], name="opt")
        b.add_coll(r, CollKind.ALL_GATHER, size, deps=[c2], name="gather")
    save_trace(b.build_workload(), path)


def test_expand_workload_with_two_bindings(tmp_path, net_config):
    workload = tmp_path / "wl.json"
    write_chain_workload(workload)
    out = tmp_path / "uni.json"
    assert run("expand", workload,
               "--bind", "ALL_REDUCE=ring-allreduce",
               "--bind", "ALL_GATHER=ring-allgather",
               "-o", out) == 0
    unified = load_trace(out)
    assert isinstance(unified, CollectiveTrace)
    assert run("simulate", out, "--net", net_config, "-o", tmp_path / "rep.json") == 0


def test_expand_missing_binding_exits_2(tmp_path, capsys):
    workload = tmp_path / "wl.json"
    write_chain_workload(workload)
    assert run("expand", workload, "--bind", "ALL_REDUCE=ring-allreduce",
               "-o", tmp_path / "u.json") == 2
    assert "no binding" in capsys.readouterr().err


def test_expand_accepts_trace_file_binding(tmp_path):
    workload = tmp_path / "wl.json"
    b = TraceBuilder(2)
    for r in range(2):
        b.add_coll(r, CollKind.ALL_GATHER, MIB)
    save_trace(b.build_workload(), workload)
    binding = tmp_path / "ag.json"
    save_trace(generate(AlgoSpec(Algorithm.RING_ALL_GATHER, 2, MIB)), binding)
    out = tmp_path / "u.json"
    assert run("expand", workload, "--bind", f"ALL_GATHER=file:{binding}",
               "-o", out) == 0
    assert load_trace(out).num_ranks == 2


def test_expand_of_coll_free_workload_is_byte_identical(tmp_path):
    workload = tmp_path / "wl.json"
    b = TraceBuilder(2)
    for r in range(2):
        first = b.add_comp(r, "a", 64, name="a")
        b.add_comp(r, "b", 64, deps=[first], name="b")
    save_trace(b.build_workload(), workload)
    out = tmp_path / "same.json"
    assert run("expand", workload, "-o", out) == 0
    assert out.read_bytes() == workload.read_bytes()


def test_help_on_every_subcommand():
    for command in ("gen", "convert", "validate", "simulate", "sweep", "expand"):
        with pytest.raises(SystemExit) as exc:
            run(command, "--help")
        assert exc.value.code == 0


def test_log_level_env_var(tmp_path, monkeypatch):
    import logging

    monkeypatch.setenv("COLLGRAPH_LOG", "DEBUG")
    assert run("gen", "--algo", "ring-allgather", "--ranks", 2,
               "--size", 1024, "-o", tmp_path / "t.json") == 0
    assert logging.getLogger("collgraph").level == logging.DEBUG
    monkeypatch.setenv("COLLGRAPH_LOG", "WARNING")
    run("gen", "--algo", "ring-allgather", "--ranks", 2,
        "--size", 1024, "-o", tmp_path / "t.json")
    assert logging.getLogger("collgraph").level == logging.WARNING
