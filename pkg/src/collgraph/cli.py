"""Command-line entry point: gen / convert / validate / expand / simulate /
sweep, wired as one pipeline from algorithm producers to the network replay.

Exit codes: 0 success, 2 bad input (usage, spec, parse, schema, size,
binding), 3 semantic validation FAIL, 4 deadlock (validator stuck or
simulator stall). All outputs are byte-deterministic for identical inputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

from .errors import (
    CollGraphError,
    DeadlockError,
    StuckError,
)
from .expander import Binding, expand
from .generators import AlgoSpec, Algorithm, generate
from .msccl import convert_to_trace, parse_msccl_xml
from .simulator import CostModel, Topology, TopologyKind, simulate, sweep
from .trace import CollKind, CollectiveTrace, WorkloadTrace, load_trace, save_trace
from .validator import FAIL, check_semantics

log = logging.getLogger("collgraph")

_SIZE_SUFFIX = {"KiB": 1 << 10, "MiB": 1 << 20, "GiB": 1 << 30}


def parse_size(text: str) -> int:
    """Byte count, optionally with a KiB/MiB/GiB suffix."""
    match = re.fullmatch(r"(\d+)(KiB|MiB|GiB)?", text)
    if not match:
        raise argparse.ArgumentTypeError(
            f"invalid size {text!r}; expected e.g. 4096 or 4MiB")
    return int(match.group(1)) * _SIZE_SUFFIX.get(match.group(2), 1)


def parse_size_list(text: str) -> list[int]:
    """Either a comma list of sizes or a geometric sweep `lo:hi:xK`."""
    if ":" in text:
        match = re.fullmatch(r"([^:]+):([^:]+):x(\d+)", text)
        if not match:
            raise argparse.ArgumentTypeError(
                f"invalid sweep {text!r}; expected lo:hi:xK, e.g. 1KiB:64MiB:x4")
        lo, hi = parse_size(match.group(1)), parse_size(match.group(2))
        factor = int(match.group(3))
        if factor < 2 or lo > hi:
            raise argparse.ArgumentTypeError(f"invalid sweep bounds in {text!r}")
        sizes = []
        size = lo
        while size <= hi:
            sizes.append(size)
            size *= factor
        return sizes
    return [parse_size(part) for part in text.split(",")]


_TOPO_ALIASES = {
    "ring": TopologyKind.RING,
    "fc": TopologyKind.FULLY_CONNECTED,
    "fully_connected": TopologyKind.FULLY_CONNECTED,
    "switch": TopologyKind.SWITCH,
}


def parse_topology_token(token: str, num_ranks: int) -> Topology:
    """CLI topology syntax: ring | fc | switch | mesh2d:RxC | torus2d:RxC."""
    if token in _TOPO_ALIASES:
        return Topology(_TOPO_ALIASES[token], num_ranks)
    match = re.fullmatch(r"(mesh2d|torus2d):(\d+)x(\d+)", token)
    if not match:
        raise argparse.ArgumentTypeError(f"unknown topology {token!r}")
    rows, cols = int(match.group(2)), int(match.group(3))
    maker = Topology.mesh2d if match.group(1) == "mesh2d" else Topology.torus2d
    return maker(rows, cols)


def load_net_config(path) -> tuple[Topology | None, CostModel]:
    """Network config JSON: alpha_s, bandwidth_Bps, reduce_bandwidth_Bps
    (null = infinite), optional fixed_comp_overhead_s, optional topology
    {kind, n | rows+cols}."""
    with open(path, encoding="utf-8") as handle:
        doc = json.load(handle)
    if not isinstance(doc, dict):
        raise CollGraphError(f"{path}: net config must be a JSON object")
    try:
        cost = CostModel(
            alpha=float(doc["alpha_s"]),
            bandwidth=float(doc["bandwidth_Bps"]),
            reduce_bandwidth=(
                None if doc.get("reduce_bandwidth_Bps") is None
                else float(doc["reduce_bandwidth_Bps"])
            ),
            fixed_comp_overhead=float(doc.get("fixed_comp_overhead_s", 0.0)),
        )
    except KeyError as exc:
        raise CollGraphError(f"{path}: missing net config key {exc}") from None
    topo_obj = doc.get("topology")
    if topo_obj is None:
        return None, cost
    kind_name = topo_obj.get("kind")
    if kind_name in _TOPO_ALIASES:
        kind = _TOPO_ALIASES[kind_name]
    elif kind_name in ("mesh2d", "torus2d"):
        kind = TopologyKind(kind_name)
    else:
        raise CollGraphError(f"{path}: unknown topology kind {kind_name!r}")
    if kind in (TopologyKind.MESH2D, TopologyKind.TORUS2D):
        rows, cols = int(topo_obj["rows"]), int(topo_obj["cols"])
        topology = Topology(kind, rows * cols, rows, cols)
    else:
        topology = Topology(kind, int(topo_obj["n"]))
    return topology, cost


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    spec = AlgoSpec(Algorithm(args.algo), args.ranks, args.size)
    save_trace(generate(spec), args.output)
    log.info("wrote %s", args.output)
    return 0


def cmd_convert(args) -> int:
    program = parse_msccl_xml(args.msccl_xml)
    save_trace(convert_to_trace(program, args.size), args.output)
    log.info("wrote %s", args.output)
    return 0


def cmd_validate(args) -> int:
    trace = load_trace(args.trace, matching=False)
    if not isinstance(trace, CollectiveTrace):
        raise CollGraphError("validate expects a collective trace, got a workload")
    try:
        verdict = check_semantics(trace)
    except StuckError as exc:
        print(json.dumps({
            "verdict": "STUCK",
            "violations": [],
            "stuck_nodes": [list(pair) for pair in exc.frontier],
            "warnings": [],
        }, indent=2))
        return 4
    print(json.dumps(verdict.to_json(), indent=2))
    return 3 if verdict.status == FAIL else 0


def cmd_simulate(args) -> int:
    trace = load_trace(args.trace)
    topology, cost = load_net_config(args.net)
    if topology is None:
        raise CollGraphError(f"{args.net}: simulate needs a topology entry")
    report = simulate(trace, topology, cost)
    text = json.dumps(report.to_json(), indent=2) + "\n"
    if args.output:
        Path(args.output).write_bytes(text.encode("utf-8"))
    else:
        sys.stdout.write(text)
    return 0


def cmd_sweep(args) -> int:
    _, cost = load_net_config(args.net)
    topologies = [parse_topology_token(token, args.ranks)
                  for token in args.topologies.split(",")]
    rows = sweep(Algorithm(args.algo), args.ranks, args.sizes, topologies, cost,
                 jobs=args.jobs)
    lines = ["topology,size_bytes,duration_s,slowdown"]
    lines += [f"{r.topology},{r.size_bytes},{r.duration_s!r},{r.slowdown!r}"
              for r in rows]
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_bytes(text.encode("utf-8"))
    else:
        sys.stdout.write(text)
    return 0


def _parse_binding(value: str) -> tuple[CollKind, Binding]:
    if "=" not in value:
        raise argparse.ArgumentTypeError(
            f"invalid binding {value!r}; expected KIND=algorithm or KIND=file")
    kind_name, _, target = value.partition("=")
    try:
        kind = CollKind(kind_name)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"unknown collective kind {kind_name!r}; expected one of "
            f"{[k.value for k in CollKind]}") from None
    try:
        return kind, Algorithm(target)
    except ValueError:
        pass
    path = target[5:] if target.startswith("file:") else target
    if not os.path.exists(path):
        raise argparse.ArgumentTypeError(
            f"binding target {target!r} is neither an algorithm "
            f"({[a.value for a in Algorithm]}) nor an existing trace file")
    return kind, path


def cmd_expand(args) -> int:
    workload = load_trace(args.workload)
    if not isinstance(workload, WorkloadTrace):
        raise CollGraphError("expand expects a workload trace")
    has_colls = any(node.kind.value == "COMM_COLL"
                    for nodes in workload.per_rank_nodes for node in nodes)
    if not has_colls:
        # nothing to splice: expansion is the identity, byte for byte
        save_trace(workload, args.output)
        log.info("wrote %s (no collectives to expand)", args.output)
        return 0
    bindings: dict[CollKind, Binding] = {}
    for kind, target in args.bind or []:
        if isinstance(target, str):
            bound = load_trace(target)
            if not isinstance(bound, CollectiveTrace):
                raise CollGraphError(f"binding file {target} is not a collective trace")
            bindings[kind] = bound
        else:
            bindings[kind] = target
    save_trace(expand(workload, bindings), args.output)
    log.info("wrote %s", args.output)
    return 0


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="collgraph",
        description="Generate, convert, validate, expand and simulate "
                    "collective algorithm traces.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a collective algorithm trace")
    gen.add_argument("--algo", required=True, choices=[a.value for a in Algorithm])
    gen.add_argument("--ranks", required=True, type=int)
    gen.add_argument("--size", required=True, type=parse_size,
                     help="collective size in bytes (KiB/MiB/GiB suffixes allowed)")
    gen.add_argument("-o", "--output", required=True)
    gen.set_defaults(func=cmd_gen)

    convert = sub.add_parser("convert", help="convert an MSCCL-IR XML program")
    convert.add_argument("--msccl-xml", required=True)
    convert.add_argument("--size", required=True, type=parse_size,
                         help="total collective size in bytes")
    convert.add_argument("-o", "--output", required=True)
    convert.set_defaults(func=cmd_convert)

    validate = sub.add_parser("validate", help="semantically validate a trace")
    validate.add_argument("trace")
    validate.set_defaults(func=cmd_validate)

    sim = sub.add_parser("simulate", help="replay a trace on a network model")
    sim.add_argument("trace")
    sim.add_argument("--net", required=True, help="network config JSON")
    sim.add_argument("-o", "--output", help="report JSON path (default: stdout)")
    sim.set_defaults(func=cmd_simulate)

    sw = sub.add_parser("sweep", help="compare topologies across collective sizes")
    sw.add_argument("--algo", required=True, choices=[a.value for a in Algorithm])
    sw.add_argument("--ranks", required=True, type=int)
    sw.add_argument("--sizes", required=True, type=parse_size_list,
                    help="comma list or geometric lo:hi:xK, e.g. 1KiB:64MiB:x4")
    sw.add_argument("--topologies", required=True,
                    help="comma list: ring,fc,switch,mesh2d:RxC,torus2d:RxC")
    sw.add_argument("--net", required=True, help="network config JSON (costs)")
    sw.add_argument("--jobs", type=int, default=1,
                    help="parallel simulations (output is identical for any value)")
    sw.add_argument("-o", "--output", help="CSV path (default: stdout)")
    sw.set_defaults(func=cmd_sweep)

    exp = sub.add_parser("expand", help="splice collective algorithms into a workload")
    exp.add_argument("workload")
    exp.add_argument("--bind", action="append", type=_parse_binding, metavar="KIND=SPEC",
                     help="e.g. ALL_REDUCE=ring-allreduce or ALL_GATHER=file:trace.json")
    exp.add_argument("-o", "--output", required=True)
    exp.set_defaults(func=cmd_expand)
    return parser


def main(argv=None) -> int:
    level_name = os.environ.get("COLLGRAPH_LOG", "WARNING").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (StuckError, DeadlockError) as exc:
        print(f"collgraph: {exc}", file=sys.stderr)
        return 4
    except (CollGraphError, OverflowError, OSError) as exc:
        print(f"collgraph: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
