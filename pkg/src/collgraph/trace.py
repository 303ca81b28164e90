"""Common graph representation for collective algorithms and workloads.

A trace holds one dependency graph per rank. Vertices are send / recv /
compute operations (collective placeholders in workload traces); edges are
intra-rank dependencies only. Cross-rank ordering is expressed exclusively
through send/recv tag matching, so each rank's graph stays independently
analyzable.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Union

from .errors import CycleError, InvariantError, ParseError, SchemaError

FORMAT_VERSION = "1"

# Defined COMP operations. The op vocabulary is open (any string is stored);
# only these three carry defined validator/cost semantics.
OP_REDUCE = "REDUCE"
OP_COPY = "COPY"
OP_NOP = "NOP"


class NodeKind(Enum):
    COMM_SEND = "COMM_SEND"
    COMM_RECV = "COMM_RECV"
    COMP = "COMP"
    COMM_COLL = "COMM_COLL"


class CollKind(Enum):
    ALL_REDUCE = "ALL_REDUCE"
    ALL_GATHER = "ALL_GATHER"
    REDUCE_SCATTER = "REDUCE_SCATTER"
    BROADCAST = "BROADCAST"


def _freeze_chunks(value):
    return None if value is None else tuple(int(c) for c in value)


@dataclass(frozen=True)
class SendAttrs:
    """Point-to-point message emission. `chunks` is optional validation
    metadata naming the chunk indices read by this send."""

    dst_rank: int
    comm_size: int
    tag: int
    chunks: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "chunks", _freeze_chunks(self.chunks))


@dataclass(frozen=True)
class RecvAttrs:
    """Wait for a matching message. `chunks` names the chunk indices the
    payload is delivered into."""

    src_rank: int
    comm_size: int
    tag: int
    chunks: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "chunks", _freeze_chunks(self.chunks))


@dataclass(frozen=True)
class CompAttrs:
    """Local compute. `chunks` is the written chunk range, `src_chunks` an
    optional local read range (for buffer-to-buffer reduce/copy)."""

    op: str
    comp_size: int
    chunks: Optional[tuple[int, ...]] = None
    src_chunks: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "chunks", _freeze_chunks(self.chunks))
        object.__setattr__(self, "src_chunks", _freeze_chunks(self.src_chunks))


@dataclass(frozen=True)
class CollAttrs:
    """Workload-side placeholder for a collective of a given kind/size."""

    coll_kind: CollKind
    comm_size: int


Attrs = Union[SendAttrs, RecvAttrs, CompAttrs, CollAttrs]

_KIND_FOR_ATTRS = {
    SendAttrs: NodeKind.COMM_SEND,
    RecvAttrs: NodeKind.COMM_RECV,
    CompAttrs: NodeKind.COMP,
    CollAttrs: NodeKind.COMM_COLL,
}


@dataclass(frozen=True)
class TraceNode:
    """One operation on one rank. `deps` lists same-rank node ids that must
    finish first; it is normalized to a sorted tuple."""

    id: int
    name: str
    kind: NodeKind
    deps: tuple[int, ...]
    attrs: Attrs

    def __post_init__(self):
        object.__setattr__(self, "deps", tuple(sorted(int(d) for d in self.deps)))


@dataclass(frozen=True)
class CollDescriptor:
    """What collective a trace claims to implement. For ALL_REDUCE and
    REDUCE_SCATTER `comm_size` is the per-rank buffer size; for ALL_GATHER
    and BROADCAST it is the per-rank input size."""

    kind: CollKind
    comm_size: int


def _freeze_ranks(per_rank_nodes):
    return tuple(tuple(nodes) for nodes in per_rank_nodes)


@dataclass(frozen=True)
class CollectiveTrace:
    """Per-rank graphs of SEND/RECV/COMP nodes implementing one collective.

    `claimed_collective` may be None for unified traces produced by the
    expander, which splice several collectives into one graph.
    """

    num_ranks: int
    claimed_collective: Optional[CollDescriptor]
    per_rank_nodes: tuple[tuple[TraceNode, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "per_rank_nodes", _freeze_ranks(self.per_rank_nodes))


@dataclass(frozen=True)
class WorkloadTrace:
    """Per-rank graphs of COMP and COMM_COLL placeholder nodes (SPMD)."""

    num_ranks: int
    per_rank_nodes: tuple[tuple[TraceNode, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "per_rank_nodes", _freeze_ranks(self.per_rank_nodes))


Trace = Union[CollectiveTrace, WorkloadTrace]


# ---------------------------------------------------------------------------
# Graph utilities
# ---------------------------------------------------------------------------

def node_map(trace: Trace, rank: int) -> dict[int, TraceNode]:
    return {n.id: n for n in trace.per_rank_nodes[rank]}


def toposort_rank(trace: Trace, rank: int) -> list[int]:
    """Topological order of one rank's nodes, ties broken by ascending id.

    Raises CycleError carrying the ids of one dependency cycle.
    """
    nodes = node_map(trace, rank)
    dependents: dict[int, list[int]] = {nid: [] for nid in nodes}
    pending = {}
    ready = []
    for node in nodes.values():
        pending[node.id] = len(node.deps)
        for dep in node.deps:
            dependents[dep].append(node.id)
        if not node.deps:
            heapq.heappush(ready, node.id)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for succ in dependents[nid]:
            pending[succ] -= 1
            if pending[succ] == 0:
                heapq.heappush(ready, succ)
    if len(order) < len(nodes):
        raise CycleError(f"dependency cycle on rank {rank}", _find_cycle(nodes, set(order)))
    return order


def _find_cycle(nodes: dict[int, TraceNode], done: set[int]) -> list[int]:
    # Walk unfinished deps until a node repeats; the repeated tail is a cycle.
    start = min(nid for nid in nodes if nid not in done)
    path, seen = [], {}
    nid = start
    while nid not in seen:
        seen[nid] = len(path)
        path.append(nid)
        nid = next(d for d in nodes[nid].deps if d not in done)
    return path[seen[nid]:]


def coll_sequence(workload: WorkloadTrace, rank: int) -> list[TraceNode]:
    """COMM_COLL nodes of one rank in topological (tie: id) order."""
    nodes = node_map(workload, rank)
    return [
        nodes[nid]
        for nid in toposort_rank(workload, rank)
        if nodes[nid].kind is NodeKind.COMM_COLL
    ]


# ---------------------------------------------------------------------------
# Invariant checking
# ---------------------------------------------------------------------------

def check_trace(trace: Trace, *, matching: bool = True) -> None:
    """Verify every structural invariant; raise InvariantError on the first
    violation (with rank and node id).

    `matching=False` skips send/recv completeness (tag uniqueness is still
    enforced); the semantic validator uses this to execute deliberately
    broken traces instead of rejecting them up front.
    """
    if trace.num_ranks < 1:
        raise InvariantError(f"num_ranks must be positive, got {trace.num_ranks}")
    if len(trace.per_rank_nodes) != trace.num_ranks:
        raise InvariantError(
            f"expected {trace.num_ranks} rank node lists, got {len(trace.per_rank_nodes)}"
        )
    is_workload = isinstance(trace, WorkloadTrace)
    for rank, nodes in enumerate(trace.per_rank_nodes):
        ids = set()
        for node in nodes:
            _check_node(trace, rank, node, is_workload)
            if node.id in ids:
                raise InvariantError("duplicate node id", rank, node.id)
            ids.add(node.id)
        for node in nodes:
            for dep in node.deps:
                if dep not in ids:
                    raise InvariantError(f"dep {dep} does not exist on this rank", rank, node.id)
                if dep == node.id:
                    raise InvariantError("node depends on itself", rank, node.id)
        try:
            toposort_rank(trace, rank)
        except CycleError as exc:
            raise InvariantError(f"dependency cycle {exc.cycle}", rank, exc.cycle[0]) from exc
    if is_workload:
        _check_spmd(trace)
    else:
        message_index(trace, require_complete=matching)


def _check_node(trace: Trace, rank: int, node: TraceNode, is_workload: bool) -> None:
    if node.id < 0:
        raise InvariantError("node id must be non-negative", rank, node.id)
    expected_kind = _KIND_FOR_ATTRS.get(type(node.attrs))
    if expected_kind is None or node.kind is not expected_kind:
        raise InvariantError(
            f"kind {node.kind.value} inconsistent with attrs {type(node.attrs).__name__}",
            rank, node.id,
        )
    a = node.attrs
    if isinstance(a, (SendAttrs, RecvAttrs)):
        if is_workload:
            raise InvariantError("workload traces may contain only COMP and COMM_COLL nodes",
                                 rank, node.id)
        peer = a.dst_rank if isinstance(a, SendAttrs) else a.src_rank
        role = "dst_rank" if isinstance(a, SendAttrs) else "src_rank"
        if not 0 <= peer < trace.num_ranks:
            raise InvariantError(f"{role} {peer} out of range", rank, node.id)
        if peer == rank:
            raise InvariantError(f"{role} must differ from the owning rank", rank, node.id)
        if a.comm_size <= 0:
            raise InvariantError(f"comm_size must be positive, got {a.comm_size}", rank, node.id)
        if a.tag < 0:
            raise InvariantError(f"tag must be non-negative, got {a.tag}", rank, node.id)
    elif isinstance(a, CompAttrs):
        if a.comp_size < 0:
            raise InvariantError(f"comp_size must be non-negative, got {a.comp_size}",
                                 rank, node.id)
    elif isinstance(a, CollAttrs):
        if not is_workload:
            raise InvariantError("COMM_COLL may appear only in workload traces", rank, node.id)
        if a.comm_size <= 0:
            raise InvariantError(f"comm_size must be positive, got {a.comm_size}", rank, node.id)


def message_index(trace: CollectiveTrace, *, require_complete: bool = True):
    """Index SEND and RECV nodes by (src, dst, tag).

    Returns (sends, recvs) mapping the key to (node_id, comm_size). Raises
    InvariantError on duplicate tags always, and on unmatched or
    size-mismatched pairs when `require_complete` is set.
    """
    sends: dict[tuple[int, int, int], tuple[int, int]] = {}
    recvs: dict[tuple[int, int, int], tuple[int, int]] = {}
    for rank, nodes in enumerate(trace.per_rank_nodes):
        for node in nodes:
            if node.kind is NodeKind.COMM_SEND:
                key = (rank, node.attrs.dst_rank, node.attrs.tag)
                if key in sends:
                    raise InvariantError(
                        f"duplicate tag {node.attrs.tag} for sends {rank}->{key[1]}",
                        rank, node.id)
                sends[key] = (node.id, node.attrs.comm_size)
            elif node.kind is NodeKind.COMM_RECV:
                key = (node.attrs.src_rank, rank, node.attrs.tag)
                if key in recvs:
                    raise InvariantError(
                        f"duplicate tag {node.attrs.tag} for recvs {key[0]}->{rank}",
                        rank, node.id)
                recvs[key] = (node.id, node.attrs.comm_size)
    if require_complete:
        for (src, dst, tag), (nid, size) in sends.items():
            match = recvs.get((src, dst, tag))
            if match is None:
                raise InvariantError(f"unmatched send {src}->{dst} tag {tag}", src, nid)
            if match[1] != size:
                raise InvariantError(
                    f"send {src}->{dst} tag {tag} has size {size} but recv expects {match[1]}",
                    src, nid)
        for (src, dst, tag), (nid, _) in recvs.items():
            if (src, dst, tag) not in sends:
                raise InvariantError(f"unmatched recv from {src} tag {tag}", dst, nid)
    return sends, recvs


def _check_spmd(trace: WorkloadTrace) -> None:
    """All ranks must issue the same ordered collective sequence."""
    reference = None
    for rank in range(trace.num_ranks):
        seq = [(n.attrs.coll_kind, n.attrs.comm_size) for n in coll_sequence(trace, rank)]
        if reference is None:
            reference = seq
        elif seq != reference:
            raise InvariantError(
                f"rank {rank} collective sequence {seq} differs from rank 0 {reference}",
                rank)


# ---------------------------------------------------------------------------
# Builder
# ---------------------------------------------------------------------------

class TraceBuilder:
    """Accumulates per-rank nodes, then freezes them into a trace.

    Tags may be left implicit: each direction (src, dst) gets consecutive
    tags starting at 0, assigned in add order independently on the send and
    recv side, so FIFO-paired programs match up without bookkeeping.
    """

    def __init__(self, num_ranks: int):
        self.num_ranks = num_ranks
        self._nodes: list[list[TraceNode]] = [[] for _ in range(num_ranks)]
        self._send_seq: dict[tuple[int, int], int] = {}
        self._recv_seq: dict[tuple[int, int], int] = {}

    def _add(self, rank: int, name: str, attrs: Attrs, deps) -> int:
        nid = len(self._nodes[rank])
        kind = _KIND_FOR_ATTRS[type(attrs)]
        self._nodes[rank].append(TraceNode(nid, name, kind, tuple(deps), attrs))
        return nid

    def _next_tag(self, table, src, dst) -> int:
        tag = table.get((src, dst), 0)
        table[(src, dst)] = tag + 1
        return tag

    def add_send(self, rank, dst, size, deps=(), chunks=None, name="send", tag=None) -> int:
        if tag is None:
            tag = self._next_tag(self._send_seq, rank, dst)
        return self._add(rank, name, SendAttrs(dst, size, tag, chunks), deps)

    def add_recv(self, rank, src, size, deps=(), chunks=None, name="recv", tag=None) -> int:
        if tag is None:
            tag = self._next_tag(self._recv_seq, src, rank)
        return self._add(rank, name, RecvAttrs(src, size, tag, chunks), deps)

    def add_comp(self, rank, op, size, deps=(), chunks=None, src_chunks=None, name="comp") -> int:
        return self._add(rank, name, CompAttrs(op, size, chunks, src_chunks), deps)

    def add_coll(self, rank, kind: CollKind, size, deps=(), name="coll") -> int:
        return self._add(rank, name, CollAttrs(kind, size), deps)

    def build_collective(self, claimed: Optional[CollDescriptor]) -> CollectiveTrace:
        trace = CollectiveTrace(self.num_ranks, claimed, self._nodes)
        check_trace(trace)
        return trace

    def build_workload(self) -> WorkloadTrace:
        trace = WorkloadTrace(self.num_ranks, self._nodes)
        check_trace(trace)
        return trace


# ---------------------------------------------------------------------------
# Serialization (canonical JSON, schema version 1)
# ---------------------------------------------------------------------------

def _attrs_to_json(attrs: Attrs) -> dict:
    if isinstance(attrs, SendAttrs):
        out = {"dst_rank": attrs.dst_rank, "comm_size": attrs.comm_size, "tag": attrs.tag}
        if attrs.chunks is not None:
            out["chunks"] = list(attrs.chunks)
    elif isinstance(attrs, RecvAttrs):
        out = {"src_rank": attrs.src_rank, "comm_size": attrs.comm_size, "tag": attrs.tag}
        if attrs.chunks is not None:
            out["chunks"] = list(attrs.chunks)
    elif isinstance(attrs, CompAttrs):
        out = {"op": attrs.op, "comp_size": attrs.comp_size}
        if attrs.chunks is not None:
            out["chunks"] = list(attrs.chunks)
        if attrs.src_chunks is not None:
            out["src_chunks"] = list(attrs.src_chunks)
    else:
        out = {"coll_kind": attrs.coll_kind.value, "comm_size": attrs.comm_size}
    return out


def trace_to_json(trace: Trace) -> dict:
    """Canonical dict form: nodes in ascending id order, fixed key order."""
    if isinstance(trace, WorkloadTrace):
        trace_class, claimed = "workload", None
    else:
        trace_class = "collective"
        claimed = (
            None
            if trace.claimed_collective is None
            else {
                "kind": trace.claimed_collective.kind.value,
                "comm_size": trace.claimed_collective.comm_size,
            }
        )
    ranks = []
    for nodes in trace.per_rank_nodes:
        ranks.append(
            [
                {
                    "id": n.id,
                    "name": n.name,
                    "kind": n.kind.value,
                    "deps": list(n.deps),
                    "attrs": _attrs_to_json(n.attrs),
                }
                for n in sorted(nodes, key=lambda n: n.id)
            ]
        )
    return {
        "format_version": FORMAT_VERSION,
        "trace_class": trace_class,
        "num_ranks": trace.num_ranks,
        "claimed_collective": claimed,
        "ranks": ranks,
    }


def dumps_trace(trace: Trace) -> str:
    check_trace(trace)
    return json.dumps(trace_to_json(trace), indent=2, ensure_ascii=False) + "\n"


def save_trace(trace: Trace, path) -> None:
    """Write the canonical form; identical traces produce identical bytes.
    Refuses (before writing anything) if the trace violates an invariant."""
    text = dumps_trace(trace)
    Path(path).write_bytes(text.encode("utf-8"))


def _expect(obj: dict, key: str, types, where: str):
    if key not in obj:
        raise SchemaError(f"missing key '{key}' in {where}")
    value = obj[key]
    if not isinstance(value, types) or isinstance(value, bool):
        raise SchemaError(f"key '{key}' in {where} has wrong type {type(value).__name__}")
    return value


_TOP_KEYS = {"format_version", "trace_class", "num_ranks", "claimed_collective", "ranks"}
_NODE_KEYS = {"id", "name", "kind", "deps", "attrs"}
_ATTR_KEYS = {
    NodeKind.COMM_SEND: ({"dst_rank", "comm_size", "tag"}, {"chunks"}),
    NodeKind.COMM_RECV: ({"src_rank", "comm_size", "tag"}, {"chunks"}),
    NodeKind.COMP: ({"op", "comp_size"}, {"chunks", "src_chunks"}),
    NodeKind.COMM_COLL: ({"coll_kind", "comm_size"}, set()),
}


def _chunks_from_json(attrs: dict, key: str, where: str):
    if key not in attrs:
        return None
    value = attrs[key]
    if not isinstance(value, list) or not all(
        isinstance(c, int) and not isinstance(c, bool) and c >= 0 for c in value
    ):
        raise SchemaError(f"'{key}' in {where} must be a list of non-negative ints")
    return tuple(value)


def _node_from_json(obj: dict, where: str) -> TraceNode:
    if not isinstance(obj, dict):
        raise SchemaError(f"node in {where} must be an object")
    unknown = set(obj) - _NODE_KEYS
    if unknown:
        raise SchemaError(f"unknown node key(s) {sorted(unknown)} in {where}")
    nid = _expect(obj, "id", int, where)
    name = _expect(obj, "name", str, where)
    kind_name = _expect(obj, "kind", str, where)
    try:
        kind = NodeKind(kind_name)
    except ValueError:
        raise SchemaError(f"unknown node kind '{kind_name}' in {where}") from None
    deps = _expect(obj, "deps", list, where)
    if not all(isinstance(d, int) and not isinstance(d, bool) for d in deps):
        raise SchemaError(f"deps in {where} must be integers")
    attrs_obj = _expect(obj, "attrs", dict, where)
    required, optional = _ATTR_KEYS[kind]
    missing = required - set(attrs_obj)
    if missing:
        raise SchemaError(f"missing attribute(s) {sorted(missing)} for {kind.value} in {where}")
    unknown = set(attrs_obj) - required - optional
    if unknown:
        raise SchemaError(f"unknown attribute(s) {sorted(unknown)} for {kind.value} in {where}")
    if kind is NodeKind.COMM_SEND:
        attrs: Attrs = SendAttrs(
            _expect(attrs_obj, "dst_rank", int, where),
            _expect(attrs_obj, "comm_size", int, where),
            _expect(attrs_obj, "tag", int, where),
            _chunks_from_json(attrs_obj, "chunks", where),
        )
    elif kind is NodeKind.COMM_RECV:
        attrs = RecvAttrs(
            _expect(attrs_obj, "src_rank", int, where),
            _expect(attrs_obj, "comm_size", int, where),
            _expect(attrs_obj, "tag", int, where),
            _chunks_from_json(attrs_obj, "chunks", where),
        )
    elif kind is NodeKind.COMP:
        attrs = CompAttrs(
            _expect(attrs_obj, "op", str, where),
            _expect(attrs_obj, "comp_size", int, where),
            _chunks_from_json(attrs_obj, "chunks", where),
            _chunks_from_json(attrs_obj, "src_chunks", where),
        )
    else:
        coll_name = _expect(attrs_obj, "coll_kind", str, where)
        try:
            coll_kind = CollKind(coll_name)
        except ValueError:
            raise SchemaError(f"unknown coll_kind '{coll_name}' in {where}") from None
        attrs = CollAttrs(coll_kind, _expect(attrs_obj, "comm_size", int, where))
    return TraceNode(nid, name, kind, tuple(deps), attrs)


def loads_trace(text: str, *, matching: bool = True) -> Trace:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg} at line {exc.lineno}, column {exc.colno}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("top level must be an object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise SchemaError(f"unknown top-level key(s) {sorted(unknown)}")
    version = _expect(doc, "format_version", str, "top level")
    if version != FORMAT_VERSION:
        raise SchemaError(f"unsupported format_version '{version}'")
    trace_class = _expect(doc, "trace_class", str, "top level")
    if trace_class not in ("collective", "workload"):
        raise SchemaError(f"unknown trace_class '{trace_class}'")
    num_ranks = _expect(doc, "num_ranks", int, "top level")
    ranks_obj = _expect(doc, "ranks", list, "top level")
    if "claimed_collective" not in doc:
        raise SchemaError("missing key 'claimed_collective' in top level")
    claimed_obj = doc["claimed_collective"]
    claimed = None
    if claimed_obj is not None:
        if not isinstance(claimed_obj, dict) or set(claimed_obj) != {"kind", "comm_size"}:
            raise SchemaError("claimed_collective must be null or {kind, comm_size}")
        try:
            claimed_kind = CollKind(claimed_obj["kind"])
        except (ValueError, TypeError):
            raise SchemaError(f"unknown collective kind '{claimed_obj['kind']}'") from None
        claimed = CollDescriptor(claimed_kind, _expect(claimed_obj, "comm_size", int,
                                                       "claimed_collective"))
    per_rank = []
    for rank, nodes_obj in enumerate(ranks_obj):
        if not isinstance(nodes_obj, list):
            raise SchemaError(f"rank {rank} entry must be a list of nodes")
        per_rank.append(
            [_node_from_json(obj, f"rank {rank}, node index {i}")
             for i, obj in enumerate(nodes_obj)]
        )
    if trace_class == "workload":
        if claimed is not None:
            raise SchemaError("workload traces must have claimed_collective: null")
        trace: Trace = WorkloadTrace(num_ranks, per_rank)
    else:
        trace = CollectiveTrace(num_ranks, claimed, per_rank)
    check_trace(trace, matching=matching)
    return trace


def load_trace(path, *, matching: bool = True) -> Trace:
    """Load, schema-check and invariant-check a trace file.

    `matching=False` admits traces with unmatched sends/receives so the
    semantic validator can diagnose them instead.
    """
    return loads_trace(Path(path).read_text(encoding="utf-8"), matching=matching)
