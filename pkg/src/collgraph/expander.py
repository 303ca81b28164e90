"""Splice collective algorithm subgraphs into workload graphs.

Each COMM_COLL placeholder is replaced, rank by rank, with that rank's
subgraph from the bound collective trace: edges into the placeholder
re-target every root of the subgraph, edges out re-source from every sink.
Node ids are renumbered and tags are lifted into a per-instance namespace so
repeated collectives can never cross-match.
"""

from __future__ import annotations

from typing import Union

from .errors import BindingError
from .generators import AlgoSpec, Algorithm, generate
from .trace import (
    OP_NOP,
    CollKind,
    CollectiveTrace,
    CompAttrs,
    NodeKind,
    RecvAttrs,
    SendAttrs,
    TraceNode,
    WorkloadTrace,
    check_trace,
    coll_sequence,
    node_map,
)

TAG_STRIDE = 1 << 20

Binding = Union[CollectiveTrace, Algorithm, AlgoSpec]


def _resolve_binding(kind: CollKind, binding: Binding, num_ranks: int, size: int,
                     cache: dict) -> CollectiveTrace:
    if isinstance(binding, CollectiveTrace):
        claimed = binding.claimed_collective
        if claimed is None:
            raise BindingError(f"binding for {kind.value} does not claim a collective")
        if claimed.kind is not kind:
            raise BindingError(
                f"binding for {kind.value} claims {claimed.kind.value}")
        if binding.num_ranks != num_ranks:
            raise BindingError(
                f"binding for {kind.value} has {binding.num_ranks} ranks, "
                f"workload has {num_ranks}")
        if claimed.comm_size != size:
            raise BindingError(
                f"binding for {kind.value} is sized {claimed.comm_size}, "
                f"the collective node wants {size}")
        return binding
    if isinstance(binding, AlgoSpec):
        if binding.num_ranks != num_ranks:
            raise BindingError(
                f"binding spec for {kind.value} has {binding.num_ranks} ranks, "
                f"workload has {num_ranks}")
        algorithm = binding.algorithm
    else:
        algorithm = binding
    key = (algorithm, size)
    if key not in cache:
        trace = generate(AlgoSpec(algorithm, num_ranks, size))
        if trace.claimed_collective.kind is not kind:
            raise BindingError(
                f"algorithm {algorithm.value} implements "
                f"{trace.claimed_collective.kind.value}, not {kind.value}")
        cache[key] = trace
    return cache[key]


def expand(workload: WorkloadTrace, bindings: dict[CollKind, Binding]) -> CollectiveTrace:
    """Replace every COMM_COLL node with its bound algorithm subgraph and
    return the unified trace (claimed_collective is None).

    Raises BindingError for missing or mismatched bindings, OverflowError if
    a binding uses tags at or above the per-instance stride (2^20).
    """
    check_trace(workload)
    cache: dict = {}
    out_ranks: list[list[TraceNode]] = []
    for rank in range(workload.num_ranks):
        ordinal_of = {node.id: i for i, node in enumerate(coll_sequence(workload, rank))}
        nodes = node_map(workload, rank)
        order = sorted(nodes)

        # Pass 1: resolve bindings, reserve id blocks, locate roots/sinks.
        resolved: dict[int, tuple] = {}  # coll id -> (subnodes, id_base, roots, sinks)
        new_id: dict[int, int] = {}
        cursor = 0
        for nid in order:
            node = nodes[nid]
            if node.kind is not NodeKind.COMM_COLL:
                new_id[nid] = cursor
                cursor += 1
                continue
            binding = bindings.get(node.attrs.coll_kind)
            if binding is None:
                raise BindingError(f"no binding for {node.attrs.coll_kind.value}")
            sub = _resolve_binding(node.attrs.coll_kind, binding, workload.num_ranks,
                                   node.attrs.comm_size, cache)
            subnodes = sorted(sub.per_rank_nodes[rank], key=lambda n: n.id)
            if subnodes:
                depended = {d for n in subnodes for d in n.deps}
                roots = [n.id for n in subnodes if not n.deps]
                sinks = [n.id for n in subnodes if n.id not in depended]
            else:
                roots = sinks = []
            resolved[nid] = (subnodes, cursor, roots, sinks)
            cursor += max(len(subnodes), 1)

        def map_dep(dep: int) -> list[int]:
            if dep in resolved:
                subnodes, base, roots, sinks = resolved[dep]
                if not subnodes:
                    return [base]  # the anchor node
                sub_ids = {n.id: base + i for i, n in enumerate(subnodes)}
                return [sub_ids[s] for s in sinks]
            return [new_id[dep]]

        # Pass 2: emit.
        out: list[TraceNode] = []
        for nid in order:
            node = nodes[nid]
            if node.kind is not NodeKind.COMM_COLL:
                deps = sorted({d for dep in node.deps for d in map_dep(dep)})
                out.append(TraceNode(new_id[nid], node.name, node.kind, tuple(deps),
                                     node.attrs))
                continue
            ordinal = ordinal_of[nid]
            subnodes, base, roots, sinks = resolved[nid]
            entry_deps = sorted({d for dep in node.deps for d in map_dep(dep)})
            if not subnodes:
                # Degenerate splice: keep the graph connected with a free anchor.
                out.append(TraceNode(base, f"coll{ordinal}_anchor", NodeKind.COMP,
                                     tuple(entry_deps), CompAttrs(OP_NOP, 0)))
                continue
            sub_ids = {n.id: base + i for i, n in enumerate(subnodes)}
            root_set = set(roots)
            for sub in subnodes:
                deps = [sub_ids[d] for d in sub.deps]
                if sub.id in root_set:
                    deps.extend(entry_deps)
                attrs = sub.attrs
                if isinstance(attrs, SendAttrs):
                    if attrs.tag >= TAG_STRIDE:
                        raise OverflowError(
                            f"binding tag {attrs.tag} exceeds the per-instance "
                            f"namespace of {TAG_STRIDE}")
                    attrs = SendAttrs(attrs.dst_rank, attrs.comm_size,
                                      ordinal * TAG_STRIDE + attrs.tag, attrs.chunks)
                elif isinstance(attrs, RecvAttrs):
                    if attrs.tag >= TAG_STRIDE:
                        raise OverflowError(
                            f"binding tag {attrs.tag} exceeds the per-instance "
                            f"namespace of {TAG_STRIDE}")
                    attrs = RecvAttrs(attrs.src_rank, attrs.comm_size,
                                      ordinal * TAG_STRIDE + attrs.tag, attrs.chunks)
                out.append(TraceNode(sub_ids[sub.id], f"coll{ordinal}_{sub.name}",
                                     sub.kind, tuple(sorted(deps)), attrs))
        out_ranks.append(out)

    unified = CollectiveTrace(workload.num_ranks, None, out_ranks)
    check_trace(unified)
    return unified
