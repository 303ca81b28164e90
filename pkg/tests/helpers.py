"""Shared test utilities: an independent concrete executor used as the
oracle for the symbolic validator, and structural mutation helpers."""

from __future__ import annotations

from collgraph.trace import (
    OP_COPY,
    OP_NOP,
    OP_REDUCE,
    CollectiveTrace,
    NodeKind,
    RecvAttrs,
    SendAttrs,
    TraceNode,
)


def concrete_execute(trace: CollectiveTrace, num_chunks: int) -> list[dict[int, int]]:
    """Run the trace with integer bitmask payloads and return the final
    per-rank chunk states.

    Bit (rank * num_chunks + chunk) stands for that rank's original value of
    that chunk; OR-ing bitmasks models reduction exactly (set union is
    bitwise or). Deliberately written as a dumb rescanning fixpoint loop so
    it shares no machinery with the validator.
    """
    n = trace.num_ranks
    state: list[dict[int, int]] = [
        {j: 1 << (r * num_chunks + j) for j in range(num_chunks)} for r in range(n)
    ]
    done: list[set[int]] = [set() for _ in range(n)]
    mailbox: dict[tuple[int, int, int], list[int]] = {}
    nodes = [sorted(rank_nodes, key=lambda nd: nd.id) for rank_nodes in trace.per_rank_nodes]
    by_id = [{nd.id: nd for nd in rank_nodes} for rank_nodes in nodes]

    def reduce_consumers(rank: int, recv: TraceNode) -> set[int]:
        eaten: set[int] = set()
        for nd in nodes[rank]:
            if nd.kind is NodeKind.COMP and nd.attrs.op == OP_REDUCE \
                    and recv.id in nd.deps and nd.attrs.chunks:
                eaten |= set(nd.attrs.chunks) & set(recv.attrs.chunks or ())
        return eaten

    progress = True
    while progress:
        progress = False
        for rank in range(n):
            for node in nodes[rank]:
                if node.id in done[rank]:
                    continue
                if any(d not in done[rank] for d in node.deps):
                    continue
                if node.kind is NodeKind.COMM_SEND:
                    key = (rank, node.attrs.dst_rank, node.attrs.tag)
                    mailbox[key] = [state[rank][c] for c in node.attrs.chunks]
                elif node.kind is NodeKind.COMM_RECV:
                    key = (node.attrs.src_rank, rank, node.attrs.tag)
                    if key not in mailbox:
                        continue
                    payload = mailbox[key]
                    eaten = reduce_consumers(rank, node)
                    for chunk, value in zip(node.attrs.chunks, payload):
                        if chunk in eaten:
                            state[rank][(node.id, chunk)] = value  # park for the reduce
                        else:
                            state[rank][chunk] = value
                elif node.attrs.op == OP_REDUCE and node.attrs.chunks:
                    for i, chunk in enumerate(node.attrs.chunks):
                        acc = state[rank].get(chunk, 0)
                        for dep in node.deps:
                            acc |= state[rank].get((dep, chunk), 0)
                        if node.attrs.src_chunks:
                            acc |= state[rank][node.attrs.src_chunks[i]]
                        state[rank][chunk] = acc
                elif node.attrs.op == OP_COPY and node.attrs.chunks and node.attrs.src_chunks:
                    for chunk, src in zip(node.attrs.chunks, node.attrs.src_chunks):
                        state[rank][chunk] = state[rank][src]
                done[rank].add(node.id)
                progress = True
    assert all(len(done[r]) == len(nodes[r]) for r in range(n)), "oracle run stuck"
    return [{j: s[j] for j in range(num_chunks) if j in s} for s in state]


def full_mask(n: int, num_chunks: int, chunk: int) -> int:
    """Bitmask of every rank's contribution to one chunk (all-reduced)."""
    mask = 0
    for r in range(n):
        mask |= 1 << (r * num_chunks + chunk)
    return mask


def delete_node(trace: CollectiveTrace, rank: int, node_id: int) -> CollectiveTrace:
    """Remove one node and scrub it from other deps (ids keep their values)."""
    ranks = []
    for r, rank_nodes in enumerate(trace.per_rank_nodes):
        if r != rank:
            ranks.append(rank_nodes)
            continue
        kept = []
        for node in rank_nodes:
            if node.id == node_id:
                continue
            deps = tuple(d for d in node.deps if d != node_id)
            kept.append(TraceNode(node.id, node.name, node.kind, deps, node.attrs))
        ranks.append(tuple(kept))
    return CollectiveTrace(trace.num_ranks, trace.claimed_collective, ranks)


def rewrite_peer(trace: CollectiveTrace, rank: int, node_id: int,
                 new_peer: int) -> CollectiveTrace:
    """Point one send/recv at a different peer, keeping everything else."""
    ranks = []
    for r, rank_nodes in enumerate(trace.per_rank_nodes):
        if r != rank:
            ranks.append(rank_nodes)
            continue
        rebuilt = []
        for node in rank_nodes:
            if node.id == node_id:
                a = node.attrs
                if node.kind is NodeKind.COMM_SEND:
                    a = SendAttrs(new_peer, a.comm_size, a.tag, a.chunks)
                elif node.kind is NodeKind.COMM_RECV:
                    a = RecvAttrs(new_peer, a.comm_size, a.tag, a.chunks)
                node = TraceNode(node.id, node.name, node.kind, node.deps, a)
            rebuilt.append(node)
        ranks.append(tuple(rebuilt))
    return CollectiveTrace(trace.num_ranks, trace.claimed_collective, ranks)
