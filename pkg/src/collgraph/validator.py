"""Semantic checking of collective traces by symbolic chunk tracking.

Every chunk slot holds a set of (origin_rank, chunk_index) contributions.
A send snapshots the slots it reads; a matched recv either commits the
payload into its slots (plain copy) or leaves it staged for a consuming
REDUCE node, which unions it in. Reduction is a commutative-associative
set union, so the final state is schedule-independent for traces whose
dependencies correctly order writers before readers.

The chunk identities come from the optional "chunks" / "src_chunks" node
metadata. Traces without that metadata still get the executability
(deadlock) check; the semantic comparison is then reported as SKIPPED.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field

from .errors import CycleError, InvariantError, StuckError
from .trace import (
    OP_COPY,
    OP_REDUCE,
    CollKind,
    CollectiveTrace,
    NodeKind,
    check_trace,
    message_index,
    node_map,
)

PASS = "PASS"
FAIL = "FAIL"
SKIPPED = "SKIPPED"


@dataclass
class Verdict:
    status: str
    violations: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "verdict": self.status,
            "violations": self.violations,
            "stuck_nodes": [],
            "warnings": self.warnings,
        }


# ---------------------------------------------------------------------------
# Symbolic execution
# ---------------------------------------------------------------------------

class _Exec:
    """One symbolic run over all ranks to quiescence (eager sends)."""

    def __init__(self, trace: CollectiveTrace, track_state: bool, order: random.Random | None):
        self.trace = trace
        self.track = track_state
        self.order = order
        self.nodes = [node_map(trace, r) for r in range(trace.num_ranks)]
        sends, recvs = message_index(trace, require_complete=False)
        self.send_owner = {key: nid for key, (nid, _) in sends.items()}
        self.recv_owner = {key: nid for key, (nid, _) in recvs.items()}
        # chunk state per rank; staged payloads per (rank, recv_id)
        self.state: list[dict[int, frozenset]] = [dict() for _ in range(trace.num_ranks)]
        self.staged: dict[tuple[int, int], dict[int, frozenset]] = {}
        self.delivered: dict[tuple[int, int, int], list[frozenset]] = {}
        self.read_violations: list[dict] = []
        # chunks of each recv that a dependent REDUCE will union in (those
        # are left staged; everything else commits on recv completion)
        self.reduce_consumed: list[dict[int, set[int]]] = [
            {} for _ in range(trace.num_ranks)
        ]
        for rank in range(trace.num_ranks):
            for node in self.nodes[rank].values():
                if node.kind is not NodeKind.COMP or node.attrs.op != OP_REDUCE:
                    continue
                if node.attrs.chunks is None:
                    continue
                targets = set(node.attrs.chunks)
                for dep in node.deps:
                    dep_node = self.nodes[rank][dep]
                    if dep_node.kind is NodeKind.COMM_RECV and dep_node.attrs.chunks:
                        hit = targets & set(dep_node.attrs.chunks)
                        if hit:
                            self.reduce_consumed[rank].setdefault(dep, set()).update(hit)

    # -- state helpers ------------------------------------------------------

    def seed_initial_state(self, claimed, num_chunks: int) -> None:
        n = self.trace.num_ranks
        per_rank = num_chunks // n if num_chunks % n == 0 else None
        for rank in range(n):
            if claimed.kind in (CollKind.ALL_REDUCE, CollKind.REDUCE_SCATTER):
                owned = range(num_chunks)
            elif claimed.kind is CollKind.ALL_GATHER:
                # Indivisible chunk spaces are reported as a violation later;
                # leave the state unseeded so execution still terminates.
                owned = () if per_rank is None else \
                    range(rank * per_rank, (rank + 1) * per_rank)
            else:  # BROADCAST, root = rank 0
                owned = range(num_chunks) if rank == 0 else ()
            for j in owned:
                self.state[rank][j] = frozenset({(rank, j)})

    def _read(self, rank: int, chunk: int, node_id: int) -> frozenset:
        value = self.state[rank].get(chunk)
        if value is None:
            self.read_violations.append(
                {"rank": rank, "node": node_id, "chunk": chunk,
                 "error": "read of unwritten chunk"})
            return frozenset()
        return value

    # -- node effects -------------------------------------------------------

    def _run_send(self, rank: int, node) -> None:
        key = (rank, node.attrs.dst_rank, node.attrs.tag)
        if self.track and node.attrs.chunks is not None:
            payload = [self._read(rank, c, node.id) for c in node.attrs.chunks]
        else:
            payload = []
        self.delivered[key] = payload

    def _run_recv(self, rank: int, node) -> None:
        key = (node.attrs.src_rank, rank, node.attrs.tag)
        payload = self.delivered[key]
        if not self.track or node.attrs.chunks is None:
            return
        if len(payload) != len(node.attrs.chunks):
            raise InvariantError(
                f"send/recv chunk metadata disagree for tag {node.attrs.tag} "
                f"from {node.attrs.src_rank}", rank, node.id)
        consumed = self.reduce_consumed[rank].get(node.id, set())
        stage: dict[int, frozenset] = {}
        for chunk, value in zip(node.attrs.chunks, payload):
            if chunk in consumed:
                stage[chunk] = value
            else:
                self.state[rank][chunk] = value
        if stage:
            self.staged[(rank, node.id)] = stage

    def _run_comp(self, rank: int, node) -> None:
        if not self.track or node.attrs.chunks is None:
            return
        a = node.attrs
        if a.op == OP_REDUCE:
            for i, chunk in enumerate(a.chunks):
                acc = self.state[rank].get(chunk, frozenset())
                for dep in node.deps:
                    staged = self.staged.get((rank, dep))
                    if staged and chunk in staged:
                        acc |= staged[chunk]
                if a.src_chunks is not None:
                    acc |= self._read(rank, a.src_chunks[i], node.id)
                self.state[rank][chunk] = acc
        elif a.op == OP_COPY:
            if a.src_chunks is not None:
                values = [self._read(rank, c, node.id) for c in a.src_chunks]
                for chunk, value in zip(a.chunks, values):
                    self.state[rank][chunk] = value
        # NOP and opaque ops leave chunk state untouched

    # -- scheduling ---------------------------------------------------------

    def run(self) -> None:
        """Execute to quiescence; StuckError if any node can never run."""
        pending = [
            {nid: len(node.deps) for nid, node in rank_nodes.items()}
            for rank_nodes in self.nodes
        ]
        dependents = [
            {nid: [] for nid in rank_nodes} for rank_nodes in self.nodes
        ]
        for rank, rank_nodes in enumerate(self.nodes):
            for node in rank_nodes.values():
                for dep in node.deps:
                    dependents[rank][dep].append(node.id)
        ready: list[tuple[int, int]] = []
        parked: set[tuple[int, int]] = set()  # dep-ready recvs missing their message
        executed = 0
        total = sum(len(r) for r in self.nodes)

        def on_dep_ready(rank: int, nid: int) -> None:
            node = self.nodes[rank][nid]
            if node.kind is NodeKind.COMM_RECV:
                key = (node.attrs.src_rank, rank, node.attrs.tag)
                if key not in self.delivered:
                    parked.add((rank, nid))
                    return
            heapq.heappush(ready, (rank, nid))

        for rank, counts in enumerate(pending):
            for nid, count in counts.items():
                if count == 0:
                    on_dep_ready(rank, nid)

        while ready:
            if self.order is None:
                rank, nid = heapq.heappop(ready)
            else:
                idx = self.order.randrange(len(ready))
                ready[idx], ready[-1] = ready[-1], ready[idx]
                rank, nid = ready.pop()
                heapq.heapify(ready)
            node = self.nodes[rank][nid]
            if node.kind is NodeKind.COMM_SEND:
                self._run_send(rank, node)
                key = (rank, node.attrs.dst_rank, node.attrs.tag)
                peer = self.recv_owner.get(key)
                if peer is not None and (key[1], peer) in parked:
                    parked.discard((key[1], peer))
                    heapq.heappush(ready, (key[1], peer))
            elif node.kind is NodeKind.COMM_RECV:
                self._run_recv(rank, node)
            else:
                self._run_comp(rank, node)
            executed += 1
            for succ in dependents[rank][nid]:
                pending[rank][succ] -= 1
                if pending[rank][succ] == 0:
                    on_dep_ready(rank, succ)

        if executed < total:
            frontier = sorted(parked)
            raise StuckError(
                f"execution stuck with {total - executed} node(s) unrun", frontier)


def _rendezvous_reachable(trace: CollectiveTrace) -> bool:
    """Fixpoint reachability where a send additionally waits for the
    matching recv to be posted (its deps done). True if everything runs."""
    sends, recvs = message_index(trace, require_complete=False)
    recv_owner = {key: nid for key, (nid, _) in recvs.items()}
    done: list[set[int]] = [set() for _ in range(trace.num_ranks)]
    nodes = [node_map(trace, r) for r in range(trace.num_ranks)]
    total = sum(len(r) for r in nodes)
    progress = True
    while progress:
        progress = False
        for rank, rank_nodes in enumerate(nodes):
            for nid, node in rank_nodes.items():
                if nid in done[rank] or not all(d in done[rank] for d in node.deps):
                    continue
                if node.kind is NodeKind.COMM_SEND:
                    key = (rank, node.attrs.dst_rank, node.attrs.tag)
                    peer = recv_owner.get(key)
                    if peer is None:
                        continue
                    peer_node = nodes[key[1]][peer]
                    if not all(d in done[key[1]] for d in peer_node.deps):
                        continue
                elif node.kind is NodeKind.COMM_RECV:
                    key = (node.attrs.src_rank, rank, node.attrs.tag)
                    send_nid = sends.get(key, (None, None))[0]
                    if send_nid is None or send_nid not in done[key[0]]:
                        continue
                done[rank].add(nid)
                progress = True
    return sum(len(d) for d in done) == total


# ---------------------------------------------------------------------------
# check_semantics
# ---------------------------------------------------------------------------

def _metadata_complete(trace: CollectiveTrace) -> bool:
    for nodes in trace.per_rank_nodes:
        for node in nodes:
            if node.kind in (NodeKind.COMM_SEND, NodeKind.COMM_RECV):
                if node.attrs.chunks is None:
                    return False
    return True


def _infer_num_chunks(trace: CollectiveTrace) -> int:
    top = -1
    for nodes in trace.per_rank_nodes:
        for node in nodes:
            for chunks in (getattr(node.attrs, "chunks", None),
                           getattr(node.attrs, "src_chunks", None)):
                if chunks:
                    top = max(top, max(chunks))
    return top + 1 if top >= 0 else max(trace.num_ranks, 1)


def _expected_slots(claimed, num_ranks: int, num_chunks: int):
    """Yield (rank, chunk, expected frozenset) for every constrained slot."""
    kind = claimed.kind
    if kind in (CollKind.ALL_GATHER, CollKind.REDUCE_SCATTER) and num_chunks % num_ranks:
        return None
    per_rank = num_chunks // num_ranks if num_ranks and num_chunks % num_ranks == 0 else 0

    def full(j):
        return frozenset((r, j) for r in range(num_ranks))

    slots = []
    for rank in range(num_ranks):
        if kind is CollKind.ALL_REDUCE:
            slots += [(rank, j, full(j)) for j in range(num_chunks)]
        elif kind is CollKind.ALL_GATHER:
            slots += [(rank, j, frozenset({(j // per_rank, j)})) for j in range(num_chunks)]
        elif kind is CollKind.REDUCE_SCATTER:
            slots += [(rank, j, full(j))
                      for j in range(rank * per_rank, (rank + 1) * per_rank)]
        else:  # BROADCAST from rank 0
            slots += [(rank, j, frozenset({(0, j)})) for j in range(num_chunks)]
    return slots


def check_semantics(trace: CollectiveTrace, *, order_seed: int | None = None) -> Verdict:
    """Symbolically execute `trace` and compare the final chunk state with
    what its claimed collective requires.

    `order_seed` randomizes the execution order of independent nodes; any
    seed must produce the same verdict (schedule independence).

    Raises StuckError when execution cannot reach quiescence (deadlock or
    missing messages). Returns SKIPPED when the trace carries no claimed
    collective or no chunk metadata; matching/deadlock checks still ran.
    """
    check_trace(trace, matching=False)
    order = None if order_seed is None else random.Random(order_seed)
    track = trace.claimed_collective is not None and _metadata_complete(trace)
    ex = _Exec(trace, track, order)
    warnings: list[str] = []
    if track:
        num_chunks = _infer_num_chunks(trace)
        ex.seed_initial_state(trace.claimed_collective, num_chunks)
    ex.run()
    if not _rendezvous_reachable(trace):
        warnings.append("trace deadlocks under rendezvous send semantics")
    if not track:
        return Verdict(SKIPPED, warnings=warnings)

    violations = list(ex.read_violations)
    expected = _expected_slots(trace.claimed_collective, trace.num_ranks, num_chunks)
    if expected is None:
        violations.append({
            "rank": None, "chunk": None,
            "error": f"chunk space of {num_chunks} not divisible by "
                     f"{trace.num_ranks} ranks"})
    else:
        for rank, chunk, want in expected:
            got = ex.state[rank].get(chunk)
            if got != want:
                violations.append({
                    "rank": rank, "chunk": chunk,
                    "expected": sorted(want),
                    "actual": sorted(got) if got is not None else None})
    if violations:
        return Verdict(FAIL, violations=violations, warnings=warnings)
    return Verdict(PASS, warnings=warnings)


# ---------------------------------------------------------------------------
# Canonical-form isomorphism
# ---------------------------------------------------------------------------

_KIND_ORDER = {NodeKind.COMM_SEND: 0, NodeKind.COMM_RECV: 1, NodeKind.COMP: 2}


def _tag_ordinals(trace: CollectiveTrace) -> dict[tuple[int, int], dict[int, int]]:
    """Per directed (src, dst) pair: tag value -> rank of that tag.

    Raw tag values are producer-specific; only their relative order within
    a direction is structurally meaningful.
    """
    tags: dict[tuple[int, int], set[int]] = {}
    for rank, nodes in enumerate(trace.per_rank_nodes):
        for node in nodes:
            if node.kind is NodeKind.COMM_SEND:
                tags.setdefault((rank, node.attrs.dst_rank), set()).add(node.attrs.tag)
            elif node.kind is NodeKind.COMM_RECV:
                tags.setdefault((node.attrs.src_rank, rank), set()).add(node.attrs.tag)
    return {
        pair: {tag: i for i, tag in enumerate(sorted(values))}
        for pair, values in tags.items()
    }


def canonical_form(trace: CollectiveTrace):
    """Relabel each rank's nodes by dependency order with a structural
    tie-break, erasing ids, names, raw tag values and chunk metadata."""
    ordinals = _tag_ordinals(trace)
    form = []
    for rank in range(trace.num_ranks):
        nodes = node_map(trace, rank)
        dependents: dict[int, list[int]] = {nid: [] for nid in nodes}
        pending = {nid: len(node.deps) for nid, node in nodes.items()}
        for node in nodes.values():
            for dep in node.deps:
                dependents[dep].append(node.id)
        label: dict[int, int] = {}

        def key_of(node):
            a = node.attrs
            if node.kind is NodeKind.COMM_SEND:
                peer, size, tag_ord, op = a.dst_rank, a.comm_size, \
                    ordinals[(rank, a.dst_rank)][a.tag], ""
            elif node.kind is NodeKind.COMM_RECV:
                peer, size, tag_ord, op = a.src_rank, a.comm_size, \
                    ordinals[(a.src_rank, rank)][a.tag], ""
            else:
                peer, size, tag_ord, op = -1, a.comp_size, -1, a.op
            deps = tuple(sorted(label[d] for d in node.deps))
            return (_KIND_ORDER[node.kind], peer, size, tag_ord, op, deps)

        heap = []
        for nid, count in pending.items():
            if count == 0:
                heapq.heappush(heap, (key_of(nodes[nid]), nid))
        records = []
        while heap:
            key, nid = heapq.heappop(heap)
            label[nid] = len(records)
            records.append(key)
            for succ in dependents[nid]:
                pending[succ] -= 1
                if pending[succ] == 0:
                    heapq.heappush(heap, (key_of(nodes[succ]), succ))
        if len(records) < len(nodes):
            from .trace import _find_cycle
            raise CycleError(f"dependency cycle on rank {rank}",
                             _find_cycle(nodes, set(label)))
        form.append(tuple(records))
    return tuple(form)


def isomorphic(a: CollectiveTrace, b: CollectiveTrace) -> bool:
    """True iff the traces are structurally identical up to node ids, names,
    raw tag values and auxiliary chunk metadata."""
    if a.num_ranks != b.num_ranks:
        return False
    return canonical_form(a) == canonical_form(b)
