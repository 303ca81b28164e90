"""Exception hierarchy shared by every collgraph module."""

from __future__ import annotations


class CollGraphError(Exception):
    """Base class for all collgraph errors."""


class ParseError(CollGraphError):
    """Malformed trace file (syntax level, with line/column info)."""


class SchemaError(CollGraphError):
    """Structurally valid file with unknown or missing fields."""


class InvariantError(CollGraphError):
    """A trace violates a structural invariant (cycle, unmatched message,
    duplicate tag, bad rank reference)."""

    def __init__(self, message: str, rank: int | None = None, node_id: int | None = None):
        if rank is not None:
            message = f"{message} (rank {rank}" + (
                f", node {node_id})" if node_id is not None else ")"
            )
        super().__init__(message)
        self.rank = rank
        self.node_id = node_id


class CycleError(CollGraphError):
    """Dependency cycle; carries the ids of one cycle."""

    def __init__(self, message: str, cycle: list[int]):
        super().__init__(f"{message}: {cycle}")
        self.cycle = cycle


class SpecError(CollGraphError):
    """Invalid algorithm specification (bad rank count, indivisible size)."""


class XmlError(CollGraphError):
    """Malformed XML input."""


class RefError(CollGraphError):
    """Dangling reference inside an otherwise well-formed program."""


class MatchError(CollGraphError):
    """Sends and receives cannot be paired one-to-one."""


class SizeError(CollGraphError):
    """Byte size incompatible with the requested chunking."""


class BindingError(CollGraphError):
    """Missing or mismatched collective binding during expansion."""


class StuckError(CollGraphError):
    """Symbolic execution cannot reach quiescence; carries the blocked
    frontier as (rank, node_id) pairs."""

    def __init__(self, message: str, frontier: list[tuple[int, int]]):
        super().__init__(f"{message}; frontier: {frontier}")
        self.frontier = frontier


class DeadlockError(CollGraphError):
    """Simulation ran out of events with nodes still pending; carries the
    pending frontier as (rank, node_id) pairs."""

    def __init__(self, message: str, frontier: list[tuple[int, int]]):
        super().__init__(f"{message}; pending: {frontier}")
        self.frontier = frontier


class UnexpandedCollectiveError(CollGraphError):
    """A COMM_COLL placeholder reached a consumer that needs it expanded."""


class UnreachableError(CollGraphError):
    """No route between two topology nodes."""
