"""Events, data batches and streams.

Everything here is an immutable value object. An event carries every
parameter its operation needs, so any AC can execute it from the payload
alone; state travels separately as :class:`DataBatch` items on a stream.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, NamedTuple, Optional, Sequence

from .errors import EmptyProgram, MalformedProgram

DEFAULT_BATCH_CAPACITY = 1024


class StreamId(NamedTuple):
    origin_ac: int
    query_or_txn_id: int
    tag: int


@dataclass(frozen=True)
class DataBatch:
    stream_id: StreamId
    batch_seq: int
    rows: tuple
    last: bool


# --- predicates -------------------------------------------------------------
# Predicates are plain data so that events stay self-contained.


@dataclass(frozen=True)
class Always:
    value: bool = True

    def __call__(self, row) -> bool:
        return self.value


@dataclass(frozen=True)
class Eq:
    column: str
    value: Any

    def __call__(self, row) -> bool:
        return row[self.column] == self.value


@dataclass(frozen=True)
class Ge:
    column: str
    value: Any

    def __call__(self, row) -> bool:
        return row[self.column] >= self.value


@dataclass(frozen=True)
class StartsWith:
    column: str
    prefix: str

    def __call__(self, row) -> bool:
        return row[self.column].startswith(self.prefix)


@dataclass(frozen=True)
class And:
    parts: tuple

    def __call__(self, row) -> bool:
        return all(p(row) for p in self.parts)


def equality_bindings(predicate) -> dict:
    """Columns pinned to a constant by a conjunction of ``Eq`` terms."""
    if isinstance(predicate, Eq):
        return {predicate.column: predicate.value}
    if isinstance(predicate, And):
        out = {}
        for p in predicate.parts:
            out.update(equality_bindings(p))
        return out
    return {}


def project(row: dict, projection) -> dict:
    if projection is None:
        return row
    return {c: row[c] for c in projection}


# --- operation descriptors ---------------------------------------------------


@dataclass(frozen=True)
class Ref:
    """Placeholder resolved at execution time from the output of op ``op_index``.

    ``pick`` selects the row of the producing stream ("first" or "median",
    the latter being the TPC-C by-last-name convention); the resolved value
    is ``row[column] * scale``.
    """

    op_index: int
    column: str
    scale: int = 1
    pick: str = "first"


@dataclass(frozen=True)
class ReadRecord:
    table: str
    key: tuple


@dataclass(frozen=True)
class UpdateRecord:
    table: str
    key: tuple
    delta: tuple  # ((column, amount), ...), applied additively
    # (threshold, refill): after the delta, add refill to the first delta
    # column if it fell below threshold (TPC-C stock replenishment).
    restock: Optional[tuple] = None


@dataclass(frozen=True)
class InsertRecord:
    table: str
    record: tuple  # ((column, value), ...)


@dataclass(frozen=True)
class SelectCustomerByLastName:
    w_id: int
    d_id: int
    last_name: str


@dataclass(frozen=True)
class ScanFilter:
    table: str
    predicate: Any
    projection: Optional[tuple]


@dataclass(frozen=True)
class JoinBuild:
    join_id: int
    key_column: tuple


@dataclass(frozen=True)
class JoinProbe:
    join_id: int
    key_column: tuple
    projection: Optional[tuple] = None


@dataclass(frozen=True)
class Aggregate:
    group_cols: tuple
    agg_spec: tuple  # ((output name, "sum", column), ...)
    final: bool = True
    order_by: tuple = ()  # ((column, descending), ...)


@dataclass(frozen=True)
class CompileQuery:
    query_descriptor: Any


@dataclass(frozen=True)
class Commit:
    expected_ack_count: int
    write_ops: tuple = ()


@dataclass(frozen=True)
class Ack:
    target_op_index: int
    status: str = "ok"
    # further writes acknowledged by the same message (aggregated execution)
    covers: tuple = ()

    @property
    def ops(self) -> tuple:
        return (self.target_op_index,) + self.covers


@dataclass(frozen=True)
class BeamInit:
    table: str
    predicate: Any
    projection: Optional[tuple]
    target_ac: int
    stream_id: StreamId


WRITE_KINDS = (UpdateRecord, InsertRecord)
RECORD_KINDS = (ReadRecord, UpdateRecord, InsertRecord)


def is_write(kind) -> bool:
    return isinstance(kind, WRITE_KINDS)


@dataclass(frozen=True)
class Event:
    event_id: int
    txn_or_query_id: int
    op_index: int
    kind: Any
    conflict_class: Optional[int] = None
    global_seq: Optional[int] = None
    # Position of this event in its (storage AC, conflict class) lane; the
    # lane's reorder buffer releases events strictly by this counter.
    lane_seq: Optional[int] = None
    required_streams: tuple = ()
    # Streams consumed incrementally after the event has started.
    input_streams: tuple = ()
    output_stream: Optional[StreamId] = None
    output_targets: tuple = ()
    commit_ac: Optional[int] = None
    # storage AC that executes a record op; other ACs forward it there
    storage_ac: Optional[int] = None

    @property
    def txn_id(self) -> int:
        return self.txn_or_query_id


def event_id_for(txn_id: int, op_index: int) -> int:
    return ((txn_id & 0xFFFFFFFFFFFF) << 16) | (op_index & 0xFFFF)


def make_txn_events(program, txn_id: int) -> list:
    """Disaggregate a program into one event per logical operation."""
    ops = list(program.ops)
    if not ops:
        raise EmptyProgram("program has no operations")
    for i, op in enumerate(ops):
        if isinstance(op, Commit) and i != len(ops) - 1:
            raise MalformedProgram(f"Commit at position {i} is not the last op")
    if not isinstance(ops[-1], Commit):
        raise MalformedProgram("last operation must be Commit")
    return [
        Event(event_id=event_id_for(txn_id, i), txn_or_query_id=txn_id, op_index=i, kind=op)
        for i, op in enumerate(ops)
    ]


def batch_split(rows: Sequence, batch_capacity: int, stream_id: StreamId) -> list:
    if batch_capacity < 1:
        raise ValueError("batch_capacity must be >= 1")
    n = len(rows)
    if n == 0:
        return [DataBatch(stream_id, 0, (), True)]
    nb = -(-n // batch_capacity)
    return [
        DataBatch(
            stream_id,
            i,
            tuple(rows[i * batch_capacity:(i + 1) * batch_capacity]),
            i == nb - 1,
        )
        for i in range(nb)
    ]


def validate_event(e: Event, streaming_cc: bool = False, program=None) -> Optional[str]:
    """Return a description of the first violated invariant, or None."""
    if e.op_index < 0:
        return "negative op_index"
    if streaming_cc and e.conflict_class is not None and e.global_seq is None:
        return "missing global_seq"
    kind = e.kind
    if isinstance(kind, (UpdateRecord, InsertRecord)) and e.required_streams and \
            not any(isinstance(v, Ref) for v in _params(kind)):
        return "pure storage event must not require streams"
    if isinstance(kind, Commit) and program is not None:
        writes = sum(1 for op in program.ops if is_write(op))
        if kind.expected_ack_count != writes:
            return f"Commit expects {kind.expected_ack_count} acks but program has {writes} writes"
    return None


def _params(kind):
    if isinstance(kind, UpdateRecord):
        return tuple(kind.key) + tuple(v for _, v in kind.delta)
    if isinstance(kind, InsertRecord):
        return tuple(v for _, v in kind.record)
    if isinstance(kind, ReadRecord):
        return tuple(kind.key)
    return ()


def has_refs(kind) -> bool:
    return any(isinstance(v, Ref) for v in _params(kind))


def ref_ops(kind) -> set:
    return {v.op_index for v in _params(kind) if isinstance(v, Ref)}


def resolve(kind, lookup):
    """Replace every :class:`Ref` in ``kind`` by ``lookup(ref)``."""
    def sub(v):
        return lookup(v) if isinstance(v, Ref) else v

    if isinstance(kind, UpdateRecord):
        return replace(kind, key=tuple(sub(v) for v in kind.key),
                       delta=tuple((c, sub(v)) for c, v in kind.delta))
    if isinstance(kind, InsertRecord):
        return replace(kind, record=tuple((c, sub(v)) for c, v in kind.record))
    if isinstance(kind, ReadRecord):
        return replace(kind, key=tuple(sub(v) for v in kind.key))
    return kind


def pick_row(rows: Sequence, pick: str):
    if not rows:
        raise LookupError("empty stream")
    if pick == "median":
        # TPC-C: position ceil(n/2) in 1-based terms
        return rows[(len(rows) + 1) // 2 - 1]
    return rows[0]
