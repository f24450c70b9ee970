"""Partitioned record store owned by storage ACs.

Rows are dicts that are never mutated once stored; an update installs a
fresh dict. Batches can therefore hand out row references without copying
and a reader never observes a half-applied write.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

from .errors import DuplicateKey, KeyNotFound, OrderViolation, UnknownTable, WrongPartition
from .events import (
    DEFAULT_BATCH_CAPACITY,
    Ack,
    Always,
    And,
    Eq,
    Event,
    InsertRecord,
    ReadRecord,
    UpdateRecord,
    batch_split,
    equality_bindings,
    event_id_for,
    project,
)


@dataclass(frozen=True)
class TableSchema:
    name: str
    columns: tuple
    key: tuple
    # None means the table is replicated to every partition
    partition_column: str | None
    # (warehouse column, district column) for district-clustered tables
    cluster: tuple | None = None


SCHEMA = {
    s.name: s
    for s in (
        TableSchema("WAREHOUSE", ("w_id", "w_ytd"), ("w_id",), "w_id"),
        TableSchema("DISTRICT", ("d_id", "d_w_id", "d_ytd"), ("d_w_id", "d_id"), "d_w_id"),
        TableSchema(
            "CUSTOMER",
            ("c_id", "c_d_id", "c_w_id", "c_last", "c_state", "c_balance", "c_ytd_payment",
             "c_payment_cnt"),
            ("c_w_id", "c_d_id", "c_id"),
            "c_w_id",
            ("c_w_id", "c_d_id"),
        ),
        TableSchema(
            "HISTORY",
            ("h_id", "h_w_id", "h_d_id", "h_c_id", "h_amount", "h_date"),
            ("h_w_id", "h_id"),
            "h_w_id",
        ),
        TableSchema(
            "ORDERS",
            ("o_id", "o_w_id", "o_d_id", "o_c_id", "o_entry_d"),
            ("o_w_id", "o_d_id", "o_id"),
            "o_w_id",
            ("o_w_id", "o_d_id"),
        ),
        TableSchema(
            "NEW_ORDER",
            ("no_o_id", "no_w_id", "no_d_id"),
            ("no_w_id", "no_d_id", "no_o_id"),
            "no_w_id",
            ("no_w_id", "no_d_id"),
        ),
        TableSchema(
            "ORDER_LINE",
            ("ol_o_id", "ol_w_id", "ol_d_id", "ol_number", "ol_i_id", "ol_amount", "ol_quantity"),
            ("ol_w_id", "ol_d_id", "ol_o_id", "ol_number"),
            "ol_w_id",
            ("ol_w_id", "ol_d_id"),
        ),
        TableSchema("ITEM", ("i_id", "i_price"), ("i_id",), None),
        TableSchema("STOCK", ("s_i_id", "s_w_id", "s_quantity"), ("s_w_id", "s_i_id"), "s_w_id"),
    )
}

TABLE_PARTITION_KEY_POS = {
    name: (s.key.index(s.partition_column) if s.partition_column else None)
    for name, s in SCHEMA.items()
}


def schema(table: str) -> TableSchema:
    try:
        return SCHEMA[table]
    except KeyError:
        raise UnknownTable(table) from None


def key_of(table: str, row: dict) -> tuple:
    return tuple(row[c] for c in schema(table).key)


def key_partition(table: str, key: tuple):
    """Partition owning ``key``; None for replicated tables."""
    pos = TABLE_PARTITION_KEY_POS.get(table, -1)
    if pos == -1:
        raise UnknownTable(table)
    return None if pos is None else key[pos]


def record_partition(kind):
    if isinstance(kind, (ReadRecord, UpdateRecord)):
        return key_partition(kind.table, kind.key)
    if isinstance(kind, InsertRecord):
        col = schema(kind.table).partition_column
        if col is None:
            return None
        return dict(kind.record)[col]
    return None


@dataclass
class Partition:
    partition_id: int
    tables: dict = field(default_factory=dict)
    applied_seq: dict = field(default_factory=dict)
    # district-clustered key lists: table -> (w, d) -> [key, ...] in load order
    clusters: dict = field(default_factory=dict)
    # (w, d) -> tuple of {"c_id", "c_last"} rows ordered by c_id; both
    # columns are immutable so the tuple can be shipped as-is.
    customer_names: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, s in SCHEMA.items():
            self.tables.setdefault(name, {})
            if s.cluster:
                self.clusters.setdefault(name, defaultdict(list))

    def load(self, table: str, rows) -> None:
        s = schema(table)
        store = self.tables[table]
        for row in rows:
            k = tuple(row[c] for c in s.key)
            if s.partition_column and row[s.partition_column] != self.partition_id:
                raise WrongPartition(f"{table}{k} loaded into partition {self.partition_id}")
            if k in store:
                raise DuplicateKey(f"{table}{k}")
            store[k] = row
            if s.cluster:
                self.clusters[table][(row[s.cluster[0]], row[s.cluster[1]])].append(k)
        if table == "CUSTOMER":
            self._rebuild_name_index()

    def _rebuild_name_index(self):
        idx = defaultdict(list)
        for k, row in self.tables["CUSTOMER"].items():
            idx[(row["c_w_id"], row["c_d_id"])].append({"c_id": row["c_id"], "c_last": row["c_last"]})
        self.customer_names = {wd: tuple(sorted(v, key=lambda r: r["c_id"])) for wd, v in idx.items()}

    def get(self, table: str, key: tuple) -> dict:
        try:
            return self.tables[table][key]
        except KeyError:
            if table not in SCHEMA:
                raise UnknownTable(table) from None
            raise KeyNotFound(f"{table}{key}") from None

    def snapshot(self) -> dict:
        return {t: dict(rows) for t, rows in self.tables.items()}


def _check_partition(p: Partition, table: str, part) -> None:
    if part is not None and part != p.partition_id:
        raise WrongPartition(f"{table} record of partition {part} arrived at partition {p.partition_id}")


def _check_order(p: Partition, e: Event) -> None:
    if e.conflict_class is None or e.global_seq is None:
        return
    prev = p.applied_seq.get(e.conflict_class, -1)
    if e.global_seq < prev:
        raise OrderViolation(
            f"seq {e.global_seq} applied after {prev} in class {e.conflict_class}")
    p.applied_seq[e.conflict_class] = e.global_seq


def make_ack(e: Event, status: str = "ok") -> Event:
    return Event(
        event_id=event_id_for(e.txn_id, e.op_index) | (1 << 15),
        txn_or_query_id=e.txn_id,
        op_index=e.op_index,
        kind=Ack(e.op_index, status),
        commit_ac=e.commit_ac,
    )


def apply_update(p: Partition, e: Event) -> Event:
    """Apply an UpdateRecord/InsertRecord event and return its Ack."""
    apply_write(p, e.kind, e)
    return make_ack(e)


def apply_write(p: Partition, kind, e: Event | None = None) -> tuple:
    """Install one write; ``e`` (if given) supplies the ordering stamp. Returns the key."""
    if isinstance(kind, UpdateRecord):
        _check_partition(p, kind.table, key_partition(kind.table, kind.key))
        store = p.tables[kind.table]
        try:
            row = store[kind.key]
        except KeyError:
            raise KeyNotFound(f"{kind.table}{kind.key}") from None
        new = dict(row)
        for col, amount in kind.delta:
            new[col] += amount
        if kind.restock is not None:
            col = kind.delta[0][0]
            threshold, refill = kind.restock
            if new[col] < threshold:
                new[col] += refill
        if e is not None:
            _check_order(p, e)
        store[kind.key] = new
        return kind.key
    elif isinstance(kind, InsertRecord):
        s = schema(kind.table)
        row = dict(kind.record)
        if s.partition_column:
            _check_partition(p, kind.table, row[s.partition_column])
        k = tuple(row[c] for c in s.key)
        store = p.tables[kind.table]
        if k in store:
            raise DuplicateKey(f"{kind.table}{k}")
        if e is not None:
            _check_order(p, e)
        store[k] = row
        if s.cluster:
            p.clusters[kind.table][(row[s.cluster[0]], row[s.cluster[1]])].append(k)
        return k
    raise TypeError(f"not a write event: {kind!r}")


def read_record(p: Partition, e: Event):
    kind = e.kind
    _check_partition(p, kind.table, key_partition(kind.table, kind.key))
    row = p.get(kind.table, kind.key)
    _check_order(p, e)
    return batch_split([row], 1, e.output_stream)[0]


def customers_by_last_name(names, last_name: str) -> list:
    """The payment scan leg: filter a district's (c_id, c_last) list."""
    return [r for r in names if r["c_last"] == last_name]


def select_customer_by_last_name(p: Partition, w_id, d_id, last_name, stream_id,
                                 batch_capacity=DEFAULT_BATCH_CAPACITY) -> list:
    _check_partition(p, "CUSTOMER", w_id)
    rows = customers_by_last_name(p.customer_names.get((w_id, d_id), ()), last_name)
    return batch_split(rows, batch_capacity, stream_id)


def _equalities_only(predicate, columns) -> bool:
    if isinstance(predicate, Eq):
        return predicate.column in columns
    if isinstance(predicate, And):
        return all(_equalities_only(q, columns) for q in predicate.parts)
    return False


# Orders that still have a NEW_ORDER row; scanned like a table but computed
# at the storage AC by probing NEW_ORDER keys.
OPEN_ORDERS = "OPEN_ORDERS"


def scan_rows(p: Partition, table: str, predicate, projection):
    """Return (matching projected rows, number of rows examined).

    Shipping rows as-is (``Always`` without projection) examines nothing:
    the result is a list of references to the stored rows.
    """
    if table == OPEN_ORDERS:
        new_order = p.tables["NEW_ORDER"]
        orders = p.tables["ORDERS"]
        candidates = [r for k, r in orders.items() if k in new_order]
        out = [project(r, projection) for r in candidates if predicate(r)]
        return out, len(orders)
    s = schema(table)
    store = p.tables[table]
    bindings = equality_bindings(predicate)
    if s.cluster and s.cluster[0] in bindings and s.cluster[1] in bindings:
        wd = (bindings[s.cluster[0]], bindings[s.cluster[1]])
        if table == "CUSTOMER" and projection is not None and set(projection) <= {"c_id", "c_last"} \
                and _equalities_only(predicate, set(s.cluster)):
            src = p.customer_names.get(wd, ())
            if tuple(projection) == ("c_id", "c_last"):
                return list(src), 0
            return [project(r, projection) for r in src], len(src)
        candidates = [store[k] for k in p.clusters[table].get(wd, ())]
    else:
        candidates = store.values()
    if isinstance(predicate, Always) and predicate.value and projection is None:
        return list(candidates), 0
    out = [project(r, projection) for r in candidates if predicate(r)]
    return out, len(candidates)


def scan_filter_source(p: Partition, table, predicate, projection, stream_id,
                       batch_capacity=DEFAULT_BATCH_CAPACITY) -> list:
    rows, _ = scan_rows(p, table, predicate, projection)
    return batch_split(rows, batch_capacity, stream_id)


def init_beam(p: Partition, e: Event, batch_capacity=DEFAULT_BATCH_CAPACITY) -> list:
    """Batches for a BeamInit; the runtime pushes them to ``e.kind.target_ac``."""
    k = e.kind
    return scan_filter_source(p, k.table, k.predicate, k.projection, k.stream_id, batch_capacity)


def money_totals(tables: dict) -> tuple:
    """(Σ w_ytd, Σ d_ytd, Σ h_amount) over merged table contents, in cents."""
    def total(table, col):
        rows = tables.get(table, {})
        return sum(r[col] for r in (rows.values() if isinstance(rows, dict) else rows))
    return total("WAREHOUSE", "w_ytd"), total("DISTRICT", "d_ytd"), total("HISTORY", "h_amount")


def money_conserved(before: tuple, after: tuple) -> bool:
    dw, dd, dh = (a - b for a, b in zip(after, before))
    return dw == dd == dh
