"""Transaction programs, commit tracking and correctness oracles."""
from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

import networkx as nx

from .errors import InvalidItemCount, UnexpectedAck
from .events import (
    Commit,
    InsertRecord,
    ReadRecord,
    Ref,
    SelectCustomerByLastName,
    UpdateRecord,
    is_write,
    pick_row,
    ref_ops,
)
from .storage import SCHEMA

DEFAULT_H_DATE = 20240101


@dataclass(frozen=True)
class TransactionProgram:
    ops: tuple
    home_partition: int
    # op_index -> frozenset of op indices it must wait for
    deps: dict = field(default_factory=dict)
    name: str = ""

    @property
    def write_ops(self) -> frozenset:
        return frozenset(i for i, op in enumerate(self.ops) if is_write(op))


def _program(ops, home, name) -> TransactionProgram:
    ops = list(ops)
    if ops and isinstance(ops[-1], Commit) and not ops[-1].write_ops:
        ops[-1] = Commit(ops[-1].expected_ack_count, tuple(i for i, op in enumerate(ops) if is_write(op)))
    ops = tuple(ops)
    deps = {}
    for i, op in enumerate(ops):
        d = ref_ops(op)
        if isinstance(op, Commit):
            d = set(range(i))
        if d:
            deps[i] = frozenset(d)
    return TransactionProgram(ops, home, deps, name)


def payment_program(w_id, d_id, c_w_id, c_d_id, c_last_or_id, amount, h_id=0,
                    h_date=DEFAULT_H_DATE) -> TransactionProgram:
    """TPC-C payment; ``c_last_or_id`` is a last name (str) or a customer id.

    Amounts are integer cents.
    """
    if amount <= 0:
        raise ValueError("payment amount must be positive")
    by_name = isinstance(c_last_or_id, str)
    if by_name:
        customer_op = SelectCustomerByLastName(c_w_id, c_d_id, c_last_or_id)
        c_id = Ref(2, "c_id", pick="median")
    else:
        c_id = c_last_or_id
        customer_op = ReadRecord("CUSTOMER", (c_w_id, c_d_id, c_id))
    ops = [
        UpdateRecord("WAREHOUSE", (w_id,), (("w_ytd", amount),)),
        UpdateRecord("DISTRICT", (w_id, d_id), (("d_ytd", amount),)),
        customer_op,
        UpdateRecord("CUSTOMER", (c_w_id, c_d_id, c_id),
                     (("c_balance", -amount), ("c_ytd_payment", amount), ("c_payment_cnt", 1))),
        InsertRecord("HISTORY", (("h_id", h_id), ("h_w_id", w_id), ("h_d_id", d_id),
                                 ("h_c_id", c_id), ("h_amount", amount), ("h_date", h_date))),
        Commit(4),
    ]
    return _program(ops, w_id, "payment")


def neworder_program(w_id, d_id, c_id, item_ids, qtys, o_id=1, entry_d=DEFAULT_H_DATE) -> TransactionProgram:
    item_ids, qtys = list(item_ids), list(qtys)
    if not 5 <= len(item_ids) <= 15 or len(qtys) != len(item_ids):
        raise InvalidItemCount(f"{len(item_ids)} items")
    if any(i < 1 for i in item_ids) or any(q < 1 for q in qtys):
        raise InvalidItemCount("item ids and quantities must be positive")
    ops = [
        ReadRecord("CUSTOMER", (w_id, d_id, c_id)),
        ReadRecord("WAREHOUSE", (w_id,)),
        InsertRecord("ORDERS", (("o_id", o_id), ("o_w_id", w_id), ("o_d_id", d_id),
                                ("o_c_id", c_id), ("o_entry_d", entry_d))),
        InsertRecord("NEW_ORDER", (("no_o_id", o_id), ("no_w_id", w_id), ("no_d_id", d_id))),
    ]
    for n, (i_id, qty) in enumerate(zip(item_ids, qtys), start=1):
        read_at = len(ops)
        ops.append(ReadRecord("ITEM", (i_id,)))
        ops.append(UpdateRecord("STOCK", (w_id, i_id), (("s_quantity", -qty),), restock=(10, 91)))
        ops.append(InsertRecord("ORDER_LINE", (
            ("ol_o_id", o_id), ("ol_w_id", w_id), ("ol_d_id", d_id), ("ol_number", n),
            ("ol_i_id", i_id), ("ol_amount", Ref(read_at, "i_price", scale=qty)),
            ("ol_quantity", qty))))
    ops.append(Commit(2 + 2 * len(item_ids)))
    return _program(ops, w_id, "neworder")


# --- commit tracking ---------------------------------------------------------


@dataclass
class CommitTracker:
    txn_id: int
    expected_acks: Optional[int] = None
    write_ops: Optional[frozenset] = None
    received: set = field(default_factory=set)
    outcome: str = "pending"
    admitted_at: float = 0.0
    committed_at: Optional[float] = None

    def _settle(self, now):
        if self.outcome == "pending" and self.expected_acks is not None \
                and len(self.received) == self.expected_acks:
            self.outcome = "committed"
            self.committed_at = now
        return self.outcome

    def expect(self, expected_acks: int, write_ops=None, now=0.0) -> str:
        self.expected_acks = expected_acks
        if write_ops is not None:
            self.write_ops = frozenset(write_ops)
        return self._settle(now)

    @property
    def latency(self):
        if self.committed_at is None:
            return None
        return self.committed_at - self.admitted_at


def on_ack(t: CommitTracker, ack, now=0.0) -> str:
    if ack.txn_id != t.txn_id:
        raise UnexpectedAck(f"ack for txn {ack.txn_id} delivered to tracker of {t.txn_id}")
    for op in ack.kind.ops:
        if t.write_ops is not None and op not in t.write_ops:
            raise UnexpectedAck(f"op {op} is not a write of txn {t.txn_id}")
        t.received.add(op)
    return t._settle(now)


# --- execution history and serializability -----------------------------------


@dataclass(frozen=True)
class HistoryRecord:
    txn_id: int
    global_seq: Optional[int]
    op_index: int
    kind: str  # "R" or "W"
    table: str
    key: tuple
    value: object = None
    ac: int = 0
    local_order: int = 0


TRACE_HEADER = "txn,seq,op,kind,table,key,ac,local_order"


def _key_str(key) -> str:
    return ":".join(str(k) for k in key)


def format_trace(records: Iterable[HistoryRecord]) -> str:
    lines = [TRACE_HEADER]
    for r in records:
        seq = "" if r.global_seq is None else r.global_seq
        lines.append(f"{r.txn_id},{seq},{r.op_index},{r.kind},{r.table},{_key_str(r.key)},{r.ac},{r.local_order}")
    return "\n".join(lines) + "\n"


def dump_trace(records, path) -> None:
    with open(path, "w") as f:
        f.write(format_trace(records))


def parse_trace(text: str) -> list:
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line == TRACE_HEADER or line.startswith("#"):
            continue
        txn, seq, op, kind, table, key, ac, local = line.split(",")
        out.append(HistoryRecord(
            txn_id=int(txn), global_seq=int(seq) if seq else None, op_index=int(op), kind=kind,
            table=table, key=tuple(key.split(":")), ac=int(ac), local_order=int(local)))
    return out


def load_trace(path) -> list:
    with open(path) as f:
        return parse_trace(f.read())


@dataclass
class Verdict:
    ok: bool
    cycle: list = field(default_factory=list)
    misordered: list = field(default_factory=list)
    edges: int = 0

    def __bool__(self):
        return self.ok


def conflict_graph(history: Iterable[HistoryRecord]) -> nx.DiGraph:
    """WR/WW/RW edges between transactions, built per key in execution order.

    Only edges to the latest writer and the reads since it are added; the
    older ones follow transitively, so acyclicity is unaffected.
    """
    by_key = {}
    g = nx.DiGraph()
    for r in history:
        by_key.setdefault((r.table, r.key), []).append(r)
        g.add_node(r.txn_id, seq=r.global_seq)
    for accesses in by_key.values():
        accesses.sort(key=lambda r: (r.ac, r.local_order))
        last_writer = None
        readers = []
        for r in accesses:
            if r.kind == "W":
                if last_writer is not None and last_writer != r.txn_id:
                    g.add_edge(last_writer, r.txn_id, type="ww")
                for t in readers:
                    if t != r.txn_id:
                        g.add_edge(t, r.txn_id, type="rw")
                last_writer, readers = r.txn_id, []
            else:
                if last_writer is not None and last_writer != r.txn_id:
                    g.add_edge(last_writer, r.txn_id, type="wr")
                readers.append(r.txn_id)
    return g


def check_serializable(history, check_seq_order=False) -> Verdict:
    g = conflict_graph(history)
    try:
        cycle = nx.find_cycle(g)
    except nx.NetworkXNoCycle:
        cycle = []
    misordered = []
    if check_seq_order:
        seqs = nx.get_node_attributes(g, "seq")
        for a, b in g.edges:
            sa, sb = seqs.get(a), seqs.get(b)
            if sa is None or sb is None or not sa < sb:
                misordered.append((a, b))
    witness = sorted({a for a, _ in cycle} | {b for _, b in cycle})
    return Verdict(not cycle and not misordered, witness, misordered, g.number_of_edges())


# --- lock manager as a streaming join (demonstration only) -------------------


def _compatible(mode, holders: dict) -> bool:
    return not holders or (mode == "S" and all(m == "S" for m in holders.values()))


class LockStreamJoin:
    """Joins a lock-request event stream with a lock-state data stream.

    State rows look like ``{"item": i, "holders": {txn: mode}}``; every
    change to an item re-emits its row on :attr:`emitted`.
    """

    def __init__(self):
        self.holders = {}
        self.waiting = {}
        self.emitted = []

    def feed_state(self, rows):
        for row in rows:
            self.holders[row["item"]] = dict(row["holders"])

    def _emit(self, item):
        self.emitted.append({"item": item, "holders": dict(self.holders.get(item, {}))})

    def on_request(self, req) -> list:
        txn, item, mode = req["txn"], req["item"], req["mode"]
        holders = self.holders.setdefault(item, {})
        queue = self.waiting.setdefault(item, deque())
        if mode == "release":
            decisions = [("release", txn, item)]
            if txn in holders:
                del holders[txn]
            else:
                self.waiting[item] = deque(q for q in queue if q[0] != txn)
                queue = self.waiting[item]
            while queue and _compatible(queue[0][1], holders):
                t, m = queue.popleft()
                holders[t] = m
                decisions.append(("grant", t, item, m))
            self._emit(item)
            return decisions
        if not queue and _compatible(mode, holders):
            holders[txn] = mode
            self._emit(item)
            return [("grant", txn, item, mode)]
        queue.append((txn, mode))
        return [("queue", txn, item, mode)]


def lock_stream_join(requests, lock_state=()) -> tuple:
    """Run the join over a request stream; returns (decisions, emitted state rows)."""
    j = LockStreamJoin()
    j.feed_state(lock_state)
    decisions = []
    for req in requests:
        decisions.extend(j.on_request(req))
    return decisions, j.emitted


# --- single-threaded reference executor ---------------------------------------


def _resolve(v, outputs):
    if not isinstance(v, Ref):
        return v
    rows = outputs[v.op_index]
    return pick_row(rows, v.pick)[v.column] * v.scale


def reference_execute(tables: dict, programs) -> dict:
    """Apply programs one after another to ``tables`` (table -> key -> row).

    Deliberately shares no code with the storage/runtime path.
    """
    db = {t: dict(rows) for t, rows in tables.items()}
    for prog in programs:
        outputs = {}
        for i, op in enumerate(prog.ops):
            if isinstance(op, ReadRecord):
                key = tuple(_resolve(k, outputs) for k in op.key)
                outputs[i] = [db[op.table][key]]
            elif isinstance(op, SelectCustomerByLastName):
                outputs[i] = sorted(
                    (r for (w, d, _), r in db["CUSTOMER"].items()
                     if w == op.w_id and d == op.d_id and r["c_last"] == op.last_name),
                    key=lambda r: r["c_id"])
            elif isinstance(op, UpdateRecord):
                key = tuple(_resolve(k, outputs) for k in op.key)
                row = dict(db[op.table][key])
                for col, amt in op.delta:
                    row[col] = row[col] + _resolve(amt, outputs)
                if op.restock and row[op.delta[0][0]] < op.restock[0]:
                    row[op.delta[0][0]] += op.restock[1]
                db[op.table][key] = row
            elif isinstance(op, InsertRecord):
                row = {c: _resolve(v, outputs) for c, v in op.record}
                key = tuple(row[c] for c in SCHEMA[op.table].key)
                assert key not in db[op.table], (op.table, key)
                db[op.table][key] = row
    return db


def merged_tables(partitions) -> dict:
    """Union of all partitions' tables (replicated tables counted once)."""
    out = {t: {} for t in SCHEMA}
    for p in partitions.values() if isinstance(partitions, dict) else partitions:
        for t, rows in p.tables.items():
            out[t].update(rows)
    return out


def state_hash(tables: dict) -> str:
    h = hashlib.sha256()
    for t in sorted(tables):
        for k in sorted(tables[t]):
            row = tables[t][k]
            h.update(repr((t, k, sorted(row.items()))).encode())
    return h.hexdigest()
