"""Per-operation cost constants (microseconds) and their calibration.

The virtual-time executor charges these to an AC's clock as it runs
handlers, so placement decisions show up as per-AC load. ``calibrate``
derives the constants by timing the real handlers on this machine.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, fields, replace


@dataclass(frozen=True)
class CostModel:
    event: float = 2.5       # dispatch of one event by the AC loop
    send: float = 1.2        # one cross-AC message, sender side
    recv: float = 0.8        # one cross-AC message, receiver side
    read: float = 3.5
    update: float = 5.5
    insert: float = 8.0
    ack: float = 0.85
    commit: float = 1.3
    scan_row: float = 0.17   # predicate evaluation per examined row
    batch: float = 1.2       # framing one data batch
    build_row: float = 1.2
    probe_row: float = 0.4   # hash lookup per probe row
    out_row: float = 0.8     # materializing one joined row
    agg_row: float = 0.3
    direct_op: float = 0.06  # loop overhead per op in aggregated execution

    def replace(self, **kw) -> "CostModel":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return asdict(self)

    # estimates used by the intra-transaction splitter
    def estimate(self, op, rows_hint: int = 100) -> float:
        from .events import Commit, InsertRecord, ReadRecord, SelectCustomerByLastName, UpdateRecord

        if isinstance(op, UpdateRecord):
            return self.event + self.update
        if isinstance(op, InsertRecord):
            return self.event + self.insert
        if isinstance(op, ReadRecord):
            return self.event + self.read
        if isinstance(op, SelectCustomerByLastName):
            # the scan leg filters the whole district name list
            return self.event + self.batch + self.scan_row * rows_hint
        if isinstance(op, Commit):
            return self.event + self.commit
        return self.event


DEFAULT_COSTS = CostModel()


def _per_call(fn, n) -> float:
    t0 = time.perf_counter()
    for _ in range(n):
        fn()
    return (time.perf_counter() - t0) / n * 1e6


def calibrate(n: int = 20000) -> CostModel:
    """Time the real handlers; returns a CostModel with measured constants."""
    from . import storage
    from .events import (
        Always, DataBatch, Event, InsertRecord, ReadRecord, StartsWith, StreamId, UpdateRecord,
    )
    from .queues import BoundedQueue

    p = storage.Partition(0)
    p.load("WAREHOUSE", [{"w_id": 0, "w_ytd": 0}])
    p.load("CUSTOMER", [
        {"c_id": c, "c_d_id": 1, "c_w_id": 0, "c_last": f"N{c % 97}", "c_state": "AB",
         "c_balance": 0, "c_ytd_payment": 0, "c_payment_cnt": 0} for c in range(1, 2001)
    ])
    sid = StreamId(0, 0, 0)
    upd = Event(1, 1, 0, UpdateRecord("WAREHOUSE", (0,), (("w_ytd", 1),)))
    rd = Event(2, 1, 1, ReadRecord("WAREHOUSE", (0,)), output_stream=sid)
    inserts = iter([Event(3, 1, 2, InsertRecord("HISTORY", (
        ("h_id", i), ("h_w_id", 0), ("h_d_id", 1), ("h_c_id", 1), ("h_amount", 1), ("h_date", 0))))
        for i in range(n)])

    def ins():
        storage.apply_update(p, next(inserts))

    out = {}
    out["update"] = _per_call(lambda: storage.apply_update(p, upd), n)
    out["insert"] = _per_call(ins, n)
    out["read"] = _per_call(lambda: storage.read_record(p, rd), n)
    names = p.customer_names[(0, 1)]
    rows = list(p.tables["CUSTOMER"].values())
    reps = max(1, n // 200)
    out["scan_row"] = _per_call(lambda: storage.customers_by_last_name(names, "N5"), reps) / len(names)
    pred = StartsWith("c_state", "A")
    scan_row_pred = _per_call(lambda: [r for r in rows if pred(r)], reps) / len(rows)
    out["scan_row"] = (out["scan_row"] + scan_row_pred) / 2
    out["batch"] = _per_call(lambda: DataBatch(sid, 0, tuple(rows[:8]), False), n)
    key = ("c_w_id", "c_d_id", "c_id")

    def build():
        table = {}
        for r in rows:
            table.setdefault(tuple(r[c] for c in key), []).append(r)
        return table

    table = build()
    out["build_row"] = _per_call(build, reps) / len(rows)

    def probe():
        res = []
        for r in rows:
            for b in table.get(tuple(r[c] for c in key), ()):
                res.append({**b, **r})
        return res

    full = _per_call(probe, reps) / len(rows)
    miss = {}

    def lookup():
        for r in rows:
            miss.get(tuple(r[c] for c in key), ())

    out["probe_row"] = _per_call(lookup, reps) / len(rows)
    out["out_row"] = max(full - out["probe_row"], 0.0)

    def agg():
        acc = {}
        for r in rows:
            g = (r["c_w_id"], r["c_d_id"], r["c_id"], r["c_state"])
            acc[g] = acc.get(g, 0) + r["c_balance"]
        return acc

    out["agg_row"] = _per_call(agg, reps) / len(rows)
    q = BoundedQueue(0)
    out["send"] = _per_call(lambda: q.put_nowait(upd), n)
    out["recv"] = _per_call(q.get_nowait, n)
    out["event"] = _measure_event_overhead(n // 4)
    out["ack"], out["commit"] = _measure_commit_path(n)
    out["direct_op"] = _per_call(lambda: None, n)
    known = {f.name for f in fields(CostModel)}
    return CostModel(**{k: round(v, 4) for k, v in out.items() if k in known})


def _measure_event_overhead(n: int) -> float:
    """Per-event cost of the AC loop (accept, runnable check, dispatch, release)."""
    from .events import CompileQuery, Event
    from .runtime import AnyComponent

    ac = AnyComponent(0)
    evs = [Event(i, i, 0, CompileQuery(None)) for i in range(n)]
    t0 = time.perf_counter()
    ac.accept_events(evs)
    ac.ac_step()
    return (time.perf_counter() - t0) / n * 1e6


def _measure_commit_path(n: int) -> tuple:
    from .events import Ack, Event
    from .txn import CommitTracker, on_ack

    acks = [Event(i, 1, i, Ack(i)) for i in range(n)]
    t = CommitTracker(1)
    ack_us = _per_call(lambda it=iter(acks): on_ack(t, next(it)), n)
    commit_us = _per_call(lambda: CommitTracker(2).expect(4, (0, 1, 3, 4)), n)
    return ack_us, commit_us
