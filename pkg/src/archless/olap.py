"""The CH-Q3-shaped analytical query as a streaming operator pipeline.

Each warehouse gets its own pipeline (all join keys carry the warehouse),
placed either on a compute AC fed by raw beams from storage
(disaggregated) or on the warehouse's storage AC itself (shared-nothing).
Pipelines finish with a partial aggregate whose outputs are merged by a
final aggregate on one AC.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

from .errors import InsufficientAcs
from .events import (
    Aggregate,
    Always,
    BeamInit,
    Event,
    Ge,
    JoinBuild,
    JoinProbe,
    ScanFilter,
    StartsWith,
    StreamId,
    event_id_for,
)
from .routing import BEAM_TAG_BASE, RoutingPolicy
from .storage import OPEN_ORDERS

BEAMING_LEVELS = ("none", "build", "build+probe")
# tables beamed at admission for each level; the rest start at compile end
_EARLY = {
    "none": frozenset(),
    "build": frozenset({"CUSTOMER"}),
    "build+probe": frozenset({"CUSTOMER", OPEN_ORDERS, "ORDER_LINE"}),
}
GROUP_COLS = ("o_id", "o_w_id", "o_d_id", "o_entry_d")
ORDER_BY = (("revenue", True), ("o_entry_d", False), ("o_w_id", False), ("o_d_id", False),
            ("o_id", False))
_OPS_PER_PIPELINE = 8


@dataclass(frozen=True)
class QueryDescriptor:
    state_prefix: str = "A"
    date_cutoff: int = 20070101
    query_id: int = 1 << 40


@dataclass
class QueryPlan:
    descriptor: QueryDescriptor
    policy: RoutingPolicy
    # (issue at admission?, target storage AC, BeamInit event)
    beams: list
    # (target AC, operator event); released at compile end
    operators: list
    result_ac: int
    join_labels: dict = field(default_factory=dict)

    @property
    def acs(self) -> set:
        return {t for t, _ in self.operators}


def _sid(ac, qid, tag):
    return StreamId(ac, qid, tag)


def plan_query(desc: QueryDescriptor, policy, topology, beaming: str = "build+probe",
               compute_pool=None) -> QueryPlan:
    """Place one pipeline per warehouse and schedule its beams."""
    policy = RoutingPolicy.parse(policy)
    if beaming not in BEAMING_LEVELS:
        raise ValueError(f"beaming must be one of {BEAMING_LEVELS}")
    if policy not in (RoutingPolicy.Disaggregated, RoutingPolicy.SharedNothing):
        raise ValueError("analytical queries are placed disaggregated or shared-nothing")
    warehouses = sorted(topology.storage_of)
    if policy is RoutingPolicy.Disaggregated:
        pool = list(topology.compute_ids if compute_pool is None else compute_pool)
        if not pool:
            raise InsufficientAcs("disaggregated query placement needs compute ACs")
        place = {w: pool[i % len(pool)] for i, w in enumerate(warehouses)}
    else:
        place = {w: topology.storage_of[w] for w in warehouses}
    qid = desc.query_id
    early = _EARLY[beaming]
    beams, operators, labels = [], [], {}
    partials = []
    for n, w in enumerate(warehouses):
        st, ac = topology.storage_of[w], place[w]
        base = n * _OPS_PER_PIPELINE

        def op(i, kind, **kw):
            return Event(event_id_for(qid, base + i), qid, base + i, kind, **kw)

        def out(i, *targets):
            return dict(output_stream=_sid(ac, qid, base + i), output_targets=targets or (ac,))

        cust_pred = StartsWith("c_state", desc.state_prefix)
        order_pred = Ge("o_entry_d", desc.date_cutoff)
        scans = {
            "CUSTOMER": (cust_pred, ("c_id", "c_d_id", "c_w_id")),
            OPEN_ORDERS: (order_pred, ("o_id", "o_w_id", "o_d_id", "o_c_id", "o_entry_d")),
            "ORDER_LINE": (Always(), None),
        }
        beam_sid = {}
        for j, (table, (pred, proj)) in enumerate(scans.items()):
            sid = _sid(st, qid, BEAM_TAG_BASE + base + j)
            beam_sid[table] = sid
            # selection and projection are pushed into the beam; ORDER_LINE ships by reference
            kind = BeamInit(table, pred, proj, ac, sid)
            beams.append((table in early, st,
                          Event(event_id_for(qid, BEAM_TAG_BASE + base + j), qid, BEAM_TAG_BASE + base + j,
                                kind, storage_ac=st)))
        j1, j2 = 2 * n + 1, 2 * n + 2
        labels[j1], labels[j2] = "j1", "j2"
        operators += [
            (ac, op(0, ScanFilter("CUSTOMER", Always(), None),
                    input_streams=(beam_sid["CUSTOMER"],), **out(0))),
            (ac, op(1, JoinBuild(j1, ("c_w_id", "c_d_id", "c_id")),
                    required_streams=(_sid(ac, qid, base),))),
            (ac, op(2, ScanFilter(OPEN_ORDERS, Always(), None),
                    input_streams=(beam_sid[OPEN_ORDERS],), **out(2))),
            (ac, op(3, JoinProbe(j1, ("o_w_id", "o_d_id", "o_c_id"), ("o_id", "o_w_id", "o_d_id", "o_entry_d")),
                    input_streams=(_sid(ac, qid, base + 2),), **out(3))),
            (ac, op(4, JoinBuild(j2, ("o_w_id", "o_d_id", "o_id")),
                    required_streams=(_sid(ac, qid, base + 3),))),
            (ac, op(5, JoinProbe(j2, ("ol_w_id", "ol_d_id", "ol_o_id"), GROUP_COLS + ("ol_amount",)),
                    input_streams=(beam_sid["ORDER_LINE"],), **out(5))),
        ]
        partials.append((ac, op(6, Aggregate(GROUP_COLS, (("revenue", "sum", "ol_amount"),), final=False),
                                input_streams=(_sid(ac, qid, base + 5),))))
    result_ac = partials[0][0]
    final_idx = len(warehouses) * _OPS_PER_PIPELINE
    sources = []
    for ac, e in partials:
        sid = _sid(ac, qid, e.op_index)
        sources.append(sid)
        operators.append((ac, Event(e.event_id, qid, e.op_index, e.kind, input_streams=e.input_streams,
                                    output_stream=sid, output_targets=(result_ac,))))
    operators.append((result_ac, Event(event_id_for(qid, final_idx), qid, final_idx,
                                       Aggregate(GROUP_COLS, (("revenue", "sum", "revenue"),),
                                                 final=True, order_by=ORDER_BY),
                                       input_streams=tuple(sources))))
    return QueryPlan(desc, policy, beams, operators, result_ac, labels)


# --- reference --------------------------------------------------------------------


def ch_q3_reference(tables: dict, desc: QueryDescriptor = QueryDescriptor()) -> list:
    """Nested-loop evaluation straight over table rows, no streaming.

    ``tables`` maps table name to an iterable of rows (or to a key -> row dict).
    """
    def rows(name):
        t = tables[name]
        return list(t.values()) if isinstance(t, dict) else list(t)

    customers = [c for c in rows("CUSTOMER") if c["c_state"].startswith(desc.state_prefix)]

    # bucket per district so the nested loops stay affordable on test data
    def by_district(items, w, d):
        out = {}
        for r in items:
            out.setdefault((r[w], r[d]), []).append(r)
        return out

    new_d = by_district(rows("NEW_ORDER"), "no_w_id", "no_d_id")
    orders = [o for o in rows("ORDERS") if o["o_entry_d"] >= desc.date_cutoff
              and any(no["no_o_id"] == o["o_id"] for no in new_d.get((o["o_w_id"], o["o_d_id"]), ()))]
    lines = rows("ORDER_LINE")
    cust_d = by_district(customers, "c_w_id", "c_d_id")
    line_d = by_district(lines, "ol_w_id", "ol_d_id")
    revenue = {}
    for o in orders:
        wd = (o["o_w_id"], o["o_d_id"])
        if not any(c["c_id"] == o["o_c_id"] for c in cust_d.get(wd, ())):
            continue
        for ol in line_d.get(wd, ()):
            if ol["ol_o_id"] == o["o_id"]:
                g = (o["o_id"], o["o_w_id"], o["o_d_id"], o["o_entry_d"])
                revenue[g] = revenue.get(g, 0) + ol["ol_amount"]
    out = [dict(zip(GROUP_COLS, g), revenue=v) for g, v in revenue.items()]
    out.sort(key=lambda r: (-r["revenue"], r["o_entry_d"], r["o_w_id"], r["o_d_id"], r["o_id"]))
    return out


# --- driving and timing -------------------------------------------------------------


class QueryDriver:
    """Issues a query's beams and operators and collects its timing marks."""

    def __init__(self, plan: QueryPlan, compile_ms: float, admit_at: float = 0.0):
        self.plan = plan
        self.compile_us = compile_ms * 1000.0
        self.admit_at = admit_at
        self.marks = {}
        self.result = None
        self.done_at = None
        self.beam_issue = {}

    @property
    def compile_end(self) -> float:
        return self.admit_at + self.compile_us

    def start(self, ex) -> None:
        for early, st, e in self.plan.beams:
            t = self.admit_at if early else self.compile_end
            self.beam_issue[e.kind.stream_id] = t
            ex.post(-1, st, e, t)
        for ac, e in self.plan.operators:
            ex.post(-1, ac, e, self.compile_end)

    def notify(self, msg, ex) -> None:
        if msg[0] == "mark":
            _, _, phase, join_id, t = msg
            name = f"{phase}_{self.plan.join_labels[join_id]}"
            self.marks[name] = max(self.marks.get(name, 0.0), t)
        elif msg[0] == "result":
            self.result = msg[2]
            self.done_at = msg[3]

    def owns(self, msg) -> bool:
        return msg[0] in ("mark", "result") and msg[1] == self.plan.descriptor.query_id

    def report(self, ex=None) -> dict:
        build_done = self.marks["build_j1"]
        rep = {
            "total": self.done_at - self.admit_at,
            "build_phase": build_done - self.compile_end,
            "probe_phase": self.marks["probe_j2"] - build_done,
        }
        if ex is not None and hasattr(ex, "last_arrival"):
            ends = [ex.last_arrival[s] - t for s, t in self.beam_issue.items() if s in ex.last_arrival]
            rep["beam_duration"] = max(ends, default=0.0)
            rep["transfer"] = max((ex.transfer_us.get(s, 0.0) for s in self.beam_issue), default=0.0)
        return rep


def run_beamed_query(desc: QueryDescriptor, compile_ms: float, beaming: str, topology,
                     policy="disaggregated", compute_pool=None) -> dict:
    """Run one query alone on a virtual-time topology; returns timing and rows."""
    from .runtime import VirtualExecutor

    plan = plan_query(desc, policy, topology, beaming, compute_pool)
    driver = QueryDriver(plan, compile_ms)
    ex = VirtualExecutor(topology)
    topology.reset_clocks()
    ex.run(driver)
    rep = driver.report(ex)
    rep["rows"] = driver.result
    return rep


def emit_timing_csv(rows, path) -> None:
    """rows: iterable of dicts with compile_ms, beaming, phase, duration_us."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["compile_ms", "beaming", "phase", "duration_us"])
        for r in rows:
            w.writerow([r["compile_ms"], r["beaming"], r["phase"], f"{r['duration_us']:.3f}"])
