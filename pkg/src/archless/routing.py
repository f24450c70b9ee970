"""Routing: placement of a program's events on ACs under a policy.

The router plays the optimizer role. It decides which AC runs every op,
stamps admission order for concurrency control, and materializes the
self-contained events (stream wiring included) that the driver enqueues.
"""
from __future__ import annotations

import enum
import itertools
import threading
from collections import defaultdict
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import networkx as nx

from .costs import DEFAULT_COSTS, CostModel
from .errors import InsufficientAcs
from .events import (
    RECORD_KINDS,
    And,
    BeamInit,
    Commit,
    Eq,
    Event,
    InsertRecord,
    ReadRecord,
    SelectCustomerByLastName,
    StreamId,
    event_id_for,
    make_txn_events,
    ref_ops,
)
from .storage import record_partition

# stream tags at or above this value carry beams rather than op outputs
BEAM_TAG_BASE = 1 << 12
EXHAUSTIVE_LIMIT = 1 << 17


class RoutingPolicy(enum.Enum):
    SharedNothing = "shared_nothing"
    Disaggregated = "disaggregated"
    IntraTxnNaive = "intra_naive"
    IntraTxnPrecise = "intra_precise"
    StreamingCC = "streaming_cc"

    @classmethod
    def parse(cls, name) -> "RoutingPolicy":
        if isinstance(name, cls):
            return name
        for p in cls:
            if name in (p.value, p.name):
                return p
        raise ValueError(f"unknown routing policy {name!r}; expected one of "
                         f"{', '.join(p.value for p in cls)}")

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class RoutingPlan:
    policy: RoutingPolicy
    # op_index -> AC that receives the op's event
    assignments: dict
    commit_target: int
    # (BeamInit event, issue offset from admission in µs)
    beams: tuple = ()
    # ops sent as one message per target when True, one message per event otherwise
    bundled: bool = True


class Sequencer:
    """Single admission point: one global sequence number per transaction.

    Lane counters give every laned event its position inside its
    (storage AC, conflict class) lane; they are bumped in admission order
    under the same lock, so per-lane order agrees with global order.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.counter = 0
        self.lanes = defaultdict(int)

    def admit(self, events: Sequence[Event]) -> tuple:
        with self._lock:
            self.counter += 1
            seq = self.counter
            out = []
            for e in events:
                lane = None
                if e.conflict_class is not None and e.storage_ac is not None:
                    key = (e.storage_ac, e.conflict_class)
                    lane = self.lanes[key]
                    self.lanes[key] = lane + 1
                out.append(replace(e, global_seq=seq, lane_seq=lane))
        return seq, out


# --- precise split -----------------------------------------------------------------


def _op_costs(program, cost_model, rows_hint) -> tuple:
    if isinstance(cost_model, CostModel):
        return tuple(cost_model.estimate(op, rows_hint) for op in program.ops)
    return tuple(cost_model)


def split_precise(program, cost_model=DEFAULT_COSTS, k: int = 2, rows_hint: int = 100) -> list:
    """Split the non-commit ops into at most ``k`` groups of similar cost.

    Groups must form an acyclic dependency graph, so each can run as one
    sub-sequence on its own AC. Returned groups are sorted op-index lists;
    the group holding op 0 comes first.
    """
    ops = [i for i, op in enumerate(program.ops) if not isinstance(op, Commit)]
    costs = _op_costs(program, cost_model, rows_hint)
    deps = tuple(sorted((i, d) for i, ds in program.deps.items() if i in ops for d in ds))
    return [list(g) for g in _split(tuple(ops), tuple(costs[i] for i in ops), deps, k)]


@lru_cache(maxsize=256)
def _split(ops, costs, deps, k):
    n = len(ops)
    if n == 0:
        return ()
    k = max(1, min(k, n))
    cost = dict(zip(ops, costs))
    if k ** n <= EXHAUSTIVE_LIMIT:
        best = None
        for assign in itertools.product(range(k), repeat=n - 1):
            assign = (0,) + assign  # op 0 always leads group 0
            if len(set(assign)) < k:
                continue
            loads = [0.0] * k
            for i, g in zip(ops, assign):
                loads[g] += cost[i]
            where = dict(zip(ops, assign))
            if not _acyclic(where, deps, k):
                continue
            cross = sum(1 for i, d in deps if where[i] != where[d])
            score = (round(max(loads), 9), cross, assign)
            if best is None or score < best[0]:
                best = (score, where)
        if best is not None:
            return _groups(best[1], k)
    return _split_chains(ops, cost, deps, k)


def _acyclic(where, deps, k) -> bool:
    g = nx.DiGraph()
    g.add_nodes_from(range(k))
    g.add_edges_from((where[d], where[i]) for i, d in deps if where[i] != where[d])
    return nx.is_directed_acyclic_graph(g)


def _groups(where, k) -> tuple:
    groups = [[] for _ in range(k)]
    for i, g in where.items():
        groups[g].append(i)
    groups = [sorted(g) for g in groups if g]
    groups.sort(key=lambda g: g[0])
    return tuple(tuple(g) for g in groups)


def _split_chains(ops, cost, deps, k):
    """Large programs: keep dependency-connected ops together, then LPT."""
    parent = {i: i for i in ops}

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, d in deps:
        parent[find(i)] = find(d)
    units = defaultdict(list)
    for i in ops:
        units[find(i)].append(i)
    loads = [0.0] * k
    where = {}
    for unit in sorted(units.values(), key=lambda u: (-sum(cost[i] for i in u), u[0])):
        g = min(range(k), key=lambda j: (loads[j], j))
        loads[g] += sum(cost[i] for i in unit)
        for i in unit:
            where[i] = g
    return _groups(where, k)


# --- routing ---------------------------------------------------------------------------


def _owner(topology, kind, home_partition) -> Optional[int]:
    """Storage AC holding the record an op touches (home for replicated tables)."""
    if isinstance(kind, RECORD_KINDS):
        part = record_partition(kind)
        return topology.storage_of[home_partition if part is None else part]
    if isinstance(kind, SelectCustomerByLastName):
        return topology.storage_of[kind.w_id]
    return None


def _need_compute(topology, n, policy):
    have = len(topology.compute_ids)
    if have < n:
        raise InsufficientAcs(f"{policy.value} needs {n} compute ACs, topology has {have}")


def plan_route(program, policy, topology, home_partition=None, *, rotation: int = 0,
               cost_model: CostModel = DEFAULT_COSTS, rows_hint: int = 100,
               compute_pool: Optional[Sequence[int]] = None) -> RoutingPlan:
    """Assign every op of ``program`` to an AC.

    ``rotation`` spreads successive transactions over the compute pool;
    ``compute_pool`` restricts which compute ACs may be used.
    """
    policy = RoutingPolicy.parse(policy)
    home = program.home_partition if home_partition is None else home_partition
    if home not in topology.storage_of:
        raise InsufficientAcs(f"no storage AC for partition {home}")
    ops = program.ops
    n = len(ops)
    home_ac = topology.storage_of[home]
    pool = list(topology.compute_ids if compute_pool is None else compute_pool)
    last = n - 1
    assign = {}
    bundled = True
    if policy is RoutingPolicy.SharedNothing:
        assign = {i: home_ac for i in range(n)}
        commit = home_ac
    elif policy is RoutingPolicy.StreamingCC:
        commit = home_ac
        for i, op in enumerate(ops):
            if isinstance(op, SelectCustomerByLastName) and pool:
                assign[i] = pool[rotation % len(pool)]
            elif isinstance(op, Commit):
                assign[i] = commit
            else:
                assign[i] = _owner(topology, op, home)
    elif policy is RoutingPolicy.Disaggregated:
        if not pool:
            raise InsufficientAcs("disaggregated needs at least 1 compute AC")
        ac = pool[rotation % len(pool)]
        assign = {i: ac for i in range(n)}
        commit = ac
    elif policy is RoutingPolicy.IntraTxnNaive:
        if n > 2 and len(pool) < 2:
            raise InsufficientAcs("intra_naive needs at least 2 compute ACs")
        if not pool:
            raise InsufficientAcs("intra_naive needs compute ACs")
        assign = {i: pool[(rotation + i) % len(pool)] for i in range(n)}
        commit = assign[last]
        bundled = False
    elif policy is RoutingPolicy.IntraTxnPrecise:
        if n > 2 and len(pool) < 2:
            raise InsufficientAcs("intra_precise needs at least 2 compute ACs")
        if not pool:
            raise InsufficientAcs("intra_precise needs compute ACs")
        groups = split_precise(program, cost_model, k=min(2, len(pool)), rows_hint=rows_hint)
        for j, g in enumerate(groups):
            for i in g:
                assign[i] = pool[(rotation + j) % len(pool)]
        commit = pool[rotation % len(pool)]
        assign[last] = commit
    else:  # pragma: no cover - enum is closed
        raise ValueError(policy)
    return RoutingPlan(policy, assign, commit, (), bundled)


class Router:
    """Stateful front end: plans, stamps and materializes transactions."""

    def __init__(self, topology, policy, sequencer: Optional[Sequencer] = None,
                 cost_model: CostModel = DEFAULT_COSTS, rows_hint: int = 100,
                 compute_pool: Optional[Sequence[int]] = None):
        self.topology = topology
        self.policy = RoutingPolicy.parse(policy)
        self.sequencer = sequencer or Sequencer()
        self.cost_model = cost_model
        self.rows_hint = rows_hint
        self.compute_pool = compute_pool
        self._rotation = itertools.count()
        self._op_pointer = 0

    def route(self, program, txn_id: int) -> tuple:
        """Returns ``(plan, messages)`` where messages are ``(target, payload)``."""
        if self.policy is RoutingPolicy.IntraTxnNaive:
            # one round-robin pointer over all ops, blind to their cost
            rotation = self._op_pointer
            self._op_pointer += len(program.ops)
        else:
            rotation = next(self._rotation)
        plan = plan_route(program, self.policy, self.topology, rotation=rotation,
                          cost_model=self.cost_model, rows_hint=self.rows_hint,
                          compute_pool=self.compute_pool)
        events, beams = materialize(program, plan, txn_id, self.topology)
        _, events = self.sequencer.admit(events)
        return plan, _messages(plan, events, beams)


def _messages(plan: RoutingPlan, events, beams) -> list:
    out = [(b.storage_ac, b) for b in beams]
    if not plan.bundled:
        out.extend((plan.assignments[e.op_index], e) for e in events)
        return out
    by_target = {}
    for e in events:
        by_target.setdefault(plan.assignments[e.op_index], []).append(e)
    out.extend((t, tuple(es)) for t, es in by_target.items())
    return out


def materialize(program, plan: RoutingPlan, txn_id: int, topology) -> tuple:
    """Build events with stream wiring for ``plan``; returns (events, beam events)."""
    base = make_txn_events(program, txn_id)
    ops = program.ops
    home = program.home_partition
    assign = plan.assignments
    storage_ids = set(topology.storage_of.values())
    producer = {}
    owners = {}
    for i, op in enumerate(ops):
        owners[i] = _owner(topology, op, home)
        producer[i] = owners[i] if isinstance(op, RECORD_KINDS) else assign[i]
    dependents = defaultdict(set)
    for i, op in enumerate(ops):
        for d in ref_ops(op):
            dependents[d].add(i)
    events, beams = [], []
    for e in base:
        i, op = e.op_index, e.kind
        required = tuple(StreamId(producer[d], txn_id, d) for d in sorted(ref_ops(op)))
        targets = tuple(sorted({assign[j] for j in dependents[i]}))
        kw = dict(required_streams=required, commit_ac=plan.commit_target)
        if targets:
            kw.update(output_stream=StreamId(producer[i], txn_id, i), output_targets=targets)
        if isinstance(op, RECORD_KINDS):
            kw["storage_ac"] = owners[i]
            if record_partition(op) is not None:
                kw["conflict_class"] = record_partition(op)
        elif isinstance(op, SelectCustomerByLastName) and assign[i] not in storage_ids:
            sid = StreamId(owners[i], txn_id, BEAM_TAG_BASE + i)
            beam = BeamInit("CUSTOMER", And((Eq("c_w_id", op.w_id), Eq("c_d_id", op.d_id))),
                            ("c_id", "c_last"), assign[i], sid)
            beams.append(Event(event_id_for(txn_id, BEAM_TAG_BASE + i), txn_id, BEAM_TAG_BASE + i,
                               beam, storage_ac=owners[i]))
            kw["required_streams"] = (sid,) + required
        events.append(replace(e, **kw))
    return events, beams


def plan_query(query_descriptor, policy, topology, **kw):
    """Operator placement and beam schedule for an analytical query."""
    from .olap import plan_query as _plan

    return _plan(query_descriptor, policy, topology, **kw)
