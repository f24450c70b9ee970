"""The generic AnyComponent (AC) and the executors that drive a topology.

An AC is a single-threaded loop over two bounded queues (events and data
batches). It never blocks on a missing input: events whose streams are
incomplete stay pending while everything runnable executes, and events of
a conflict class are released by a per-class reorder buffer in lane order.

Two executors run the same ACs:

* :class:`ThreadedExecutor` gives every AC its own OS thread (optionally
  pinned to a core) and real blocking queues with backpressure.
* :class:`VirtualExecutor` is a conservative discrete-event scheduler. Each
  AC owns a virtual clock that advances by the cost model's charge for
  every handler it runs, which makes per-AC load (and thus parallel
  speedup) measurable on any number of physical cores.
"""
from __future__ import annotations

import heapq
import itertools
import logging
import os
import threading
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from queue import Full
from typing import Optional

from . import storage
from .costs import DEFAULT_COSTS, CostModel
from .errors import BuildIncomplete, InvalidPhaseState, QueueDisconnected, UnknownAc
from .events import (
    DEFAULT_BATCH_CAPACITY,
    Ack,
    Aggregate,
    BeamInit,
    Commit,
    CompileQuery,
    DataBatch,
    Event,
    InsertRecord,
    JoinBuild,
    JoinProbe,
    ReadRecord,
    ScanFilter,
    SelectCustomerByLastName,
    UpdateRecord,
    batch_split,
    has_refs,
    pick_row,
    project,
    resolve,
)
from .queues import BoundedQueue
from .txn import CommitTracker, HistoryRecord, on_ack

logger = logging.getLogger(__name__)

DRIVER = -1


@dataclass(frozen=True)
class AcId:
    id: int
    role: str = "compute"
    partition_id: Optional[int] = None


@dataclass(frozen=True)
class Progress:
    events_executed: int
    events_deferred: int


class StreamBuffer:
    __slots__ = ("batches", "complete")

    def __init__(self):
        self.batches = []
        self.complete = False

    def rows(self) -> list:
        out = []
        for b in self.batches:
            out.extend(b.rows)
        return out


@dataclass
class JoinState:
    join_id: int
    table: dict
    build_complete: bool = False
    rows: int = 0


class _OpState:
    __slots__ = ("consumed", "out_seq", "acc", "started")

    def __init__(self, inputs):
        self.consumed = {s: 0 for s in inputs}
        self.out_seq = 0
        self.acc = None
        self.started = None


class Fused:
    """A bundle of one transaction's events run as one aggregated sub-sequence.

    Streams produced inside the bundle are passed in memory; streams from
    other ACs (``external``) must be complete before the bundle runs. Writes
    are acknowledged with a single aggregated Ack unless the bundle carries
    its own Commit.
    """
    __slots__ = ("events", "lane_seq", "lane_end", "event_id", "conflict_class", "external",
                 "commit_ac", "has_commit")

    def __init__(self, events, laned, external, has_commit):
        self.events = events
        self.event_id = events[0].event_id
        self.external = external
        self.commit_ac = events[0].commit_ac
        self.has_commit = has_commit
        if laned:
            self.conflict_class = laned[0].conflict_class
            self.lane_seq = laned[0].lane_seq
            self.lane_end = laned[-1].lane_seq
        else:
            self.conflict_class = self.lane_seq = self.lane_end = None

    @property
    def txn_id(self):
        return self.events[0].txn_id


def execute_aggregated(p, ops, costs: CostModel, events=None, log=None, inputs=None) -> float:
    """Run ``ops`` in order against partition ``p``, passing outputs in memory.

    Returns the charged cost in µs. ``events`` (parallel to ``ops``) supply
    op indices and ordering stamps; ``inputs`` maps op index -> rows for
    outputs produced elsewhere; ``log(e_or_i, kind, table, key, value)``
    records accesses.
    """
    outputs = dict(inputs) if inputs else {}
    us = 0.0
    for i, k in enumerate(ops):
        us += costs.direct_op
        if isinstance(k, Commit):
            us += costs.commit
            continue
        if has_refs(k):
            k = resolve(k, lambda r: pick_row(outputs[r.op_index], r.pick)[r.column] * r.scale)
        e = None if events is None else events[i]
        idx = i if e is None else e.op_index
        if isinstance(k, ReadRecord):
            row = p.get(k.table, k.key)
            if e is not None:
                storage._check_order(p, e)
            outputs[idx] = (row,)
            us += costs.read
            if log is not None and k.table != "ITEM":
                log(i, "R", k.table, k.key, row)
        elif isinstance(k, SelectCustomerByLastName):
            names = p.customer_names.get((k.w_id, k.d_id), ())
            outputs[idx] = storage.customers_by_last_name(names, k.last_name)
            us += costs.scan_row * len(names)
        else:
            key = storage.apply_write(p, k, e)
            us += costs.update if isinstance(k, UpdateRecord) else costs.insert
            if log is not None:
                log(i, "W", k.table, key, None)
    return us


class AnyComponent:
    """One AC: queues, pending events, stream buffers and reorder lanes."""

    def __init__(self, ac_id, partition=None, queue_capacity=0, costs: CostModel = DEFAULT_COSTS,
                 batch_capacity=DEFAULT_BATCH_CAPACITY, log_history=True, fuse_local=True):
        if not isinstance(ac_id, AcId):
            ac_id = AcId(ac_id, "storage" if partition is not None else "compute",
                         None if partition is None else partition.partition_id)
        self.ac = ac_id
        self.id = ac_id.id
        self.partition = partition
        self.costs = costs
        self.batch_capacity = batch_capacity
        self.log_history = log_history
        self.fuse_local = fuse_local and partition is not None
        self.wake = threading.Event()
        self.event_queue = BoundedQueue(queue_capacity, on_put=self.wake.set)
        self.data_queue = BoundedQueue(queue_capacity, on_put=self.wake.set)
        self.pending = []
        self.streams = {}
        self.stream_refs = Counter()
        self.reorder = {}
        self.next_expected = defaultdict(int)
        self.outbox = []
        self.now = 0.0
        self.busy_us = 0.0
        self.trackers = {}
        self.joins = {}
        self.op_state = {}
        self.history = []
        self._forward = {}
        self._local_order = itertools.count()
        self.executed_total = 0
        self.more = False
        self._lanes_first = True
        self._slice_end = None
        self.messages_in = 0
        self.messages_out = 0

    def __repr__(self):
        return f"AC({self.id}, {self.ac.role}{'' if self.partition is None else f':{self.partition.partition_id}'})"

    @property
    def is_storage(self) -> bool:
        return self.partition is not None

    # --- input ---------------------------------------------------------------

    def charge(self, us: float) -> None:
        self.now += us
        self.busy_us += us

    def deliver(self, item) -> None:
        """Receive one message straight from a channel (virtual executor)."""
        self.charge(self.costs.recv)
        self.messages_in += 1
        self._accept_item(item)

    def _accept_item(self, item):
        if isinstance(item, DataBatch):
            self.accept_batch(item)
        elif isinstance(item, Event):
            self._accept(item)
        else:
            if self.fuse_local:
                f = self._fusable(item)
                if f is not None:
                    if f.lane_seq is None:
                        self.pending.append(f)
                    else:
                        heapq.heappush(self.reorder.setdefault(f.conflict_class, []),
                                       (f.lane_seq, f.event_id, f))
                    return
            for e in item:
                self._accept(e)

    def drain(self) -> int:
        n = 0
        for q in (self.data_queue, self.event_queue):
            for item in q.drain():
                n += 1
                self._accept_item(item)
        if n:
            self.charge(self.costs.recv * n)
            self.messages_in += n
        return n

    def _fusable(self, bundle) -> Optional[Fused]:
        me = self.id
        first = bundle[0]
        txn, commit_ac = first.txn_id, first.commit_ac
        if commit_ac is None:
            return None
        produced, needed, external = set(), set(), []
        laned = []
        writes = 0
        commit = None
        for e in bundle:
            k = e.kind
            if e.txn_id != txn or e.commit_ac != commit_ac or e.input_streams \
                    or any(t != me for t in e.output_targets):
                return None
            for sid in e.required_streams:
                if sid.origin_ac == me and sid.tag in produced:
                    needed.add(sid)
                else:
                    external.append(sid)
            if isinstance(k, Commit):
                if commit_ac != me:
                    return None
                commit = k
            elif isinstance(k, SelectCustomerByLastName):
                if k.w_id != self.partition.partition_id:
                    return None
            elif isinstance(k, (ReadRecord, UpdateRecord, InsertRecord)):
                if e.storage_ac != me:
                    return None
                writes += not isinstance(k, ReadRecord)
                if e.lane_seq is not None:
                    if laned and (e.conflict_class != laned[0].conflict_class
                                  or e.lane_seq != laned[-1].lane_seq + 1):
                        return None
                    laned.append(e)
            else:
                return None
            if e.output_stream is not None:
                produced.add(e.op_index)
        # every output must be consumed inside the bundle
        if any(e.output_stream is not None and e.output_stream not in needed for e in bundle):
            return None
        if commit is not None and commit.expected_ack_count != writes:
            return None
        if commit is None and not writes:
            return None
        for sid in external:
            self.stream_refs[sid] += 1
        return Fused(tuple(bundle), laned, tuple(external), commit is not None)

    def _execute_fused(self, f: Fused) -> None:
        log = None
        events = f.events
        if self.log_history:
            def log(i, kind, table, key, value):
                e = events[i]
                self.history.append(HistoryRecord(e.txn_id, e.global_seq, e.op_index, kind, table,
                                                  key, value, self.id, next(self._local_order)))
        inputs = {sid.tag: self.streams[sid].rows() for sid in f.external}
        self.charge(self.costs.event)
        self.charge(execute_aggregated(self.partition, [e.kind for e in events], self.costs,
                                       events, log, inputs))
        for sid in f.external:
            self._drop_ref(sid)
        if f.has_commit:
            self.notify("commit", f.txn_id, self.now)
            return
        writes = [e for e in events if isinstance(e.kind, (UpdateRecord, InsertRecord))]
        ack = storage.make_ack(writes[0])
        ack = replace(ack, kind=Ack(writes[0].op_index, "ok", tuple(w.op_index for w in writes[1:])))
        if f.commit_ac == self.id:
            self._local_ack(ack)
        else:
            self.send(f.commit_ac, ack)

    def accept_events(self, events) -> None:
        for e in events:
            self._accept(e)

    def _accept(self, e: Event) -> None:
        for sid in e.required_streams:
            self.stream_refs[sid] += 1
        for sid in e.input_streams:
            self.stream_refs[sid] += 1
        if e.lane_seq is not None and e.storage_ac == self.id and self.partition is not None:
            heapq.heappush(self.reorder.setdefault(e.conflict_class, []), (e.lane_seq, e.event_id, e))
        else:
            self.pending.append(e)

    def accept_batch(self, b: DataBatch) -> None:
        buf = self.streams.get(b.stream_id)
        if buf is None:
            buf = self.streams[b.stream_id] = StreamBuffer()
        if buf.complete or b.batch_seq != len(buf.batches):
            raise AssertionError(f"stream framing violated on {b.stream_id}: got seq {b.batch_seq}")
        buf.batches.append(b)
        if b.last:
            buf.complete = True

    # --- scheduling ----------------------------------------------------------

    def _runnable(self, e: Event) -> bool:
        if type(e) is Fused:
            for sid in e.external:
                buf = self.streams.get(sid)
                if buf is None or not buf.complete:
                    return False
            return True
        streams = self.streams
        for sid in e.required_streams:
            buf = streams.get(sid)
            if buf is None or not buf.complete:
                return False
        kind = e.kind
        if isinstance(kind, JoinProbe) and (e.txn_id, kind.join_id) not in self.joins:
            return False
        if e.input_streams:
            st = self.op_state.get(e.event_id)
            for sid in e.input_streams:
                buf = streams.get(sid)
                if buf is None:
                    continue
                seen = 0 if st is None else st.consumed[sid]
                if len(buf.batches) > seen:
                    return True
            return False
        return True

    def ac_step(self, time_slice: Optional[float] = None) -> Progress:
        """Drain the queues and run every runnable event; never waits.

        With ``time_slice`` no new event starts once the step has charged
        that many µs; :attr:`more` then tells whether work was left over.
        Lanes and pending events take turns going first, so a busy lane
        cannot starve stream-driven work and vice versa.
        """
        self.drain()
        self._slice_end = None if time_slice is None else self.now + time_slice
        self.more = False
        first, second = (self._run_lanes, self._run_pending) if self._lanes_first else \
            (self._run_pending, self._run_lanes)
        if time_slice is not None:
            self._lanes_first = not self._lanes_first
        executed = 0
        while not self.more:
            n = first()
            if not self.more:
                n += second()
            executed += n
            if not n:
                break
        if self._forward:
            fwd, self._forward = self._forward, {}
            for (target, _), evs in fwd.items():
                self.send(target, evs[0] if len(evs) == 1 else tuple(evs))
        self.executed_total += executed
        deferred = len(self.pending) + sum(len(h) for h in self.reorder.values())
        return Progress(executed, deferred)

    def _out_of_time(self) -> bool:
        if self._slice_end is not None and self.now >= self._slice_end:
            self.more = True
        return self.more

    def _run_lanes(self) -> int:
        executed = 0
        for cls, heap in self.reorder.items():
            nxt = self.next_expected[cls]
            while heap and heap[0][0] == nxt:
                if self._out_of_time():
                    return executed
                e = heap[0][2]
                if not self._runnable(e):
                    break
                heapq.heappop(heap)
                if type(e) is Fused:
                    nxt = e.lane_end + 1
                    self.next_expected[cls] = nxt
                    self._execute_fused(e)
                else:
                    nxt += 1
                    self.next_expected[cls] = nxt
                    self._execute(e)
                executed += 1
        return executed

    def _run_pending(self) -> int:
        if not self.pending:
            return 0
        executed = 0
        waiting, self.pending = self.pending, []
        keep = []
        for n, e in enumerate(waiting):
            if self._out_of_time():
                keep.extend(waiting[n:])
                break
            if self._runnable(e):
                executed += 1
                if not self._execute(e):
                    keep.append(e)
            else:
                keep.append(e)
        self.pending = keep + self.pending
        return executed

    def idle(self) -> bool:
        return (not self.pending and not any(self.reorder.values()) and not self.trackers
                and self.event_queue.empty() and self.data_queue.empty())

    def residual_state(self) -> dict:
        """Non-empty entries indicate state left behind by finished work."""
        return {
            "pending": len(self.pending),
            "reorder": sum(len(h) for h in self.reorder.values()),
            "streams": len(self.streams),
            "trackers": len(self.trackers),
            "joins": len(self.joins),
            "op_state": len(self.op_state),
        }

    # --- output --------------------------------------------------------------

    def send(self, target: int, item) -> None:
        if target == self.id:
            self._accept_item(item)
            return
        if target != DRIVER:
            self.charge(self.costs.send)
            self.messages_out += 1
        self.outbox.append((target, item, self.now))

    def _emit(self, e: Event, rows, last: bool, st: Optional[_OpState] = None) -> None:
        if e.output_stream is None:
            return
        if st is None:
            batches = batch_split(rows, self.batch_capacity, e.output_stream)
        else:
            batches = []
            rows = list(rows)
            if rows or last:
                chunks = [rows[i:i + self.batch_capacity] for i in range(0, len(rows), self.batch_capacity)] or [[]]
                for j, chunk in enumerate(chunks):
                    batches.append(DataBatch(e.output_stream, st.out_seq, tuple(chunk),
                                             last and j == len(chunks) - 1))
                    st.out_seq += 1
        self.charge(self.costs.batch * len(batches))
        for t in e.output_targets:
            for b in batches:
                self.send(t, b)

    def notify(self, *msg) -> None:
        self.outbox.append((DRIVER, msg, self.now))

    # --- execution -----------------------------------------------------------

    def _drop_ref(self, sid) -> None:
        self.stream_refs[sid] -= 1
        if self.stream_refs[sid] <= 0:
            del self.stream_refs[sid]
            buf = self.streams.get(sid)
            if buf is not None and buf.complete:
                del self.streams[sid]

    def _release(self, e: Event) -> None:
        for sid in e.required_streams + e.input_streams:
            self._drop_ref(sid)

    def _execute(self, e: Event) -> bool:
        if type(e) is Fused:
            self._execute_fused(e)
            return True
        self.charge(self.costs.event)
        done = _HANDLERS[type(e.kind)](self, e)
        if done is None or done:
            self._release(e)
            return True
        return False

    def _lookup(self, e: Event):
        def lookup(ref):
            for sid in e.required_streams:
                if sid.tag == ref.op_index:
                    return pick_row(self.streams[sid].rows(), ref.pick)[ref.column] * ref.scale
            raise LookupError(f"no stream for op {ref.op_index} on event {e.event_id}")
        return lookup

    def _log(self, e: Event, kind: str, table: str, key: tuple, value=None) -> None:
        if self.log_history:
            self.history.append(HistoryRecord(e.txn_id, e.global_seq, e.op_index, kind, table, key,
                                              value, self.id, next(self._local_order)))

    def _on_record(self, e: Event):
        kind = e.kind
        if has_refs(kind):
            kind = resolve(kind, self._lookup(e))
        if e.storage_ac is not None and e.storage_ac != self.id:
            # coalesced per (storage AC, txn) and flushed at the end of the step
            self._forward.setdefault((e.storage_ac, e.txn_id), []).append(
                replace(e, kind=kind, required_streams=()))
            return
        if kind is not e.kind:
            e = replace(e, kind=kind)
        p = self.partition
        c = self.costs
        if isinstance(kind, ReadRecord):
            b = storage.read_record(p, e)
            self.charge(c.read)
            if kind.table != "ITEM":
                self._log(e, "R", kind.table, kind.key, b.rows[0])
            if e.output_targets and e.output_stream is not None:
                self.charge(c.batch)
                for t in e.output_targets:
                    self.send(t, b)
            return
        ack = storage.apply_update(p, e)
        if isinstance(kind, UpdateRecord):
            self.charge(c.update)
            self._log(e, "W", kind.table, kind.key)
        else:
            self.charge(c.insert)
            self._log(e, "W", kind.table, storage.key_of(kind.table, dict(kind.record)))
        if e.commit_ac == self.id:
            self._local_ack(ack)
        elif e.commit_ac is not None:
            self.send(e.commit_ac, ack)

    def _local_ack(self, ack: Event) -> None:
        """Ack produced on the commit AC itself: no message, straight into the tracker."""
        t = self._tracker(ack.txn_id)
        self.charge(self.costs.ack)
        if on_ack(t, ack, self.now) == "committed":
            self._committed(t)

    def _on_select(self, e: Event):
        k = e.kind
        if e.required_streams:
            names = self.streams[e.required_streams[0]].rows()
        else:
            storage._check_partition(self.partition, "CUSTOMER", k.w_id)
            names = self.partition.customer_names.get((k.w_id, k.d_id), ())
        matches = storage.customers_by_last_name(names, k.last_name)
        self.charge(self.costs.scan_row * len(names))
        self._emit(e, matches, True)

    def _on_beam(self, e: Event):
        k = e.kind
        rows, examined = storage.scan_rows(self.partition, k.table, k.predicate, k.projection)
        batches = batch_split(rows, self.batch_capacity, k.stream_id)
        self.charge(self.costs.scan_row * examined)
        self.charge(self.costs.batch * len(batches))
        for b in batches:
            self.send(k.target_ac, b)

    def _stream_inputs(self, e: Event, st: _OpState) -> list:
        rows = []
        for sid in e.input_streams:
            buf = self.streams.get(sid)
            if buf is None:
                continue
            start = st.consumed[sid]
            for b in buf.batches[start:]:
                rows.extend(b.rows)
            st.consumed[sid] = len(buf.batches)
        return rows

    def _inputs_done(self, e: Event, st: _OpState) -> bool:
        for sid in e.input_streams:
            buf = self.streams.get(sid)
            if buf is None or not buf.complete or st.consumed[sid] != len(buf.batches):
                return False
        return True

    def _op_state(self, e: Event) -> _OpState:
        st = self.op_state.get(e.event_id)
        if st is None:
            st = self.op_state[e.event_id] = _OpState(e.input_streams)
            st.started = self.now
        return st

    def _on_scan(self, e: Event):
        k = e.kind
        if not e.input_streams:
            rows, examined = storage.scan_rows(self.partition, k.table, k.predicate, k.projection)
            self.charge(self.costs.scan_row * examined)
            self._emit(e, rows, True)
            return
        st = self._op_state(e)
        rows = self._stream_inputs(e, st)
        pred, proj = k.predicate, k.projection
        out = [project(r, proj) for r in rows if pred(r)]
        self.charge(self.costs.scan_row * len(rows))
        done = self._inputs_done(e, st)
        self._emit(e, out, done, st)
        if done:
            del self.op_state[e.event_id]
        return done

    def _on_build(self, e: Event):
        k = e.kind
        table = {}
        n = 0
        cols = k.key_column
        for sid in e.required_streams:
            for r in self.streams[sid].rows():
                table.setdefault(tuple(r[c] for c in cols), []).append(r)
                n += 1
        self.charge(self.costs.build_row * n)
        self.joins[(e.txn_id, k.join_id)] = JoinState(k.join_id, table, True, n)
        self.notify("mark", e.txn_id, "build", k.join_id, self.now)

    def _on_probe(self, e: Event):
        k = e.kind
        js = self.joins.get((e.txn_id, k.join_id))
        if js is None or not js.build_complete:
            raise BuildIncomplete(f"probe of join {k.join_id} before build completed")
        st = self._op_state(e)
        rows = self._stream_inputs(e, st)
        table, cols, proj = js.table, k.key_column, k.projection
        out = []
        for r in rows:
            for b in table.get(tuple(r[c] for c in cols), ()):
                m = {**b, **r}
                out.append(m if proj is None else {c: m[c] for c in proj})
        self.charge(self.costs.probe_row * len(rows) + self.costs.out_row * len(out))
        done = self._inputs_done(e, st)
        self._emit(e, out, done, st)
        if done:
            del self.op_state[e.event_id]
            del self.joins[(e.txn_id, k.join_id)]
            self.notify("mark", e.txn_id, "probe", k.join_id, self.now)
        return done

    def _on_aggregate(self, e: Event):
        k = e.kind
        st = self._op_state(e)
        if st.acc is None:
            st.acc = {}
        acc = st.acc
        rows = self._stream_inputs(e, st)
        gcols = k.group_cols
        specs = k.agg_spec
        for r in rows:
            g = tuple(r[c] for c in gcols)
            cur = acc.get(g)
            if cur is None:
                cur = acc[g] = [0] * len(specs)
            for i, (_, fn, col) in enumerate(specs):
                cur[i] += r[col] if fn == "sum" else 1
        self.charge(self.costs.agg_row * len(rows))
        if not self._inputs_done(e, st):
            return False
        del self.op_state[e.event_id]
        out = [dict(zip(gcols, g), **{s[0]: v for s, v in zip(specs, vals)}) for g, vals in acc.items()]
        for col, desc in reversed(k.order_by):
            out.sort(key=lambda r, c=col: r[c], reverse=desc)
        if e.output_targets:
            self._emit(e, out, True)
        else:
            self.notify("result", e.txn_id, out, self.now)
        return True

    def _tracker(self, txn_id) -> CommitTracker:
        t = self.trackers.get(txn_id)
        if t is None:
            t = self.trackers[txn_id] = CommitTracker(txn_id)
        return t

    def _on_commit(self, e: Event):
        k = e.kind
        t = self._tracker(e.txn_id)
        self.charge(self.costs.commit)
        if t.expect(k.expected_ack_count, k.write_ops or None, self.now) == "committed":
            self._committed(t)

    def _on_ack(self, e: Event):
        t = self._tracker(e.txn_id)
        self.charge(self.costs.ack)
        if on_ack(t, e, self.now) == "committed":
            self._committed(t)

    def _committed(self, t: CommitTracker) -> None:
        del self.trackers[t.txn_id]
        self.notify("commit", t.txn_id, self.now)

    def _on_compile(self, e: Event):
        self.notify("compiled", e.txn_id, self.now)


_HANDLERS = {
    ReadRecord: AnyComponent._on_record,
    UpdateRecord: AnyComponent._on_record,
    InsertRecord: AnyComponent._on_record,
    SelectCustomerByLastName: AnyComponent._on_select,
    BeamInit: AnyComponent._on_beam,
    ScanFilter: AnyComponent._on_scan,
    JoinBuild: AnyComponent._on_build,
    JoinProbe: AnyComponent._on_probe,
    Aggregate: AnyComponent._on_aggregate,
    Commit: AnyComponent._on_commit,
    Ack: AnyComponent._on_ack,
    CompileQuery: AnyComponent._on_compile,
}


def ac_step(s: AnyComponent) -> Progress:
    return s.ac_step()


# --- topology ------------------------------------------------------------------


class Topology:
    """A set of ACs: one storage AC per partition plus stateless compute ACs."""

    def __init__(self, partitions: dict, compute: int = 0, queue_capacity: int = 0,
                 injected_latency_us: float = 0.0, costs: CostModel = DEFAULT_COSTS,
                 batch_capacity: int = DEFAULT_BATCH_CAPACITY, pin_to_cores: bool = False,
                 log_history: bool = True, fuse_local: bool = True):
        self.acs = {}
        self.storage_of = {}
        self.queue_capacity = queue_capacity
        self.injected_latency_us = injected_latency_us
        self.costs = costs
        self.batch_capacity = batch_capacity
        self.pin_to_cores = pin_to_cores
        self.log_history = log_history
        self.fuse_local = fuse_local
        self.partitions = partitions
        for pid in sorted(partitions):
            ac = self._new_ac(partitions[pid])
            self.storage_of[pid] = ac.id
        self._add(compute)

    def _new_ac(self, partition=None) -> AnyComponent:
        aid = len(self.acs)
        role = AcId(aid, "storage" if partition is not None else "compute",
                    None if partition is None else partition.partition_id)
        ac = AnyComponent(role, partition, self.queue_capacity, self.costs, self.batch_capacity,
                          self.log_history, self.fuse_local)
        self.acs[aid] = ac
        return ac

    def _add(self, n):
        return [self._new_ac().id for _ in range(n)]

    @property
    def compute_ids(self) -> list:
        return [a for a, ac in self.acs.items() if ac.partition is None]

    @property
    def storage_ids(self) -> list:
        return [self.storage_of[p] for p in sorted(self.storage_of)]

    def __contains__(self, ac_id):
        return ac_id in self.acs

    def quiesced(self) -> bool:
        return all(ac.idle() for ac in self.acs.values())

    def add_acs(self, n: int, role: str = "compute") -> list:
        if role != "compute":
            raise ValueError("only compute ACs can be added; storage is fixed by partitioning")
        if not self.quiesced():
            raise InvalidPhaseState("cannot add ACs while events are in flight")
        return self._add(n)

    def history(self) -> list:
        out = []
        for ac in self.acs.values():
            out.extend(ac.history)
        return out

    def clear_history(self):
        for ac in self.acs.values():
            ac.history.clear()

    def reset_clocks(self, t: float = 0.0):
        for ac in self.acs.values():
            ac.now = t
            ac.busy_us = 0.0

    def enqueue_event(self, target: int, e, timeout=None) -> None:
        if target not in self.acs:
            raise UnknownAc(target)
        self.acs[target].event_queue.put(e, timeout=timeout)

    def enqueue_data(self, target: int, b: DataBatch, timeout=None) -> None:
        if target not in self.acs:
            raise UnknownAc(target)
        self.acs[target].data_queue.put(b, timeout=timeout)


def enqueue_event(topology: Topology, target: int, e) -> None:
    topology.enqueue_event(target, e)


def enqueue_data(topology: Topology, target: int, b: DataBatch) -> None:
    topology.enqueue_data(target, b)


def add_acs(topology: Topology, n: int, role: str = "compute") -> Topology:
    topology.add_acs(n, role)
    return topology


# --- executors -------------------------------------------------------------------


class VirtualExecutor:
    """Deterministic discrete-event execution of a topology.

    Messages carry arrival times; an AC processes whatever has arrived by
    its current clock, and the AC with the earliest possible start goes
    next. Data batches crossing ACs occupy their link for the topology's
    injected latency, so a stream's transfer time grows with its batch
    count.
    """

    def __init__(self, topology: Topology, time_slice: float = 10.0):
        self.topology = topology
        self.time_slice = time_slice
        self.ready = set()
        self.inbox = defaultdict(list)
        self.link_free = {}
        self._tie = itertools.count()
        self.transfer_us = defaultdict(float)
        self.last_arrival = {}

    def post(self, src: int, dst: int, item, t: float) -> None:
        if dst not in self.topology.acs:
            raise UnknownAc(dst)
        lat = self.topology.injected_latency_us
        if lat and isinstance(item, DataBatch) and src != dst:
            start = max(t, self.link_free.get((src, dst), 0.0))
            t = start + lat
            self.link_free[(src, dst)] = t
            self.transfer_us[item.stream_id] += lat
        if isinstance(item, DataBatch):
            self.last_arrival[item.stream_id] = t
        heapq.heappush(self.inbox[dst], (t, next(self._tie), item))

    def _route(self, ac: AnyComponent, driver) -> None:
        out, ac.outbox = ac.outbox, []
        for dst, item, t in out:
            if dst == DRIVER:
                if driver is not None:
                    driver.notify(item, self)
            else:
                self.post(ac.id, dst, item, t)

    def run(self, driver=None, until: Optional[float] = None) -> float:
        """Run until no message is left; returns the final virtual time."""
        acs = self.topology.acs
        inbox = self.inbox
        ready = self.ready
        if driver is not None:
            driver.start(self)
        end = 0.0
        while True:
            best_t, best = None, None
            for aid, ac in acs.items():
                heap = inbox.get(aid)
                if aid in ready:
                    t = ac.now
                elif heap:
                    t = heap[0][0] if heap[0][0] > ac.now else ac.now
                else:
                    continue
                if best_t is None or t < best_t:
                    best_t, best = t, aid
            if best is None or (until is not None and best_t > until):
                break
            ac = acs[best]
            ac.now = best_t
            heap = inbox[best]
            while heap and heap[0][0] <= ac.now:
                ac.deliver(heapq.heappop(heap)[2])
            ac.ac_step(self.time_slice)
            if ac.more:
                ready.add(best)
            else:
                ready.discard(best)
            if ac.now > end:
                end = ac.now
            self._route(ac, driver)
        return end

    def now(self) -> float:
        return max((ac.now for ac in self.topology.acs.values()), default=0.0)


class ThreadedExecutor:
    """One OS thread per AC; queues are the only shared structures."""

    def __init__(self, topology: Topology, put_timeout: float = 0.001):
        self.topology = topology
        self.put_timeout = put_timeout
        self.driver_inbox = BoundedQueue(0)
        self._threads = []
        self._stop = threading.Event()
        self._t0 = time.perf_counter()
        self.errors = []
        self.stalls = Counter()

    def clock(self) -> float:
        return (time.perf_counter() - self._t0) * 1e6

    def post(self, src: int, dst: int, item, t=None, owner: Optional[AnyComponent] = None) -> None:
        acs = self.topology.acs
        if dst not in acs:
            raise UnknownAc(dst)
        target = acs[dst]
        q = target.data_queue if isinstance(item, DataBatch) else target.event_queue
        while True:
            try:
                q.put(item, timeout=self.put_timeout)
                return
            except Full:
                self.stalls[src] += 1
                # keep our own inputs flowing so two full peers cannot deadlock
                if owner is not None:
                    owner.drain()
                if self._stop.is_set():
                    raise QueueDisconnected("executor stopping")

    def post_later(self, delay_us: float, src: int, dst: int, item) -> None:
        timer = threading.Timer(delay_us / 1e6, self.post, args=(src, dst, item))
        timer.daemon = True
        timer.start()

    def _route(self, ac: AnyComponent) -> None:
        out, ac.outbox = ac.outbox, []
        for dst, item, _ in out:
            if dst == DRIVER:
                self.driver_inbox.put(item)
            else:
                self.post(ac.id, dst, item, owner=ac)

    def _loop(self, ac: AnyComponent, core: Optional[int]) -> None:
        if core is not None and hasattr(os, "sched_setaffinity"):
            try:
                os.sched_setaffinity(0, {core})
            except OSError:
                logger.warning("could not pin AC %d to core %d", ac.id, core)
        try:
            while not self._stop.is_set():
                ac.wake.clear()
                ac.now = self.clock()
                p = ac.ac_step()
                self._route(ac)
                if p.events_executed == 0:
                    ac.wake.wait(0.02)
        except QueueDisconnected:
            logger.info("AC %d: peer disconnected, stopping", ac.id)
        except Exception as exc:  # surfaced to the driver via .errors
            logger.exception("AC %d failed", ac.id)
            self.errors.append((ac.id, exc))
            self.driver_inbox.put(("error", ac.id, repr(exc)))

    def start(self) -> None:
        cores = sorted(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else [0]
        for i, ac in enumerate(self.topology.acs.values()):
            core = cores[i % len(cores)] if self.topology.pin_to_cores else None
            th = threading.Thread(target=self._loop, args=(ac, core), name=f"ac-{ac.id}", daemon=True)
            self._threads.append(th)
            th.start()

    def stop(self) -> None:
        self._stop.set()
        for ac in self.topology.acs.values():
            ac.event_queue.close()
            ac.data_queue.close()
            ac.wake.set()
        for th in self._threads:
            th.join(timeout=5)
        self._threads.clear()
        # reopen so the topology can be driven again
        for ac in self.topology.acs.values():
            ac.event_queue = BoundedQueue(self.topology.queue_capacity, on_put=ac.wake.set)
            ac.data_queue = BoundedQueue(self.topology.queue_capacity, on_put=ac.wake.set)
