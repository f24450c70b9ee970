"""Workload generation, phased benchmark runs and metrics."""
from __future__ import annotations

import configparser
import csv
import heapq
import logging
import math
import random
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Optional

from . import datagen, olap
from .costs import DEFAULT_COSTS, CostModel
from .errors import ConfigError, InvariantViolation
from .events import SelectCustomerByLastName
from .routing import Router, RoutingPolicy, Sequencer
from .storage import money_conserved, money_totals, record_partition
from .runtime import DRIVER, ThreadedExecutor, Topology, VirtualExecutor, execute_aggregated
from .txn import check_serializable, merged_tables, neworder_program, payment_program, state_hash

logger = logging.getLogger(__name__)

WARMUP_FRACTION = 0.1
BY_NAME_FRACTION = 0.6
BASELINE = "baseline"


# --- workload ------------------------------------------------------------------


class Workload:
    """Parameter domains and id counters for generated transactions."""

    def __init__(self, dataset: datagen.Dataset, by_name_fraction: float = BY_NAME_FRACTION,
                 remote_fraction: float = 0.0):
        cfg = dataset.config
        self.dataset = dataset
        self.warehouses = cfg.warehouses
        self.districts = cfg.districts
        self.customers = cfg.customers
        self.items = cfg.items
        self.by_name_fraction = by_name_fraction
        self.remote_fraction = remote_fraction
        self.next_h = {w: 1 for w in range(cfg.warehouses)}
        self.next_o = {}
        self._orders = cfg.orders

    def home(self, skew: float, rng: random.Random) -> int:
        if rng.random() < skew:
            return 0
        return rng.randrange(self.warehouses)

    def payment(self, w: int, rng: random.Random):
        d = rng.randint(1, self.districts)
        c_w, c_d = w, d
        if self.warehouses > 1 and rng.random() < self.remote_fraction:
            c_w = rng.choice([x for x in range(self.warehouses) if x != w])
            c_d = rng.randint(1, self.districts)
        c_id = rng.randint(1, self.customers)
        if rng.random() < self.by_name_fraction:
            customer = self.dataset.last_names(c_w, c_d)[c_id - 1]
        else:
            customer = c_id
        h_id = self.next_h[w]
        self.next_h[w] += 1
        return payment_program(w, d, c_w, c_d, customer, rng.randint(100, 500000), h_id=h_id)

    def neworder(self, w: int, rng: random.Random):
        d = rng.randint(1, self.districts)
        n = rng.randint(5, 15)
        items = rng.sample(range(1, self.items + 1), n)
        qtys = [rng.randint(1, 10) for _ in items]
        o_id = self.next_o.get((w, d), self._orders + 1)
        self.next_o[(w, d)] = o_id + 1
        return neworder_program(w, d, rng.randint(1, self.customers), items, qtys, o_id=o_id)


def gen_txn(mix: dict, skew: float, rng: random.Random, workload: Optional[Workload] = None):
    """Draw one program: home warehouse 0 with probability ``skew``, else uniform."""
    if workload is None:
        workload = Workload(datagen.cached_dataset(datagen.PROFILES["test"]))
    w = workload.home(skew, rng)
    if rng.random() * 100 < mix.get("payment", 0):
        return workload.payment(w, rng)
    return workload.neworder(w, rng)


# --- configuration -------------------------------------------------------------------


@dataclass(frozen=True)
class PhaseConfig:
    name: str
    txns: int = 1000
    mix: tuple = (("payment", 100), ("neworder", 0))
    olap: bool = False
    skew: float = 0.0
    policy: str = "shared_nothing"
    add_acs: int = 0
    # compute ACs the OLTP router may use; None means all present
    oltp_compute: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.skew <= 1.0:
            raise ConfigError(f"phase {self.name}: skew {self.skew} outside [0, 1]")
        if sum(v for _, v in self.mix) != 100:
            raise ConfigError(f"phase {self.name}: mix must sum to 100, got {dict(self.mix)}")
        if self.txns < 0 or self.add_acs < 0:
            raise ConfigError(f"phase {self.name}: counts must be non-negative")
        if self.policy != BASELINE:
            try:
                RoutingPolicy.parse(self.policy)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None

    @property
    def mix_dict(self) -> dict:
        return dict(self.mix)


@dataclass(frozen=True)
class GlobalConfig:
    profile: str = "test"
    seed: int = 0
    repeat: int = 3
    ac_count: int = 4
    queue_capacity: int = 0
    injected_latency_us: float = 0.0
    pin_to_cores: bool = False
    clients: int = 32
    compile_ms: float = 30.0
    olap_policy: str = "disaggregated"
    # OLAP on freshly added compute ACs only (True) or on the OLTP ones
    olap_isolated: bool = True
    by_name_fraction: float = BY_NAME_FRACTION
    remote_fraction: float = 0.0
    costs: CostModel = DEFAULT_COSTS

    def scale(self) -> datagen.ScaleConfig:
        try:
            base = datagen.PROFILES[self.profile]
        except KeyError:
            raise ConfigError(f"unknown profile {self.profile!r}") from None
        return replace(base, seed=self.seed)


_GLOBAL_TYPES = {"profile": str, "seed": int, "repeat": int, "ac_count": int, "queue_capacity": int,
                 "injected_latency_us": float, "pin_to_cores": bool, "clients": int,
                 "compile_ms": float, "olap_policy": str, "olap_isolated": bool,
                 "by_name_fraction": float, "remote_fraction": float}


def parse_config(text: str) -> tuple:
    """Parse the INI-style run description; returns (GlobalConfig, [PhaseConfig])."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    kw = {}
    if cp.has_section("global"):
        sec = cp["global"]
        for key in sec:
            typ = _GLOBAL_TYPES.get(key)
            if typ is None:
                raise ConfigError(f"unknown global key {key!r}")
            kw[key] = sec.getboolean(key) if typ is bool else typ(sec[key])
    phases = []
    for name in cp.sections():
        if not name.startswith("phase "):
            if name != "global":
                raise ConfigError(f"unknown section [{name}]")
            continue
        sec = cp[name]
        known = {"txns", "payment", "neworder", "olap", "skew", "policy", "add_acs", "oltp_compute"}
        extra = set(sec) - known
        if extra:
            raise ConfigError(f"[{name}]: unknown keys {sorted(extra)}")
        pay = sec.getint("payment", 100)
        phases.append(PhaseConfig(
            name=name[len("phase "):].strip(),
            txns=sec.getint("txns", 1000),
            mix=(("payment", pay), ("neworder", sec.getint("neworder", 100 - pay))),
            olap=sec.getboolean("olap", False),
            skew=sec.getfloat("skew", 0.0),
            policy=sec.get("policy", "shared_nothing"),
            add_acs=sec.getint("add_acs", 0),
            oltp_compute=sec.getint("oltp_compute") if "oltp_compute" in sec else None,
        ))
    if not phases:
        raise ConfigError("config defines no [phase ...] sections")
    return GlobalConfig(**kw), phases


def load_config(path) -> tuple:
    with open(path) as f:
        return parse_config(f.read())


# --- metrics ---------------------------------------------------------------------------


@dataclass
class PhaseMetrics:
    phase: str
    policy: str
    throughput: float
    p50_us: float
    p99_us: float
    olap_us: Optional[float]
    acs_used: int
    committed: int
    admitted: int
    utilization: dict = field(default_factory=dict)
    throughput_min: Optional[float] = None
    throughput_max: Optional[float] = None
    state_hash: str = ""

    @property
    def throughput_per_ac(self) -> float:
        return self.throughput / self.acs_used if self.acs_used else 0.0


def _percentile(values, q) -> float:
    if not values:
        return 0.0
    s = sorted(values)
    return s[min(len(s) - 1, max(0, math.ceil(q * len(s)) - 1))]


def _throughput(commits: list, warmup: float) -> tuple:
    """commits: [(t_commit, latency)] in commit order. Returns (tx/s, steady latencies)."""
    if not commits:
        return 0.0, []
    commits = sorted(commits)
    skip = int(len(commits) * warmup)
    t0 = commits[skip - 1][0] if skip else 0.0
    steady = commits[skip:]
    span = steady[-1][0] - t0
    tput = len(steady) / span * 1e6 if span > 0 else 0.0
    return tput, [lat for _, lat in steady]


# --- drivers -------------------------------------------------------------------------------


class OltpDriver:
    """Closed-loop clients over a virtual-time topology.

    Every client keeps one transaction in flight and submits its next one
    the moment the previous commit is reported. Optionally hosts a query
    driver that restarts the analytical query until the OLTP work is done.
    """

    def __init__(self, router: Router, programs: list, clients: int, first_txn_id: int = 1,
                 query_factory=None):
        self.router = router
        self.programs = programs
        self.clients = max(1, clients)
        self.next = 0
        self.first_txn_id = first_txn_id
        self.admitted_at = {}
        self.commits = []
        self.seq_of = {}
        self.query_factory = query_factory
        self.queries = []
        self.query = None

    def _admit(self, ex, t):
        prog = self.programs[self.next]
        txn_id = self.first_txn_id + self.next
        self.next += 1
        _, msgs = self.router.route(prog, txn_id)
        self.seq_of[txn_id] = self.router.sequencer.counter
        self.admitted_at[txn_id] = t
        for target, payload in msgs:
            ex.post(DRIVER, target, payload, t)

    def _start_query(self, ex, t):
        self.query = self.query_factory(len(self.queries), t)
        self.queries.append(self.query)
        self.query.start(ex)

    def start(self, ex):
        for _ in range(min(self.clients, len(self.programs))):
            self._admit(ex, 0.0)
        if self.query_factory is not None:
            self._start_query(ex, 0.0)

    def notify(self, msg, ex):
        if msg[0] == "commit":
            txn_id, t = msg[1], msg[2]
            self.commits.append((t, t - self.admitted_at[txn_id]))
            if self.next < len(self.programs):
                self._admit(ex, t)
        elif self.query is not None and self.query.owns(msg):
            self.query.notify(msg, ex)
            if msg[0] == "result" and self.next < len(self.programs):
                self._start_query(ex, msg[3])
        elif msg[0] == "error":
            raise RuntimeError(f"AC {msg[1]} failed: {msg[2]}")

    @property
    def olap_times(self) -> list:
        return [q.done_at - q.admit_at for q in self.queries if q.done_at is not None]


def run_baseline(partitions: dict, programs: list, clients: int, costs: CostModel = DEFAULT_COSTS,
                 warmup: float = WARMUP_FRACTION) -> tuple:
    """Dedicated loop per partition executing whole programs directly.

    No events, routing or messages: the partition's own loop runs each
    program straight through. Returns (throughput, latencies, busy per partition).
    """
    clock = {p: 0.0 for p in partitions}
    busy = {p: 0.0 for p in partitions}
    heap = []
    seq = 0
    commits = []
    nxt = 0

    def submit(t):
        nonlocal nxt, seq
        prog = programs[nxt]
        nxt += 1
        for op in prog.ops:
            part = getattr(op, "w_id", None) if isinstance(op, SelectCustomerByLastName) else record_partition(op)
            if part is not None and part != prog.home_partition:
                raise ConfigError("the baseline loop runs single-partition transactions only")
        seq += 1
        heapq.heappush(heap, (t, seq, prog))

    for _ in range(min(clients, len(programs))):
        submit(0.0)
    while heap:
        t, _, prog = heapq.heappop(heap)
        p = prog.home_partition
        start = max(clock[p], t)
        cost = costs.direct_op + execute_aggregated(partitions[p], prog.ops, costs)
        clock[p] = start + cost
        busy[p] += cost
        commits.append((clock[p], clock[p] - t))
        if nxt < len(programs):
            submit(clock[p])
    tput, lats = _throughput(commits, warmup)
    return tput, lats, busy


def run_threaded(topology: Topology, router: Router, programs: list, first_txn_id: int = 1,
                 timeout_s: float = 60.0) -> list:
    """Submit all programs to a threaded topology and wait for every commit.

    Returns the committed txn ids in commit-notification order.
    """
    ex = ThreadedExecutor(topology)
    ex.start()
    committed = []
    try:
        for n, prog in enumerate(programs):
            _, msgs = router.route(prog, first_txn_id + n)
            for target, payload in msgs:
                ex.post(DRIVER, target, payload)
        deadline = time.monotonic() + timeout_s
        while len(committed) < len(programs):
            got = ex.driver_inbox.drain()
            for msg in got:
                if msg[0] == "commit":
                    committed.append(msg[1])
                elif msg[0] == "error":
                    raise InvariantViolation(f"AC {msg[1]} failed: {msg[2]}")
            if not got:
                if time.monotonic() > deadline:
                    raise InvariantViolation(f"only {len(committed)} of {len(programs)} committed in time")
                time.sleep(0.001)
    finally:
        ex.stop()
    return committed


# --- phased runs -------------------------------------------------------------------------


class PhaseRunner:
    """Runs a phase list against one evolving topology."""

    def __init__(self, gcfg: GlobalConfig, seed: Optional[int] = None, log_history: bool = False):
        self.g = gcfg
        self.seed = gcfg.seed if seed is None else seed
        self.dataset = datagen.cached_dataset(gcfg.scale())
        self.partitions = datagen.build_partitions(self.dataset)
        self.topology = Topology(self.partitions, compute=gcfg.ac_count, queue_capacity=gcfg.queue_capacity,
                                 injected_latency_us=gcfg.injected_latency_us, costs=gcfg.costs,
                                 pin_to_cores=gcfg.pin_to_cores, log_history=log_history)
        self.sequencer = Sequencer()
        self.workload = Workload(self.dataset, gcfg.by_name_fraction, gcfg.remote_fraction)
        self.rng = random.Random(self.seed)
        self.txn_base = 1
        self.olap_acs = []
        self.programs = []
        self.seq_programs = []
        self.last_driver = None

    def _oltp_pool(self, phase: PhaseConfig) -> list:
        pool = [a for a in self.topology.compute_ids if a not in self.olap_acs]
        if phase.oltp_compute is not None:
            pool = pool[:phase.oltp_compute]
        return pool

    def run_phase(self, phase: PhaseConfig) -> PhaseMetrics:
        if phase.add_acs:
            new = self.topology.add_acs(phase.add_acs)
            if self.g.olap_isolated:
                self.olap_acs.extend(new)
        programs = [gen_txn(phase.mix_dict, phase.skew, self.rng, self.workload) for _ in range(phase.txns)]
        self.programs.extend(programs)
        for ac in self.topology.acs.values():
            ac.now = 0.0
            ac.busy_us = 0.0
        money_before = money_totals(merged_tables(self.partitions))
        if phase.policy == BASELINE:
            tput, lats, busy = run_baseline(self.partitions, programs, self.g.clients, self.g.costs)
            self._check_money(phase, money_before)
            used = sum(1 for v in busy.values() if v > 0)
            self.txn_base += len(programs)
            return PhaseMetrics(phase.name, BASELINE, tput, _percentile(lats, .5), _percentile(lats, .99),
                                None, used, len(programs), len(programs),
                                {self.topology.storage_of[p]: v for p, v in busy.items()})
        pool = self._oltp_pool(phase)
        router = Router(self.topology, phase.policy, self.sequencer, self.g.costs,
                        rows_hint=self.dataset.config.customers, compute_pool=pool)
        factory = None
        if phase.olap:
            qpool = self.olap_acs if (self.g.olap_isolated and self.olap_acs) else pool
            factory = self._query_factory(qpool)
        driver = OltpDriver(router, programs, self.g.clients, self.txn_base, factory)
        ex = VirtualExecutor(self.topology)
        ex.run(driver)
        self.last_driver = driver
        for txn_id, seq in driver.seq_of.items():
            self.seq_programs.append((seq, programs[txn_id - self.txn_base]))
        self.txn_base += len(programs)
        leftovers = {a: s for a, ac in self.topology.acs.items() if any((s := ac.residual_state()).values())}
        if leftovers:
            raise InvariantViolation(f"residual AC state after phase {phase.name}: {leftovers}")
        if len(driver.commits) != len(programs):
            raise InvariantViolation(f"phase {phase.name}: {len(driver.commits)} of {len(programs)} committed")
        self._check_money(phase, money_before)
        tput, lats = _throughput(driver.commits, WARMUP_FRACTION)
        # utilization over the OLTP span only
        span = max((t for t, _ in driver.commits), default=0.0)
        util = {a: (ac.busy_us / span if span else 0.0) for a, ac in self.topology.acs.items()}
        used = sum(1 for ac in self.topology.acs.values() if ac.busy_us > 0)
        olap_t = driver.olap_times
        return PhaseMetrics(phase.name, str(router.policy), tput, _percentile(lats, .5), _percentile(lats, .99),
                            statistics.fmean(olap_t) if olap_t else None, used,
                            len(driver.commits), len(programs), util)

    def _check_money(self, phase, before):
        after = money_totals(merged_tables(self.partitions))
        if not money_conserved(before, after):
            raise InvariantViolation(f"phase {phase.name}: money not conserved {before} -> {after}")

    def _query_factory(self, pool):
        g = self.g

        def make(k, t):
            desc = olap.QueryDescriptor(query_id=(1 << 40) + self.txn_base * 1000 + k)
            # isolated placement is disaggregated by construction; shared placement follows config
            policy = "disaggregated" if g.olap_isolated else g.olap_policy
            plan = olap.plan_query(desc, policy, self.topology, "build+probe", compute_pool=pool or None)
            return olap.QueryDriver(plan, g.compile_ms, admit_at=t)
        return make

    def state_hash(self) -> str:
        return state_hash(merged_tables(self.partitions))


def run_phases(phases: list, gcfg: GlobalConfig, repeat: Optional[int] = None,
               history: Optional[list] = None) -> list:
    """Run all phases ``repeat`` times (fresh data each time) and merge into whisker rows.

    If ``history`` is a list, the first repetition's access history is appended to it.
    """
    if not phases:
        raise ConfigError("need at least one phase")
    reps = gcfg.repeat if repeat is None else repeat
    runs = []
    for r in range(max(1, reps)):
        runner = PhaseRunner(gcfg, seed=gcfg.seed + r, log_history=history is not None and r == 0)
        metrics = [runner.run_phase(p) for p in phases]
        if history is not None and r == 0:
            history.extend(runner.topology.history())
        h = runner.state_hash()
        for m in metrics:
            m.state_hash = h
        runs.append(metrics)
    return merge_repeats(runs)


def merge_repeats(runs: list) -> list:
    out = []
    for rows in zip(*runs):
        tputs = [m.throughput for m in rows]
        first = rows[0]
        olaps = [m.olap_us for m in rows if m.olap_us is not None]
        out.append(replace(
            first,
            throughput=statistics.fmean(tputs),
            p50_us=statistics.fmean(m.p50_us for m in rows),
            p99_us=statistics.fmean(m.p99_us for m in rows),
            olap_us=statistics.fmean(olaps) if olaps else None,
            throughput_min=min(tputs), throughput_max=max(tputs),
        ))
    return out


CSV_COLUMNS = ("phase", "policy", "throughput", "p50_us", "p99_us", "olap_us", "acs_used",
               "throughput_per_ac", "throughput_min", "throughput_max")


def emit_csv(metrics, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for m in metrics:
            w.writerow([m.phase, m.policy, f"{m.throughput:.1f}", f"{m.p50_us:.2f}", f"{m.p99_us:.2f}",
                        "" if m.olap_us is None else f"{m.olap_us:.1f}", m.acs_used,
                        f"{m.throughput_per_ac:.1f}",
                        f"{(m.throughput_min if m.throughput_min is not None else m.throughput):.1f}",
                        f"{(m.throughput_max if m.throughput_max is not None else m.throughput):.1f}"])


def compare_report(metrics: list, baseline: list) -> list:
    """Per-phase ratios of throughput and per-AC throughput against a baseline run."""
    if len(metrics) != len(baseline):
        raise ConfigError(f"phase count mismatch: {len(metrics)} vs {len(baseline)}")
    out = []
    for m, b in zip(metrics, baseline):
        out.append({
            "phase": m.phase,
            "throughput_ratio": m.throughput / b.throughput if b.throughput else float("nan"),
            # per-AC normalization is the comparison that survives differing AC counts
            "per_ac_ratio": m.throughput_per_ac / b.throughput_per_ac if b.throughput_per_ac else float("nan"),
        })
    return out


def format_report(rows: list) -> str:
    lines = [f"{'phase':<12} {'throughput':>11} {'per-AC':>8}"]
    for r in rows:
        lines.append(f"{r['phase']:<12} {r['throughput_ratio']:>10.2f}x {r['per_ac_ratio']:>7.2f}x")
    lines.append("per-AC ratios normalize for differing AC counts between configurations")
    return "\n".join(lines)


def verify_history(history) -> bool:
    return bool(check_serializable(history, check_seq_order=True))
