"""Command line entry point: ``archless run|verify|calibrate|beam``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import datagen, harness, olap
from .errors import ArchlessError, ConfigError, InvariantViolation
from .runtime import Topology
from .txn import check_serializable, dump_trace, load_trace

COMPILE_SWEEP_MS = (1, 5, 10, 20, 30, 40)


def _cmd_run(args) -> int:
    gcfg, phases = harness.load_config(args.config)
    over = {k: v for k, v in (("seed", args.seed), ("profile", args.profile), ("repeat", args.repeat))
            if v is not None}
    gcfg = dataclasses.replace(gcfg, **over)
    history = [] if args.trace else None
    metrics = harness.run_phases(phases, gcfg, history=history)
    harness.emit_csv(metrics, args.out)
    for m in metrics:
        olap_part = "" if m.olap_us is None else f"  olap {m.olap_us / 1000:.1f} ms"
        print(f"{m.phase:<12} {m.policy:<15} {m.throughput:>10.0f} tx/s  {m.throughput_per_ac:>9.0f} /AC"
              f"  p99 {m.p99_us:>8.0f} us{olap_part}")
    if history is not None:
        dump_trace(history, args.trace)
        verdict = check_serializable(history, check_seq_order=True)
        if not verdict:
            print(f"trace is not serializable: cycle {verdict.cycle} misordered {verdict.misordered[:5]}",
                  file=sys.stderr)
            return 1
    return 0


def _cmd_verify(args) -> int:
    history = load_trace(args.trace)
    verdict = check_serializable(history, check_seq_order=not args.no_seq_order)
    if verdict:
        print(f"ok: {len(history)} accesses, {verdict.edges} conflict edges")
        return 0
    if verdict.cycle:
        print(f"cycle among transactions {verdict.cycle}")
    if verdict.misordered:
        print(f"{len(verdict.misordered)} conflict edges disagree with sequence order, "
              f"first {verdict.misordered[:5]}")
    return 1


def _cmd_calibrate(args) -> int:
    from .costs import calibrate
    model = calibrate(args.n)
    for f in dataclasses.fields(model):
        print(f"{f.name:<12} {getattr(model, f.name):8.3f} us")
    return 0


def _cmd_beam(args) -> int:
    ds = datagen.cached_dataset(dataclasses.replace(datagen.PROFILES[args.profile], seed=args.seed))
    rows = []
    for ms in args.compile_ms:
        for level in ("none", "build+probe"):
            topo = Topology(datagen.build_partitions(ds), compute=args.compute,
                            injected_latency_us=args.latency_us, log_history=False)
            rep = olap.run_beamed_query(olap.QueryDescriptor(), ms, level, topo, args.policy)
            for phase in ("build_phase", "probe_phase", "total", "beam_duration", "transfer"):
                rows.append({"compile_ms": ms, "beaming": level, "phase": phase, "duration_us": rep[phase]})
            print(f"compile {ms:>5} ms  {level:<12} build {rep['build_phase']:>10.0f} us"
                  f"  total {rep['total']:>10.0f} us")
    olap.emit_timing_csv(rows, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="archless")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a phased benchmark config")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True, help="metrics CSV path")
    run.add_argument("--seed", type=int)
    run.add_argument("--profile", choices=sorted(datagen.PROFILES))
    run.add_argument("--repeat", type=int)
    run.add_argument("--trace", help="also write and check the first repetition's access trace")
    run.set_defaults(func=_cmd_run)

    ver = sub.add_parser("verify", help="check a trace for conflict serializability")
    ver.add_argument("--trace", required=True)
    ver.add_argument("--no-seq-order", action="store_true",
                     help="only check acyclicity, not agreement with sequence numbers")
    ver.set_defaults(func=_cmd_verify)

    cal = sub.add_parser("calibrate", help="measure per-operation costs on this machine")
    cal.add_argument("--n", type=int, default=20000)
    cal.set_defaults(func=_cmd_calibrate)

    beam = sub.add_parser("beam", help="sweep compile time with and without data beaming")
    beam.add_argument("--out", required=True, help="timing CSV path")
    beam.add_argument("--compile-ms", type=float, nargs="+", default=list(COMPILE_SWEEP_MS))
    beam.add_argument("--latency-us", type=float, default=1000.0)
    beam.add_argument("--compute", type=int, default=4)
    beam.add_argument("--policy", default="disaggregated", choices=("disaggregated", "shared_nothing"))
    beam.add_argument("--profile", default="test", choices=sorted(datagen.PROFILES))
    beam.add_argument("--seed", type=int, default=0)
    beam.set_defaults(func=_cmd_beam)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ArchlessError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
