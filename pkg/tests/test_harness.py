import math
import random

import pytest

from archless.errors import ConfigError
from archless.events import Commit, ReadRecord
from archless.harness import (
    CSV_COLUMNS, GlobalConfig, PhaseConfig, PhaseRunner, Workload, compare_report, emit_csv,
    format_report, gen_txn, load_config, merge_repeats, parse_config, run_baseline, run_phases,
)
from archless.txn import TransactionProgram

G = GlobalConfig(repeat=1, ac_count=2, clients=8)


@pytest.fixture(scope="module")
def workload(test_dataset):
    return Workload(test_dataset)


def test_full_skew_all_home_zero(workload):
    rng = random.Random(0)
    assert {gen_txn({"payment": 100}, 1.0, rng, workload).home_partition for _ in range(1000)} == {0}


def test_uniform_within_binomial_bound(workload):
    rng = random.Random(1)
    counts = [0] * 4
    for _ in range(10000):
        counts[gen_txn({"payment": 100}, 0.0, rng, workload).home_partition] += 1
    sigma = math.sqrt(10000 * 0.25 * 0.75)
    assert all(abs(c - 2500) <= 3 * sigma for c in counts)


def test_mix_respected(workload):
    rng = random.Random(2)
    names = {gen_txn({"payment": 100, "neworder": 0}, 0.5, rng, workload).name for _ in range(300)}
    assert names == {"payment"}
    names = {gen_txn({"payment": 0, "neworder": 100}, 0.5, rng, workload).name for _ in range(50)}
    assert names == {"neworder"}


@pytest.mark.parametrize("kw", [dict(skew=1.5), dict(mix=(("payment", 60), ("neworder", 30))),
                                dict(policy="bogus"), dict(txns=-1)])
def test_phase_validation(kw):
    with pytest.raises(ConfigError):
        PhaseConfig("x", **kw)


def test_parse_config_and_errors():
    g, phases = parse_config("[global]\nac_count = 3\nolap_isolated = no\n[phase a]\ntxns = 5\nskew = 1\n"
                             "policy = streaming_cc\npayment = 70\n")
    assert g.ac_count == 3 and g.olap_isolated is False
    assert phases[0].mix_dict == {"payment": 70, "neworder": 30} and phases[0].txns == 5
    for bad in ("[global]\nfoo = 1\n[phase a]\n", "[phase a]\nwat = 2\n", "[global]\nseed = 1\n", "[other]\n"):
        with pytest.raises(ConfigError):
            parse_config(bad)


def test_shipped_configs_parse():
    _, phases = load_config("configs/fig1.ini")
    assert len(phases) == 12 and sum(p.olap for p in phases) == 6
    _, base = load_config("configs/fig1_baseline.ini")
    assert [p.name for p in base] == [p.name for p in phases]


def test_zero_txn_phase():
    (m,) = run_phases([PhaseConfig("empty", txns=0)], G)
    assert m.throughput == 0.0 and m.committed == m.admitted == 0


def test_counts_and_determinism():
    phases = [PhaseConfig("p", txns=200, skew=1.0, policy="streaming_cc", mix=(("payment", 50), ("neworder", 50)))]
    hashes = set()
    for _ in range(2):
        r = PhaseRunner(G)
        m = r.run_phase(phases[0])
        assert m.committed == m.admitted == 200 and m.throughput > 0
        hashes.add(r.state_hash())
    assert len(hashes) == 1
    assert orders_and_history_grow(r)


def orders_and_history_grow(runner):
    from archless.txn import merged_tables
    t = merged_tables(runner.partitions)
    base = runner.dataset.tables
    new_orders = len(t["ORDERS"]) - len(base["ORDERS"])
    history = len(t["HISTORY"]) - len(base["HISTORY"])
    names = [p.name for p in runner.programs]
    return new_orders == names.count("neworder") and history == names.count("payment")


def test_htap_places_query_on_added_acs():
    r = PhaseRunner(GlobalConfig(ac_count=2, clients=8, olap_isolated=True))
    before = set(r.topology.acs)
    m = r.run_phase(PhaseConfig("h", txns=300, policy="streaming_cc", olap=True, add_acs=2))
    added = set(r.topology.acs) - before
    assert len(added) == 2 and m.olap_us is not None
    for q in r.last_driver.queries:
        assert q.plan.acs <= added


def test_baseline_rejects_multi_partition_programs(small_partitions):
    prog = TransactionProgram((ReadRecord("WAREHOUSE", (1,)), Commit(0)), 0)
    with pytest.raises(ConfigError):
        run_baseline(small_partitions, [prog], 1)


def _metrics(tputs):
    r = PhaseRunner(G)
    out = []
    for t in tputs:
        m = r.run_phase(PhaseConfig("c", txns=0))
        m.throughput = t
        m.acs_used = 2
        out.append(m)
    return out


def test_whiskers_and_csv(tmp_path):
    merged = merge_repeats([_metrics([10.0]), _metrics([30.0]), _metrics([20.0])])
    (m,) = merged
    assert m.throughput_min <= m.throughput <= m.throughput_max
    assert (m.throughput_min, m.throughput, m.throughput_max) == (10.0, 20.0, 30.0)
    path = tmp_path / "m.csv"
    emit_csv(merged, path)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:8] == ["phase", "policy", "throughput", "p50_us", "p99_us", "olap_us", "acs_used",
                          "throughput_per_ac"]
    assert tuple(header) == CSV_COLUMNS


def test_compare_report():
    a = _metrics([10.0, 20.0])
    rows = compare_report(a, a)
    assert all(r["throughput_ratio"] == 1.0 and r["per_ac_ratio"] == 1.0 for r in rows)
    assert "per-AC" in format_report(rows)
    with pytest.raises(ConfigError):
        compare_report(a, a[:1])


def test_readme_config_example_parses():
    import re
    block = re.search(r"```ini\n(.*?)```", open("README.md").read(), re.S).group(1)
    g, phases = parse_config(block)
    assert g.ac_count == 4 and phases[0].policy == "shared_nothing"
