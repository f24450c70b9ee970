from hypothesis import given, settings, strategies as st
import pytest

from archless.errors import DuplicateKey, KeyNotFound, OrderViolation, WrongPartition
from archless.events import (
    Always, BeamInit, Eq, Event, InsertRecord, ReadRecord, StartsWith, StreamId, UpdateRecord,
)
from archless.storage import (
    OPEN_ORDERS, SCHEMA, Partition, apply_update, init_beam, money_conserved, money_totals,
    read_record, scan_filter_source, scan_rows, select_customer_by_last_name,
)
from archless.txn import payment_program, reference_execute

SID = StreamId(0, 1, 0)


def _warehouse(pid, ytd=0):
    p = Partition(pid)
    p.load("WAREHOUSE", [{"w_id": pid, "w_ytd": ytd}])
    return p


def test_update_additive_delta():
    p = _warehouse(3)
    ack = apply_update(p, Event(1, 1, 0, UpdateRecord("WAREHOUSE", (3,), (("w_ytd", 10000),))))
    assert p.get("WAREHOUSE", (3,))["w_ytd"] == 10000
    assert ack.kind.status == "ok" and ack.kind.target_op_index == 0


def test_insert_history_row():
    p = _warehouse(0)
    rec = (("h_id", 1), ("h_w_id", 0), ("h_d_id", 1), ("h_c_id", 1), ("h_amount", 5), ("h_date", 1))
    apply_update(p, Event(1, 1, 0, InsertRecord("HISTORY", rec)))
    assert len(p.tables["HISTORY"]) == 1
    with pytest.raises(DuplicateKey):
        apply_update(p, Event(2, 2, 0, InsertRecord("HISTORY", rec)))


def test_wrong_partition():
    p = _warehouse(1)
    with pytest.raises(WrongPartition):
        apply_update(p, Event(1, 1, 0, UpdateRecord("WAREHOUSE", (2,), (("w_ytd", 1),))))
    with pytest.raises(WrongPartition):
        p.load("WAREHOUSE", [{"w_id": 2, "w_ytd": 0}])


def test_read_fresh_and_missing():
    p = _warehouse(0)
    b = read_record(p, Event(1, 1, 0, ReadRecord("WAREHOUSE", (0,)), output_stream=SID))
    assert b.rows == ({"w_id": 0, "w_ytd": 0},) and b.last
    with pytest.raises(KeyNotFound):
        read_record(p, Event(1, 1, 0, ReadRecord("DISTRICT", (0, 1)), output_stream=SID))


def test_read_after_two_payments(small_partitions):
    p = small_partitions[0]
    before = {t: dict(r) for t, r in p.tables.items()}
    progs = [payment_program(0, 1, 0, 1, 4, 1000, h_id=i) for i in (1, 2)]
    for n, prog in enumerate(progs):
        for i, op in enumerate(prog.ops[:-1]):
            if isinstance(op, (UpdateRecord, InsertRecord)):
                apply_update(p, Event(n * 10 + i, n, i, op))
    row = read_record(p, Event(99, 9, 0, ReadRecord("CUSTOMER", (0, 1, 4)), output_stream=SID)).rows[0]
    assert row["c_payment_cnt"] == 2 and row["c_ytd_payment"] == 2000
    ref = reference_execute(before, progs)
    assert ref["CUSTOMER"][(0, 1, 4)] == row


def test_applied_seq_non_decreasing():
    p = _warehouse(0)
    up = UpdateRecord("WAREHOUSE", (0,), (("w_ytd", 1),))
    apply_update(p, Event(1, 1, 0, up, conflict_class=0, global_seq=5))
    apply_update(p, Event(2, 2, 0, up, conflict_class=0, global_seq=5))
    with pytest.raises(OrderViolation):
        apply_update(p, Event(3, 3, 0, up, conflict_class=0, global_seq=4))
    assert p.get("WAREHOUSE", (0,))["w_ytd"] == 2


def test_select_by_last_name_matches_brute_force(small_partitions, small_dataset):
    p = small_partitions[1]
    for d in (1, 2):
        for name in set(r["c_last"] for r in p.tables["CUSTOMER"].values() if r["c_d_id"] == d):
            got = [r["c_id"] for b in select_customer_by_last_name(p, 1, d, name, SID) for r in b.rows]
            want = sorted(r["c_id"] for r in small_dataset.tables["CUSTOMER"]
                          if (r["c_w_id"], r["c_d_id"], r["c_last"]) == (1, d, name))
            assert got == want


def test_select_no_match_single_empty_batch(small_partitions):
    bs = select_customer_by_last_name(small_partitions[0], 0, 1, "NOBODY", SID)
    assert len(bs) == 1 and bs[0].rows == () and bs[0].last


def test_select_wrong_partition(small_partitions):
    with pytest.raises(WrongPartition):
        select_customer_by_last_name(small_partitions[0], 1, 1, "X", SID)


def test_scan_filter_matches_reference(small_partitions, small_dataset):
    p = small_partitions[0]
    got = [r for b in scan_filter_source(p, "CUSTOMER", StartsWith("c_state", "A"), None, SID, 7)
           for r in b.rows]
    want = [r for r in small_dataset.tables["CUSTOMER"] if r["c_w_id"] == 0 and r["c_state"].startswith("A")]
    assert sorted(map(repr, got)) == sorted(map(repr, want))


def test_scan_always_true_and_false(small_partitions):
    p = small_partitions[0]
    rows, _ = scan_rows(p, "ORDERS", Always(), None)
    assert len(rows) == len(p.tables["ORDERS"])
    bs = scan_filter_source(p, "ORDERS", Always(False), None, SID)
    assert len(bs) == 1 and bs[0].rows == () and bs[0].last


def test_open_orders_virtual_table(small_partitions):
    p = small_partitions[0]
    rows, examined = scan_rows(p, OPEN_ORDERS, Always(), ("o_id",))
    open_ids = {k[2] for k in p.tables["NEW_ORDER"]}
    assert examined == len(p.tables["ORDERS"])
    assert len(rows) == len(p.tables["NEW_ORDER"]) and all(r["o_id"] in open_ids for r in rows)


def test_clustered_scan_equals_full_scan(small_partitions):
    p = small_partitions[1]
    pred_rows, _ = scan_rows(p, "CUSTOMER", Eq("c_w_id", 1), None)
    from archless.events import And
    clustered, _ = scan_rows(p, "CUSTOMER", And((Eq("c_w_id", 1), Eq("c_d_id", 3))), ("c_id", "c_last"))
    brute = [{"c_id": r["c_id"], "c_last": r["c_last"]} for r in pred_rows if r["c_d_id"] == 3]
    assert sorted(map(repr, clustered)) == sorted(map(repr, brute))


def test_beam_equals_pull_scan(small_partitions):
    p = small_partitions[0]
    pred = StartsWith("c_state", "B")
    beam = init_beam(p, Event(1, 1, 0, BeamInit("CUSTOMER", pred, ("c_id",), 5, SID)), batch_capacity=3)
    pull = scan_filter_source(p, "CUSTOMER", pred, ("c_id",), SID, 3)
    assert beam == pull
    empty = init_beam(p, Event(1, 1, 0, BeamInit("CUSTOMER", Always(False), None, 5, SID)))
    assert len(empty) == 1 and empty[0].last and not empty[0].rows


def test_partition_column_invariant(small_partitions):
    for pid, p in small_partitions.items():
        for name, s in SCHEMA.items():
            if s.partition_column:
                assert all(r[s.partition_column] == pid for r in p.tables[name].values())


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 10), st.integers(1, 5000)), min_size=1, max_size=30))
def test_money_conservation_property(payments):
    p = Partition(0)
    p.load("WAREHOUSE", [{"w_id": 0, "w_ytd": 0}])
    p.load("DISTRICT", [{"d_id": d, "d_w_id": 0, "d_ytd": 0} for d in range(1, 11)])
    p.load("CUSTOMER", [{"c_id": 1, "c_d_id": d, "c_w_id": 0, "c_last": "X", "c_state": "AA", "c_balance": 0,
                         "c_ytd_payment": 0, "c_payment_cnt": 0} for d in range(1, 11)])
    before = money_totals(p.tables)
    for h, (d, amount) in enumerate(payments):
        prog = payment_program(0, d, 0, d, 1, amount, h_id=h)
        for i, op in enumerate(prog.ops[:-1]):
            if isinstance(op, (UpdateRecord, InsertRecord)):
                apply_update(p, Event(h * 10 + i, h, i, op))
    after = money_totals(p.tables)
    assert money_conserved(before, after)
    assert after[0] - before[0] == sum(a for _, a in payments)
