import csv

from archless.cli import main
from archless.txn import HistoryRecord, dump_trace

CONFIG = """[global]
repeat = 1
ac_count = 2
clients = 8

[phase a]
txns = 120
skew = 1.0
policy = streaming_cc

[phase b]
txns = 120
policy = intra_precise
"""


def test_run_writes_csv_and_trace(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(CONFIG)
    out, trace = tmp_path / "m.csv", tmp_path / "t.trace"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--seed", "3", "--trace", str(trace)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["phase"] for r in rows] == ["a", "b"]
    assert main(["verify", "--trace", str(trace)]) == 0
    assert "ok:" in capsys.readouterr().out


def test_verify_flags_cycle(tmp_path, capsys):
    h = [HistoryRecord(1, 1, 0, "W", "T", ("x",), None, 0, 0), HistoryRecord(2, 2, 0, "R", "T", ("x",), None, 0, 1),
         HistoryRecord(2, 2, 1, "W", "T", ("y",), None, 0, 2), HistoryRecord(1, 1, 1, "R", "T", ("y",), None, 0, 3)]
    path = tmp_path / "bad.trace"
    dump_trace(h, path)
    assert main(["verify", "--trace", str(path)]) == 1
    assert "cycle" in capsys.readouterr().out


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[phase a]\nskew = 3\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o.csv")]) == 2
    assert "skew" in capsys.readouterr().err


def test_beam_sweep(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["beam", "--out", str(out), "--compile-ms", "10", "--latency-us", "100", "--compute", "2"]) == 0
    rows = list(csv.DictReader(out.open()))
    assert {r["beaming"] for r in rows} == {"none", "build+probe"}
