"""Deterministic seeded loader for the simplified TPC-C schema."""
from __future__ import annotations

import csv
import os
import random
from dataclasses import dataclass, field
from functools import lru_cache

from .storage import SCHEMA, Partition

SYLLABLES = ("BAR", "OUGHT", "ABLE", "PRI", "PRES", "ESE", "ANTI", "CALLY", "ATION", "EING")
STATES = tuple(chr(c) for c in range(ord("A"), ord("Z") + 1))
OPEN_ORDER_FRACTION = 0.3
MIN_ENTRY_YEAR, MAX_ENTRY_YEAR = 2004, 2010


def last_name(num: int) -> str:
    return SYLLABLES[num // 100 % 10] + SYLLABLES[num // 10 % 10] + SYLLABLES[num % 10]


@dataclass(frozen=True)
class ScaleConfig:
    warehouses: int = 4
    districts: int = 10
    customers: int = 300
    orders: int = 300
    order_lines_mean: int = 10
    items: int = 1000
    seed: int = 0


PROFILES = {
    "test": ScaleConfig(warehouses=4, customers=300, orders=300),
    "bench": ScaleConfig(warehouses=8, customers=3000, orders=3000, items=100000),
}


@dataclass
class Dataset:
    config: ScaleConfig
    tables: dict = field(default_factory=dict)

    def last_names(self, w_id, d_id) -> list:
        return self._names[(w_id, d_id)]

    def __post_init__(self):
        self._names = {}

    def index_names(self):
        names = {}
        for c in self.tables["CUSTOMER"]:
            names.setdefault((c["c_w_id"], c["c_d_id"]), []).append(c["c_last"])
        self._names = names


def _date(rng: random.Random) -> int:
    y = rng.randint(MIN_ENTRY_YEAR, MAX_ENTRY_YEAR)
    return y * 10000 + rng.randint(1, 12) * 100 + rng.randint(1, 28)


def generate(config: ScaleConfig) -> Dataset:
    rng = random.Random(config.seed)
    W, D, C, O = config.warehouses, config.districts, config.customers, config.orders
    t = {name: [] for name in SCHEMA}
    t["ITEM"] = [{"i_id": i, "i_price": rng.randint(100, 10000)} for i in range(1, config.items + 1)]
    name_span = max(1, C // 3)
    for w in range(W):
        t["WAREHOUSE"].append({"w_id": w, "w_ytd": 0})
        for i in range(1, config.items + 1):
            t["STOCK"].append({"s_i_id": i, "s_w_id": w, "s_quantity": rng.randint(10, 100)})
        for d in range(1, D + 1):
            t["DISTRICT"].append({"d_id": d, "d_w_id": w, "d_ytd": 0})
            for c in range(1, C + 1):
                t["CUSTOMER"].append({
                    "c_id": c, "c_d_id": d, "c_w_id": w,
                    "c_last": last_name(rng.randrange(name_span)),
                    "c_state": rng.choice(STATES) + rng.choice(STATES),
                    "c_balance": 0, "c_ytd_payment": 0, "c_payment_cnt": 0,
                })
            perm = list(range(1, C + 1))
            rng.shuffle(perm)
            first_open = O - int(round(O * OPEN_ORDER_FRACTION)) + 1
            lo, hi = max(1, config.order_lines_mean - 5), config.order_lines_mean + 5
            for o in range(1, O + 1):
                t["ORDERS"].append({
                    "o_id": o, "o_w_id": w, "o_d_id": d,
                    "o_c_id": perm[(o - 1) % C], "o_entry_d": _date(rng),
                })
                if o >= first_open:
                    t["NEW_ORDER"].append({"no_o_id": o, "no_w_id": w, "no_d_id": d})
                for n in range(1, rng.randint(lo, hi) + 1):
                    t["ORDER_LINE"].append({
                        "ol_o_id": o, "ol_w_id": w, "ol_d_id": d, "ol_number": n,
                        "ol_i_id": rng.randint(1, config.items),
                        "ol_amount": rng.randint(1, 999999), "ol_quantity": 5,
                    })
    ds = Dataset(config, t)
    ds.index_names()
    return ds


@lru_cache(maxsize=8)
def cached_dataset(config: ScaleConfig) -> Dataset:
    """Rows are immutable, so one generated dataset may back many runs."""
    return generate(config)


def build_partitions(ds: Dataset) -> dict:
    parts = {w: Partition(w) for w in range(ds.config.warehouses)}
    for name, rows in ds.tables.items():
        s = SCHEMA[name]
        if s.partition_column is None:
            for p in parts.values():
                p.load(name, rows)
            continue
        by_part = {}
        for r in rows:
            by_part.setdefault(r[s.partition_column], []).append(r)
        for w, rs in by_part.items():
            parts[w].load(name, rs)
    return parts


def dump_csv(partitions: dict, directory: str) -> None:
    """Debug helper: one CSV per table, rows of all partitions concatenated."""
    os.makedirs(directory, exist_ok=True)
    for name, s in SCHEMA.items():
        with open(os.path.join(directory, f"{name.lower()}.csv"), "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=s.columns)
            w.writeheader()
            seen = set()
            for p in partitions.values():
                for k, row in p.tables[name].items():
                    if s.partition_column is None and k in seen:
                        continue
                    seen.add(k)
                    w.writerow(row)
