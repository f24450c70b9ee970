import dataclasses

from archless.costs import DEFAULT_COSTS, calibrate
from archless.events import Commit, SelectCustomerByLastName, UpdateRecord


def test_estimates():
    scan = SelectCustomerByLastName(0, 1, "X")
    assert DEFAULT_COSTS.estimate(scan, 300) > DEFAULT_COSTS.estimate(scan, 30)
    upd = UpdateRecord("WAREHOUSE", (0,), (("w_ytd", 1),))
    assert DEFAULT_COSTS.estimate(upd) == DEFAULT_COSTS.event + DEFAULT_COSTS.update
    assert DEFAULT_COSTS.estimate(Commit(0)) > DEFAULT_COSTS.event
    assert DEFAULT_COSTS.replace(update=1.0).update == 1.0


def test_calibrate_returns_positive_costs():
    model = calibrate(500)
    assert all(getattr(model, f.name) > 0 for f in dataclasses.fields(model))
