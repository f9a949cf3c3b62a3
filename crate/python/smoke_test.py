"""Smoke test for the strgode_py extension.

Build and run from the repository root:

    cargo build --release -p strgode-python --features extension-module
    cp target/release/libstrgode_py.so python/strgode_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import strgode_py as sg


def check(cond, msg):
    if not cond:
        raise AssertionError(msg)
    print("ok  ", msg)


def main():
    check(sg.dtw_distance([(0, 0), (1, 1)], [(0, 0), (0, 0), (1, 1)]) == 0.0, "dtw ignores repeated points")
    check(sg.dtw_distance([(0, 0)], [(3, 4)]) == 5.0, "dtw single pair is euclidean")

    phys = sg.build_physical([(0, 1), (1, 2)], 3)
    check(abs(phys.weight(1, 0) - 0.5) < 1e-12 and phys.weight(0, 1) == 1.0, "physical weights are 1/degree")
    corr = sg.build_correlation([[0, 3, 1], [2, 0, 0], [0, 0, 0]], threshold=0.2)
    check(all(s is None or abs(s - 1) < 1e-9 for s in corr.row_sums()), "correlation rows sum to one")
    try:
        sg.build_correlation([[0, 1], [1, 0]])
    except ValueError:
        print("ok   selection rule is required")
    else:
        raise AssertionError("missing selection rule accepted")

    m = sg.metrics([[1.0, 2.0]], [[2.0, 0.0]])
    check(m["mae"] == 1.5 and m["mape"] == 0.5, "metrics mask zero targets in mape")

    ds = sg.Dataset.synthetic(stations=5, days=10, seed=1)
    check(ds.split_days == (7, 1, 2), "synthetic split is 7/1/2 days")
    check(len(ds.graphs()) == 3 and ds.graphs()[0].kind == "physical", "three relation graphs")
    check(ds.ridership_csv().startswith("time,station_id,inflow,outflow"), "ridership csv header")

    model = sg.Model.train(ds, d=4, epochs=2, seed=0, batch_size=32)
    check(len(model.history) == 2, "history has one record per epoch")
    rows = model.evaluate(ds)
    check([r["horizon"] for r in rows] == ["15min", "30min", "45min", "60min"], "conventional report has four horizons")
    check(all(math.isfinite(r["mae"]) for r in rows), "finite test MAE")
    irr = model.evaluate(ds, protocol="irregular", seeds=[0, 1])
    check(irr == model.evaluate(ds, protocol="irregular", seeds=[0, 1]), "irregular report is reproducible")

    frames = [ds.frame(7, b) for b in range(20, 24)]
    preds = model.forecast([0.0, 1.0, 2.0, 3.0], frames, [4.0, 5.0])
    check(len(preds) == 2 and len(preds[0]) == 5 and len(preds[0][0]) == 2, "forecast shape")
    injected, rollout = model.injection_study(ds, horizons=8, inject=4)
    check(len(injected) == len(rollout) == 8, "injection study per horizon")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        back = sg.Model.load(path, ds)
        check(back.digest == model.digest, "checkpoint keeps the digest")
        check(back.forecast([0.0, 1.0, 2.0, 3.0], frames, [4.0, 5.0]) == preds, "checkpoint round trip is exact")
        check(sg.run_cli(["synth", "--stations", "3", "--days", "4", "--out", tmp]) == 0, "cli synth")
        check(sg.run_cli(["--set", "bogus=1", "synth", "--out", tmp]) == 1, "cli rejects unknown keys")

    print("smoke test passed")


if __name__ == "__main__":
    main()
