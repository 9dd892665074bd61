"""Smoke test for the compiled extension.

Build and run:
    cargo build --release -p dmlcmr-python --features extension-module
    cp target/release/libdmlcmr.so crates/python/python/dmlcmr.so
    python crates/python/python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import dmlcmr  # noqa: E402

RIDGE = {"kind": "ridge", "basis": {"kind": "polynomial", "input_dim": 1, "degree": 1}}
METHOD = {
    "name": "dml",
    "method": "dml-cmr",
    "nuisances": {"outcome": RIDGE, "density": {"kind": "gaussian-regression", "mean": RIDGE}},
    "structural": {"arch": "linear-in-basis", "basis": RIDGE["basis"]},
    "fit": {"solver": "closed-form", "k_folds": 2},
}
TOY = json.dumps({"kind": "linear-toy"})


def test_generate_is_seeded():
    a = dmlcmr.generate(TOY, 50, 1)
    b = dmlcmr.generate(TOY, 50, 1)
    c = dmlcmr.generate(TOY, 50, 2)
    assert a == b and a != c
    assert a["y"] == "y" and len(a["columns"]["y"]) == 50


def test_fit_predict_round_trip():
    fit = dmlcmr.fit(json.dumps(METHOD), 3, generator=TOY, n=2000)
    assert fit.method == "dml-cmr"
    assert abs(fit.theta[1] - 2.0) < 0.2, fit.theta
    again = dmlcmr.Fitted.from_json(fit.to_json())
    assert again.predict([[1.0], [-1.0]]) == fit.predict([[1.0], [-1.0]])
    try:
        fit.predict([[1.0, 2.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("wrong row width accepted")


def test_gateaux_and_nu():
    r = dmlcmr.gateaux(
        "orthogonal",
        json.dumps({"kind": "linear", "ds": [1.0], "dg": [0.0]}),
        config=json.dumps({"mc_n": 20000, "inner_draws": 50, "bootstrap": 100}),
    )
    assert abs(r["derivative"]) <= 4 * r["stderr"], r
    nu = dmlcmr.ill_posedness(
        json.dumps({"kind": "linear-toy", "theta0": 2.0, "instrument_strength": 1.0}), mc_n=20000
    )
    assert abs(nu["nu"] - math.sqrt(3)) < 0.2, nu


def test_bad_spec_raises():
    try:
        dmlcmr.generate(json.dumps({"kind": "nope"}), 10, 0)
    except ValueError as e:
        assert "generator" in str(e)
    else:
        raise AssertionError("bad generator accepted")


def test_config_hash_stable():
    h = dmlcmr.config_hash(json.dumps({"a": 1}))
    assert h == dmlcmr.config_hash(json.dumps({"a": 1})) and len(h) == 16


def test_benchmark_small():
    spec = {
        "methods": [METHOD],
        "generator": {"kind": "linear-toy"},
        "n_grid": [300],
        "seeds": [0, 1],
        "n_test": 500,
        "standardise": False,
        "test_seed": 0,
        "pcl": {"grid_points": 10, "grid_sample": 1000, "oracle_mc": 1000, "seed": 0},
    }
    (report,) = dmlcmr.benchmark(json.dumps(spec))
    assert report["method"] == "dml" and len(report["mse"]) == 2


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    with tempfile.TemporaryDirectory():
        for t in tests:
            t()
            print(f"ok  {t.__name__}")
    print(f"{len(tests)} passed")
