import json
import os
import subprocess

import numpy as np
import pytest

import gbmuq


@pytest.fixture(scope="module")
def sim():
    return gbmuq.simulate("NB/Normal/Normal", (80, 25, 2, 2, 1), seed=3)


def test_version():
    assert gbmuq.__version__ == "0.1.0"


def test_simulate_shapes(sim):
    assert sim["Y"].shape == (80, 25)
    assert sim["X"].shape == (80, 2)
    assert sim["Z"].shape == (25, 2)
    assert sim["truth"]["U"].shape == (80, 1)
    assert (sim["Y"] >= 0).all()
    np.testing.assert_allclose(np.exp(sim["truth"]["S"]).mean(), 1.0, rtol=1e-12)


def test_simulate_reproducible(sim):
    again = gbmuq.simulate("NB/Normal/Normal", (80, 25, 2, 2, 1), seed=3)
    np.testing.assert_array_equal(sim["Y"], again["Y"])
    other = gbmuq.simulate("NB/Normal/Normal", (80, 25, 2, 2, 1), seed=3, replicate=1)
    assert not np.array_equal(sim["Y"], other["Y"])


def test_fit_and_infer(sim):
    res = gbmuq.fit(sim["Y"], sim["X"], sim["Z"], M=1)
    p = res["params"]
    assert res["converged"]
    assert p["A"].shape == (25, 2)
    assert p["B"].shape == (80, 2)
    assert np.abs(res["Z"].T @ p["A"]).max() < 1e-8 * max(1.0, np.abs(p["A"]).max())
    eta = gbmuq.compute_eta(p, res["X"], res["Z"])
    assert eta.shape == (80, 25)
    se = gbmuq.standard_errors(sim["Y"].astype(float), res["X"], res["Z"], p)
    for key in ("A", "B", "C", "U", "V"):
        assert se[key].shape == p[key].shape
        assert np.isfinite(se[key]).all() and (se[key] > 0).all()
    w = gbmuq.wald_tests(p["B"][:, 1], se["B"][:, 1])
    assert ((w["p_values"] >= 0) & (w["p_values"] <= 1)).all()
    assert (w["ci_lower"] <= w["ci_upper"]).all()


def test_fit_intercept_only(sim):
    res = gbmuq.fit(sim["Y"])
    assert res["params"]["A"].shape == (25, 1)
    assert res["params"]["U"].shape == (80, 0)


def test_config_objects(sim):
    cfg = gbmuq.FitConfig()
    cfg.max_iter = 2
    prior = gbmuq.PriorConfig()
    prior.lambda_a = 2.0
    res = gbmuq.fit(sim["Y"], sim["X"], sim["Z"], M=1, prior=prior, config=cfg)
    assert res["iterations"] <= 2


def test_metrics():
    x = np.linspace(0.0, 2.99, 300)
    assert gbmuq.wmad(x, k=10) == pytest.approx(0.1, rel=1e-9)
    assert gbmuq.lrse(np.full(300, 2.0), k=10) < 1e-13
    np.testing.assert_allclose(
        gbmuq.weighted_moving_average(np.array([0.0, 3.0, 6.0]), np.array([1.0, 1.0, 2.0]), 2), [1.5, 3.75, 5.0]
    )


def test_relative_mse_and_coverage():
    rng = np.random.default_rng(1)
    t = rng.normal(size=(50, 4))
    assert gbmuq.relative_mse(2 * t, t) == pytest.approx(1.0)
    curve = gbmuq.coverage_curve(t, np.ones_like(t), t)
    assert len(curve) == 101
    assert all(c == 1.0 for _, c in curve[1:])


def test_errors():
    with pytest.raises(gbmuq.GbmError, match="Gamma"):
        gbmuq.simulate("NB/Weird/Normal")
    with pytest.raises(gbmuq.GbmError):
        gbmuq.fit(-np.ones((5, 4)))
    with pytest.raises(gbmuq.GbmError):
        gbmuq.lrse(np.ones(5), k=3)


@pytest.mark.skipif(not os.environ.get("GBM_CLI"), reason="CLI path not provided")
def test_cli_matches_module(tmp_path):
    cli = os.environ["GBM_CLI"]
    out = tmp_path / "sim"
    subprocess.run([cli, "simulate", "--dims", "40x15x2x2x1", "--seed", "11", "--out", str(out)], check=True)
    y_cli = np.loadtxt(out / "Y.csv", delimiter=",", ndmin=2)
    y_mod = gbmuq.simulate("NB/Normal/Normal", (40, 15, 2, 2, 1), seed=11)["Y"]
    np.testing.assert_array_equal(y_cli, y_mod)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 11
