import json
import math

import numpy as np
import pytest

from vflsim import defense, model
from vflsim.data import synth_continuous
from vflsim.defense import DefenseError, NoiseCalibration


def test_sigma_formula_example():
    sa, sb = defense.calibrate_sigma(NoiseCalibration(1.0, 0.625, 1.0, 1, 1, 1, 1.0))
    assert sa == pytest.approx(math.sqrt(2 * math.log(2)) * math.sqrt(72), rel=1e-14)
    assert sb == pytest.approx(math.sqrt(2 * math.log(2)) * math.sqrt(8 + 16), rel=1e-14)


def test_sigma_scales_inverse_epsilon():
    a = defense.calibrate_sigma(NoiseCalibration(0.5, 0.1, 1.0, 30, 30, 256, 0.01))
    b = defense.calibrate_sigma(NoiseCalibration(0.25, 0.1, 1.0, 30, 30, 256, 0.01))
    assert b[0] == pytest.approx(2 * a[0], rel=1e-14)
    assert min(a) > 10


@pytest.mark.parametrize("args", [
    (0.0, 0.1, 1.0, 1, 1, 1, 1.0),
    (1.5, 0.1, 1.0, 1, 1, 1, 1.0),
    (0.5, 1.0, 1.0, 1, 1, 1, 1.0),
    (0.5, 0.1, 1.0, 1, 1, 1, 1.5),
    (0.5, 0.1, 0.5, 1, 1, 1, 1.0),
    (0.5, 0.1, 1.0, 0, 1, 1, 1.0),
])
def test_calibration_domain(args):
    with pytest.raises(DefenseError):
        NoiseCalibration(*args)


def test_trace_examples():
    tr = defense.sensitivity_trace(1.0, 0.5, 4, 3, 1, differing=[2])
    assert tr.sv_A[0] == 0 and tr.sv_B[0] == 0
    one = defense.sensitivity_trace(1.0, 0.5, 4, 1, 1)
    assert one.theta[1] == pytest.approx(2 * math.sqrt(2) * 0.5 / 4)
    assert one.sv_A[0] == 8.0 and one.sv_B[0] == 4.0


@pytest.mark.parametrize("m,s,eta,G", [(1, 1, 1.0, 1.0), (8, 4, 0.5, 1.0), (32, 64, 0.01, 2.0)])
def test_closed_form_is_the_single_epoch_envelope(m, s, eta, G):
    tr = defense.sensitivity_trace(G, eta, s, m, 1)
    for party in ("A", "B"):
        assert tr.envelope(party) == pytest.approx(tr.closed_form(party), rel=1e-12)
    assert tr.aggregate_A <= tr.closed_form("A") + 1e-12


@pytest.mark.parametrize("epochs", [2, 3, 10])
def test_closed_form_dominates_trace(epochs):
    tr = defense.sensitivity_trace(1.0, 0.5, 4, 8, epochs)
    assert tr.aggregate_A <= tr.envelope("A") <= tr.closed_form("A")
    assert tr.aggregate_B <= tr.envelope("B") <= tr.closed_form("B")
    assert np.all(np.diff(tr.theta) >= 0)


def test_sigma_covers_gaussian_mechanism():
    cal = NoiseCalibration(0.5, 0.1, 1.0, 5, 5 * 8, 4, 0.5)
    sa, sb = defense.calibrate_sigma(cal)
    tr = defense.sensitivity_trace(1.0, 0.5, 4, 8, 5)
    assert sa >= defense.gaussian_sigma(tr.aggregate_A, 0.5, 0.1)
    assert sb >= defense.gaussian_sigma(tr.aggregate_B, 0.5, 0.1)


def _tiny(seed, n=4, d=3):
    ds = synth_continuous(n, d, seed=seed)
    rng = np.random.default_rng(seed)
    reps = [(v / max(1.0, np.linalg.norm(v)), lab) for v, lab in zip(rng.standard_normal((3, d)), (1.0, -1.0, 1.0))]
    return ds, reps


def test_sensitivity_identical_pairs_zero():
    X = np.tile([[0.6, 0.0, 0.8]], (4, 1))
    y = np.ones(4)
    sch = model.make_schedule(4, 2, 2, 0)
    chk = defense.empirical_sensitivity_check(X, y, 1, [(X[0], 1.0)], sch, 0.5)
    assert chk.ok and chk.worst_ratio == 0.0


@pytest.mark.parametrize("eta", [0.5, 1.0])
def test_sensitivity_bounds_hold(eta):
    for seed in range(5):
        ds, reps = _tiny(seed)
        sch = model.make_schedule(4, 2, 2, seed)
        chk = defense.empirical_sensitivity_check(ds.X, ds.y, 1, reps, sch, eta)
        assert chk.ok, chk.first_violation
        assert chk.pairs == 12 and chk.G >= 1.0


def test_sensitivity_check_size_gate():
    ds = synth_continuous(16, 2, seed=0)
    with pytest.raises(DefenseError):
        defense.empirical_sensitivity_check(ds.X, ds.y, 1, [], model.make_schedule(16, 2, 1, 0), 0.5)


def test_horizon_examples():
    assert defense.horizon_passive(0.0, 1.0) == 4
    assert defense.horizon_passive(0.0, 0.01) == 278
    assert defense.horizon_defended(0.0, 0.01, 1.0) == 116
    assert defense.horizon_defended(0.3, 0.01, 0.0) == defense.horizon_passive(0.3, 0.01)
    assert defense.horizon_passive_value(2 - 1e-12, 0.01) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(DefenseError, match="invalid at t=1"):
        defense.horizon_passive(2.0, 0.01)
    with pytest.raises(DefenseError):
        defense.horizon_defended(0.0, 0.01, -1.0)


def test_defended_horizon_monotone_and_below_passive():
    for eps in (0.0, 0.5, 1.5):
        for eta in (0.01, 0.3, 1.0):
            us = np.linspace(0, 5, 51)
            vals = [defense.horizon_defended(eps, eta, u) for u in us]
            assert all(b <= a for a, b in zip(vals, vals[1:]))
            base = defense.horizon_passive_value(eps, eta)
            assert all(defense.horizon_defended_value(eps, eta, u) < base for u in us[1:])


def test_small_init():
    T0 = defense.horizon_passive(0.0, 0.01)
    assert defense.horizon_small_init(1.0, 10**16, 0.01)[0] == T0
    a, fail = defense.horizon_small_init(1.0, 784, 0.01, n=1000)
    b, _ = defense.horizon_small_init(2.0, 784, 0.01, n=1000)
    assert b <= a and fail == pytest.approx(2000 * math.exp(-28))
    with pytest.raises(DefenseError):
        defense.horizon_small_init(0.0, 4, 0.01)


def test_small_init_monte_carlo():
    d, n = 784, 1000
    X = synth_continuous(n, d, seed=0).X
    thr = defense.small_init_threshold(1.0, d)
    hits = sum(float(np.max(np.abs(X @ model.init_theta("gaussian", d, seed)))) < thr for seed in range(100))
    assert hits >= 99


def test_psi1_norm():
    K = defense.psi1_norm_standard_normal()
    z = np.random.default_rng(0).standard_normal(2_000_000)
    assert np.mean(np.exp(np.abs(z) / K)) == pytest.approx(2.0, rel=5e-3)


def test_gradient_error_bound():
    assert defense.gradient_error_bound(0.0, 64, 16, 0.05) == 0.0
    a = defense.gradient_error_bound(1.0, 16, 16, 0.05)
    assert defense.gradient_error_bound(1.0, 64, 16, 0.05) == pytest.approx(a / 2, rel=1e-14)
    assert defense.max_error_norm(0, sigma=0.0) == 0.0
    with pytest.raises(DefenseError):
        defense.gradient_error_bound(-1.0, 4, 4, 0.1)


def test_constants_file(tmp_path):
    consts = defense.load_constants()
    assert consts["gradient_error_c"] > 0 and consts["bernstein_c"] > 0
    path = tmp_path / "c.txt"
    defense.write_constants(path, {"x": 1.5}, {"x": "test"})
    assert defense.load_constants(path) == {"version": 1, "x": 1.5}
    path.write_text("something else 1\n")
    with pytest.raises(DefenseError):
        defense.load_constants(path)


def test_utility_bound_scaling():
    a = defense.utility_bound(2.0, 1.0, 0.5, 100, 0.05)
    assert defense.utility_bound(2.0, 1.0, 0.5, 400, 0.05) == pytest.approx(a / 2, rel=1e-14)
    plain = defense.utility_bound(2.0, 1.0, 0.0, 100, 0.05)
    assert plain == pytest.approx(2.0 / 10 + 2 * 2.0 * math.sqrt(2 * math.log(20) / 100))
    with pytest.raises(DefenseError):
        defense.utility_bound(0.0, 1.0, 0.0, 10, 0.05)


@pytest.mark.slow
def test_utility_monte_carlo():
    delta = 0.05
    ok = sum(defense.excess_loss_check(seed, delta=delta).ok for seed in range(200))
    assert ok / 200 >= 1 - 2 * delta


def test_utility_noisy_run_within_bound():
    chk = defense.excess_loss_check(0, T=2000, sigma=1.0)
    assert chk.ok and chk.excess >= -1e-12


def test_bound_report():
    rep = defense.bound_report(0.5, 0.1, 1.0, 30, 32, 64, 0.01)
    doc = json.loads(rep.to_json())
    assert doc["T_eps"] == 278 and doc["T_tilde"] < 278
    assert doc["params"]["T"] == 960 and doc["sigma_A"] == pytest.approx(197.5, abs=0.1)
    ep = defense.bound_report(0.5, 0.1, 1.0, 30, 32, 64, 0.01, T_mode="epochs")
    assert ep.sigma_A < rep.sigma_A and any("epoch" in n for n in ep.notes)
    nodp = defense.bound_report(None, 0.1, 1.0, 30, 32, 64, 0.01)
    assert nodp.sigma_A is None and nodp.T_tilde == nodp.T_eps
    with pytest.raises(DefenseError):
        defense.bound_report(0.5, 0.1, 1.0, 30, 32, 64, 0.01, T_mode="bogus")
