import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ttrefine.graph_spectra import NumericError
from ttrefine.linear_ttt import (
    DimerGenerator,
    LinearTTTModel,
    conditions_hold,
    decrease_threshold,
    fit_heads_least_squares,
    main_loss,
    prior_loss,
    run_trial,
    ttt_step,
    verify_theorem,
)


def instance(seed, f=6, d=3, n=30):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, f))
    R = rng.normal(size=(f, d))
    return rng, X, R


def test_column_space_target_has_zero_residual():
    rng, X, R = instance(0)
    w = rng.normal(size=3)
    yP = X @ R @ w
    p, m = fit_heads_least_squares(R, X, yP, yP)
    assert np.allclose(X @ R @ p, yP, atol=1e-10)
    assert np.array_equal(p, m)


@given(seed=st.integers(0, 10_000))
def test_least_squares_matches_pseudo_inverse(seed):
    rng, X, R = instance(seed)
    yP, yM = rng.normal(size=30), rng.normal(size=30)
    p, m = fit_heads_least_squares(R, X, yP, yM)
    A = X @ R
    pinv = np.linalg.pinv(A)
    assert np.allclose(p, pinv @ yP, atol=1e-8) and np.allclose(m, pinv @ yM, atol=1e-8)


def test_rank_deficiency_raises_with_singular_value():
    _, X, R = instance(1)
    R[:, 2] = R[:, 1]
    with pytest.raises(NumericError, match="singular value"):
        fit_heads_least_squares(R, X, np.zeros(30), np.zeros(30))


def test_step_identities():
    rng, X, R = instance(2)
    p = rng.normal(size=3)
    x = X[0]
    model = LinearTTTModel(R, p, p, eta=0.1)
    assert np.array_equal(ttt_step(model, x, float(x @ R @ p)), R)
    assert np.array_equal(ttt_step(LinearTTTModel(R, p, p, eta=0.0), x, 3.0), R)


@given(seed=st.integers(0, 10_000))
def test_step_is_negative_gradient(seed):
    rng, X, R = instance(seed)
    p, x, ep, eta = rng.normal(size=3), X[0], float(rng.normal()), 1e-3
    step = (R - ttt_step(LinearTTTModel(R, p, p, eta), x, ep)) / eta
    h = 1e-6
    fd = np.zeros_like(R)
    for i in range(R.shape[0]):
        for j in range(R.shape[1]):
            Rp, Rm = R.copy(), R.copy()
            Rp[i, j] += h
            Rm[i, j] -= h
            fd[i, j] = (prior_loss(Rp, p, x, ep) - prior_loss(Rm, p, x, ep)) / (2 * h)
    assert np.linalg.norm(step - fd) <= 1e-6 * np.linalg.norm(fd)


def test_scalar_instance_decreases_main_loss():
    model = LinearTTTModel(R=np.array([[2.0]]), m=np.array([1.5]), p=np.array([1.5]), eta=0.01)
    x = np.array([1.0])
    E_P, E_M = 5.0, 4.0  # both heads underpredict 3.0
    assert conditions_hold(model, x, E_P, E_M) == (True, True)
    R2 = ttt_step(model, x, E_P)
    assert main_loss(R2, model.m, x, E_M) < main_loss(model.R, model.m, x, E_M)


def test_bisection_threshold_matches_closed_form():
    # main loss after the step is 1/2 (r_M - eta r_P |x|^2 p.m)^2 with residuals
    # r = target - prediction, so it decreases iff 0 < eta < 2 r_M / (r_P |x|^2 p.m)
    rng = np.random.default_rng(5)
    R, p, m, x = rng.normal(size=(4, 2)), np.array([1.0, 0.5]), np.array([0.8, 0.9]), rng.normal(size=4)
    model = LinearTTTModel(R, m, p)
    E_P, E_M = float(x @ R @ p) + 2.0, float(x @ R @ m) + 1.0
    closed = 2 * 1.0 / (2.0 * (x @ x) * (p @ m))
    assert decrease_threshold(model, x, E_P, E_M) == pytest.approx(closed, rel=1e-9)


def test_inner_product_gate_excludes_trial():
    model = LinearTTTModel(R=np.eye(2), m=np.array([1.0, 0.0]), p=np.array([-1.0, 0.0]))
    x = np.array([1.0, 0.0])
    # prior says 2 vs predicted -1, main says 3 vs predicted 1: signs agree, p.m < 0
    assert conditions_hold(model, x, 2.0, 3.0) == (True, False)


def test_run_trial_gating(monkeypatch):
    import ttrefine.linear_ttt as lt

    real = lt.fit_heads_least_squares

    def flipped(R, X, yP, yM):
        p, m = real(R, X, yP, yM)
        return p, -p * np.abs(m).sum()  # forces p.m < 0

    monkeypatch.setattr(lt, "fit_heads_least_squares", flipped)
    res = run_trial(DimerGenerator(), np.random.default_rng(0), 1e-4)
    assert res.status in ("excluded_inner", "inconclusive")
    report = lt.TheoremReport([res], 1e-4)
    assert report.satisfying == 0


def test_verify_theorem_report(tmp_path):
    report = verify_theorem(trials=50, seed=3)
    assert len(report.trials) == 50
    sat = [t for t in report.trials if t.status in ("decrease", "no_decrease")]
    assert sat and all(t.eta_threshold > 0 for t in sat)
    csv = report.to_csv().splitlines()
    assert csv[0].startswith("trial,pair,status") and len(csv) == 51
    assert "success_rate=" in report.summary()
    again = verify_theorem(trials=50, seed=3)
    assert again.to_csv() == report.to_csv()
