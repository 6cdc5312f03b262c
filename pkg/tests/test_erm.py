import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import optimize

import oracles
from conftest import binary_dataset, real_dataset
from ulab.erm import (ErmProblem, Estimator, empirical_risk, fit, fit_logistic, fit_multiclass, fit_ridge,
                      test_error)
from ulab.errors import ConfigError, NumericalError
from ulab.mixture import Dataset, TeacherSpec, build_gmm_spec, label_dataset, sample_mixture
from ulab.rng import stream


def _ridge_data(n=50, p=8, seed=0):
    g = np.random.default_rng(seed)
    X = g.standard_normal((n, p))
    return real_dataset(X, X @ g.standard_normal(p) + 0.3 * g.standard_normal(n))


@given(st.integers(5, 60), st.integers(1, 12), st.floats(1e-4, 10.0), st.booleans(), st.integers(0, 999))
def test_ridge_normal_equations(n, p, lam, bias, seed):
    g = np.random.default_rng(seed)
    X = g.standard_normal((n, p)) + 0.5
    ds = real_dataset(X, g.standard_normal(n) + 2.0)
    est = fit_ridge(ds, lam, fit_bias=bias)
    Z = np.hstack([X, np.ones((n, 1))]) if bias else X
    w = np.concatenate([est.theta[0], est.bias]) if bias else est.theta[0]
    reg = np.full(Z.shape[1], lam)
    if bias:
        reg[-1] = 0.0
    G = Z.T @ Z / n + np.diag(reg)
    r = G @ w - Z.T @ ds.y / n
    assert np.linalg.norm(r) <= 1e-10 * (1 + np.linalg.norm(Z.T @ ds.y / n))


def test_ridge_scaling_relation():
    ds = _ridge_data()
    lam = 0.2
    a = fit_ridge(ds, lam * ds.p)
    b = fit_ridge(ds, lam, scaling="inv-sqrt-d")
    assert np.allclose(b.theta, np.sqrt(ds.p) * a.theta, rtol=1e-10)
    assert np.allclose(a.predict(ds.X), b.predict(ds.X), rtol=1e-10)


def test_ridge_zero_lambda_singular():
    ds = real_dataset(np.ones((3, 5)), np.arange(3.0))
    with pytest.raises(NumericalError):
        fit_ridge(ds, 0.0)


def test_logistic_matches_grid(frozen):
    g = frozen["logistic_grid"]
    X, y = np.array(g["X"]), np.array(g["y"])
    th, h = oracles.logistic_grid_minimizer(X, y, g["lam"])
    assert np.allclose(th, g["theta"], atol=h)
    est = fit_logistic(binary_dataset(X, y), g["lam"])
    assert np.max(np.abs(est.theta[0] - np.array(g["theta"]))) <= g["spacing"]
    assert est.report["final_gradient_norm"] < 1e-8


@given(st.integers(10, 80), st.integers(1, 6), st.floats(1e-3, 1.0), st.booleans(), st.integers(0, 999))
def test_logistic_stationary_and_minimal(n, p, lam, bias, seed):
    g = np.random.default_rng(seed)
    X = g.standard_normal((n, p))
    y = np.where(g.random(n) < 0.5, -1.0, 1.0)
    ds = binary_dataset(X, y)
    prob = ErmProblem("logistic-binary", lam, fit_bias=bias)
    est = fit(ds, prob)
    base = empirical_risk(est, ds, prob)
    for _ in range(5):
        d = 1e-3 * g.standard_normal(p)
        pert = Estimator(est.theta + d, est.bias + (1e-3 * g.standard_normal(1) if bias else 0.0))
        assert empirical_risk(pert, ds, prob) >= base - 1e-12


def test_logistic_separable_without_penalty():
    X = np.array([[1.0], [2.0], [-1.0], [-2.0]])
    with pytest.raises(ConfigError):
        fit_logistic(binary_dataset(X, np.array([1.0, 1.0, -1.0, -1.0])), 0.0)


def test_pseudo_huber_matches_generic_minimizer():
    g = np.random.default_rng(4)
    X = g.standard_normal((40, 3))
    y = np.where(X[:, 0] + 0.5 * g.standard_normal(40) > 0, 1.0, -1.0)
    prob = ErmProblem("logistic-binary", 0.1, regularizer="pseudo-huber", huber_delta=0.5)
    est = fit(binary_dataset(X, y), prob)
    f = lambda w: (np.mean(np.logaddexp(0, -y * (X @ w)))
                   + 0.1 * np.sum(0.25 * (np.sqrt(1 + (w / 0.5) ** 2) - 1)))
    ref = optimize.minimize(f, np.zeros(3), method="BFGS", options={"gtol": 1e-10}).x
    assert np.allclose(est.theta[0], ref, atol=1e-6)


def _three_class(n=600, seed=0):
    spec = build_gmm_spec([0.3, 0.3, 0.4], [[2.0, 0.0], [-1.0, 1.5], [-1.0, -1.5]], [[1.0, 1.0]] * 3)
    ds = sample_mixture(spec, n, stream(seed))
    return label_dataset(ds, TeacherSpec("cluster-index", onehot=True), stream(seed, 1))


def test_multiclass_stationary_and_gauge():
    ds = _three_class()
    prob = ErmProblem("multiclass-cross-entropy", 0.01, fit_bias=True, scaling="inv-sqrt-d")
    est = fit(ds, prob)
    assert abs(est.bias.sum()) < 1e-12
    U = est.predict(ds.X)
    P = np.exp(U - U.max(1, keepdims=True))
    P /= P.sum(1, keepdims=True)
    G = (P - ds.y).T @ ds.X / np.sqrt(ds.p) / ds.n + 2 * 0.01 * est.theta
    assert np.abs(G).max() < 1e-8
    assert np.abs((P - ds.y).mean(0)).max() < 1e-8
    assert test_error(est, ds, "zero-one-argmax") < 0.1
    with pytest.raises(ConfigError):
        fit_multiclass(ds, ErmProblem("multiclass-cross-entropy", 0.0))


def test_risk_definition():
    ds = _ridge_data(20, 3)
    est = Estimator(np.array([[0.1, -0.2, 0.3]]), np.array([0.5]))
    prob = ErmProblem("squared", 0.7)
    u = ds.X @ est.theta[0] + 0.5
    assert np.isclose(empirical_risk(est, ds, prob), np.mean((u - ds.y) ** 2) + 0.7 * 0.14)
    assert np.isclose(empirical_risk(est, ds, prob, with_reg=False), np.mean((u - ds.y) ** 2))


def test_metrics():
    X = np.array([[1.0], [-1.0], [2.0], [-0.5]])
    ds = binary_dataset(X, np.array([1.0, -1.0, -1.0, 1.0]))
    est = Estimator(np.array([[1.0]]), np.zeros(1))
    assert test_error(est, ds, "zero-one-sign") == 0.5
    with pytest.raises(ConfigError):
        test_error(est, ds, "hinge")
    r = real_dataset(X, np.zeros(4))
    assert np.isclose(test_error(est, r, "mse"), np.mean(X[:, 0] ** 2))


def test_problem_validation():
    with pytest.raises(ConfigError):
        ErmProblem("hinge", 0.1)
    with pytest.raises(ConfigError):
        ErmProblem("squared", -1.0)
    with pytest.raises(ConfigError):
        ErmProblem("multiclass-cross-entropy", 0.1, fit_bias=True)
    p = ErmProblem("logistic-binary", 0.3, fit_bias=True)
    assert ErmProblem.from_json(p.to_json()) == p


def test_estimator_roundtrip(tmp_path):
    est = Estimator(np.arange(6.0).reshape(2, 3), np.array([1.0, -1.0]), "inv-sqrt-d", {"a": 1})
    est.save(tmp_path / "e.json")
    back = Estimator.load(tmp_path / "e.json")
    assert np.array_equal(back.theta, est.theta) and np.array_equal(back.bias, est.bias)
    assert back.scaling == "inv-sqrt-d"
    with pytest.raises(NumericalError):
        Estimator(np.array([[np.nan]]), np.zeros(1))
