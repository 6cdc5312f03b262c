"""Reference computations that share no code with the package."""
from __future__ import annotations

import warnings

import numpy as np
from scipy import integrate, optimize, stats
from scipy.special import expit, log1p, logsumexp


def ridge_asymptotic_mse(sigma: np.ndarray, theta_star: np.ndarray, noise_var: float, lam: float, n: int) -> float:
    """Deterministic-equivalent test MSE of mean-form ridge ``(1/n)||y - X theta||^2 + lam ||theta||^2``
    on centered Gaussian data with diagonal covariance ``sigma`` and a linear teacher."""
    def fixed(k):
        return k - lam - k * np.sum(sigma / (sigma + k)) / n

    kappa = optimize.brentq(fixed, lam, lam + np.sum(sigma) / n + 10.0, xtol=1e-15, rtol=1e-15)
    df2 = np.sum(sigma ** 2 / (sigma + kappa) ** 2)
    shrink = 1.0 - df2 / n
    bias = kappa ** 2 * np.sum(sigma * theta_star ** 2 / (sigma + kappa) ** 2) / shrink
    var = noise_var * (df2 / n) / shrink
    return float(noise_var + bias + var)


def prox_scalar(loss: str, y: float, V: float, omega: float) -> float:
    """``argmin_u loss(y, u) + (u - omega)^2 / (2 V)`` by bracketed root search on the
    (strictly increasing) derivative; value-based search would stall at sqrt(eps)."""
    if loss == "logistic-binary":
        g = lambda u: -y * expit(-y * u) + (u - omega) / V
    else:
        g = lambda u: 2.0 * (u - y) + (u - omega) / V
    span = 10.0 * (1.0 + V) * (1.0 + abs(omega) + abs(y))
    return float(optimize.brentq(g, omega - span, omega + span, xtol=1e-15, rtol=8.9e-16, maxiter=500))


def gaussian_posterior(X, y, lam: float, beta: float, tau: float):
    """Mean and covariance of ``exp(-beta n R) N(0, tau^2 I)`` for mean-form ridge ``R``."""
    n, p = X.shape
    A = 2 * beta * (X.T @ X + n * lam * np.eye(p)) + np.eye(p) / tau ** 2
    cov = np.linalg.inv(A)
    return cov @ (2 * beta * X.T @ y), cov


def ridge_log_partition(X, y, lam: float, beta: float, tau: float) -> float:
    """``log int exp(-beta n R) dN(0, tau^2 I)`` in closed form."""
    n, p = X.shape
    A = 2 * beta * (X.T @ X + n * lam * np.eye(p)) + np.eye(p) / tau ** 2
    b = 2 * beta * X.T @ y
    _, logdet = np.linalg.slogdet(A)
    return float(-p * np.log(tau) - 0.5 * logdet + 0.5 * b @ np.linalg.solve(A, b) - beta * (y @ y))


def logistic_risk(theta, X, y, lam):
    return np.mean(np.logaddexp(0.0, -y * (X @ theta))) + lam * theta @ theta


def logistic_grid_minimizer(X, y, lam: float, half_width: float = 6.0, m: int = 401, rounds: int = 4):
    """Brute-force 2-D minimizer by repeated grid refinement; returns (theta, final spacing).

    Four rounds end near 2e-7; finer grids fall below what float64 risk values can resolve.
    """
    center = np.zeros(2)
    h = half_width
    for _ in range(rounds):
        g = np.linspace(-h, h, m)
        T = np.stack(np.meshgrid(center[0] + g, center[1] + g, indexing="ij"), -1).reshape(-1, 2)
        U = X @ T.T
        R = np.mean(np.logaddexp(0.0, -y[:, None] * U), axis=0) + lam * np.sum(T * T, axis=1)
        center = T[np.argmin(R)]
        spacing = g[1] - g[0]
        h = 4 * spacing
    return center, float(spacing)


def logistic_log_partition_grid(X, y, lam: float, beta: float, tau: float, half_width: float = 8.0,
                                m: int = 801) -> float:
    """``log int exp(-beta n R) dN(0, tau^2 I)`` by dense 2-D trapezoid quadrature."""
    n = X.shape[0]
    g = np.linspace(-half_width, half_width, m)
    T = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    U = X @ T.T
    R = np.mean(np.logaddexp(0.0, -y[:, None] * U), axis=0) + lam * np.sum(T * T, axis=1)
    logw = -beta * n * R - 0.5 * np.sum(T * T, axis=1) / tau ** 2 - np.log(2 * np.pi * tau ** 2)
    dA = (g[1] - g[0]) ** 2
    return float(logsumexp(logw) + np.log(dA))


def gaussian_feature_mean(act, m: float, s: float) -> float:
    """``E act(m + s g)`` by adaptive quadrature."""
    f = lambda z: act(m + s * z) * stats.norm.pdf(z)
    return float(integrate.quad(f, -12, 12, limit=200, epsabs=1e-13)[0])


def ks_two_sample(a, b) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # p-value path for tiny samples
        return float(stats.ks_2samp(a, b, method="asymp").statistic)


def w1_two_sample(a, b) -> float:
    return float(stats.wasserstein_distance(a, b))


def shift_ks(delta: float) -> float:
    """KS distance between N(0,1) and N(delta,1)."""
    return float(stats.norm.cdf(delta / 2) - stats.norm.cdf(-delta / 2))


def logistic_bias_scalar(means, var, weights, V):
    """Bias root of ``sum_k rho_k E[f_k] = 0`` for the scalar logistic channel (labels parity +-1),
    by bisection over ``b`` with fields ``omega ~ N(mean_k + b, var_k)``."""
    x, w = np.polynomial.hermite_e.hermegauss(80)
    w = w / w.sum()
    labels = np.where(np.arange(len(means)) % 2 == 1, 1.0, -1.0)

    def resid(b):
        tot = 0.0
        for k, (m, v) in enumerate(zip(means, var)):
            om = m + b + np.sqrt(v) * x
            h = np.array([prox_scalar("logistic-binary", labels[k], V, o) for o in om])
            tot += weights[k] * np.sum(w * (h - om) / V)
        return tot

    return optimize.brentq(resid, -20, 20, xtol=1e-12)


def sigmoid(u):
    return expit(u)


def log1pexp(u):
    return np.logaddexp(0.0, u)


__all__ = [n for n in dir() if not n.startswith("_") and n not in ("np", "integrate", "optimize", "stats",
                                                                    "expit", "log1p", "logsumexp", "warnings")]
