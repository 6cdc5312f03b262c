"""Regularized empirical risk and its minimizers.

The risk of a parameter matrix ``theta`` (k x p) and bias ``b`` (k) is::

    R(theta, b) = (1/n) sum_i loss(u_i, y_i) + lam * reg(theta)
    u_i = theta @ x_i + b              (scaling "none")
    u_i = theta @ x_i / sqrt(p) + b    (scaling "inv-sqrt-d")

with ``loss`` one of ``(u - y)^2``, ``log(1 + exp(-y u))`` (y in {-1, +1}) or the
softmax cross-entropy against a one-hot ``y``. ``reg`` is ``||theta||_F^2`` or a
pseudo-Huber penalty applied entrywise. The bias is never regularized.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, optimize
from scipy.special import expit, log_expit, logsumexp, softmax

from .errors import ConfigError, NumericalError
from .mixture import Dataset

LOSSES = ("squared", "logistic-binary", "multiclass-cross-entropy")
REGULARIZERS = ("l2", "pseudo-huber")
SCALINGS = ("none", "inv-sqrt-d")
METRICS = ("mse", "zero-one-argmax", "zero-one-sign")


@dataclass(frozen=True)
class ErmProblem:
    loss: str
    lam: float
    regularizer: str = "l2"
    fit_bias: bool = False
    scaling: str = "none"
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"unknown regularizer {self.regularizer!r}")
        if self.scaling not in SCALINGS:
            raise ConfigError(f"unknown scaling {self.scaling!r}")
        if not self.lam >= 0:
            raise ConfigError("lam must be nonnegative")
        if self.loss == "multiclass-cross-entropy" and self.fit_bias and self.scaling != "inv-sqrt-d":
            raise ConfigError("multiclass with bias uses the inv-sqrt-d scaling")
        if self.huber_delta <= 0:
            raise ConfigError("huber_delta must be positive")

    def to_json(self) -> dict:
        return {"loss": self.loss, "lam": self.lam, "regularizer": self.regularizer,
                "fit_bias": self.fit_bias, "scaling": self.scaling, "huber_delta": self.huber_delta}

    @classmethod
    def from_json(cls, doc: dict) -> "ErmProblem":
        try:
            return cls(loss=doc["loss"], lam=float(doc["lam"]),
                       regularizer=doc.get("regularizer", "l2"),
                       fit_bias=bool(doc.get("fit_bias", False)),
                       scaling=doc.get("scaling", "none"),
                       huber_delta=float(doc.get("huber_delta", 1.0)))
        except KeyError as exc:
            raise ConfigError(f"problem config lacks {exc.args[0]!r}") from exc


@dataclass(frozen=True)
class Estimator:
    theta: np.ndarray
    bias: np.ndarray
    scaling: str = "none"
    report: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        th = np.atleast_2d(np.asarray(self.theta, dtype=np.float64))
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float64).reshape(th.shape[0]))
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.bias))):
            raise NumericalError("estimator has non-finite entries")

    @property
    def k(self) -> int:
        return self.theta.shape[0]

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Pre-activations ``u``, shape n x k."""
        if X.shape[1] != self.theta.shape[1]:
            raise ConfigError(f"estimator dimension {self.theta.shape[1]} does not match p={X.shape[1]}")
        u = X @ self.theta.T
        if self.scaling == "inv-sqrt-d":
            u = u / np.sqrt(X.shape[1])
        return u + self.bias

    def to_json(self) -> dict:
        return {"theta": self.theta.reshape(-1).tolist(), "shape": list(self.theta.shape),
                "bias": self.bias.tolist(), "scaling": self.scaling, "report": self.report}

    @classmethod
    def from_json(cls, doc: dict) -> "Estimator":
        th = np.asarray(doc["theta"], dtype=np.float64).reshape(doc["shape"])
        return cls(th, np.asarray(doc["bias"]), doc.get("scaling", "none"), doc.get("report", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "Estimator":
        return cls.from_json(json.loads(Path(path).read_text()))


def binary_labels(y: np.ndarray) -> np.ndarray:
    """Return labels in {-1, +1}; {0, 1} inputs are mapped 0 -> -1."""
    y = np.asarray(y, dtype=np.float64)
    vals = set(np.unique(y).tolist())
    if vals <= {-1.0, 1.0}:
        return y
    if vals <= {0.0, 1.0}:
        return 2.0 * y - 1.0
    raise ConfigError(f"binary loss needs labels in {{-1, +1}} or {{0, 1}}, got {sorted(vals)[:5]}")


def _onehot(ds: Dataset) -> np.ndarray:
    if ds.y_kind == "onehot":
        return ds.y
    y = np.asarray(ds.y)
    if np.any(y != np.round(y)) or y.min() < 0 or y.max() >= ds.k:
        raise ConfigError("multiclass loss needs one-hot labels or class indices")
    out = np.zeros((ds.n, ds.k))
    out[np.arange(ds.n), y.astype(np.int64)] = 1.0
    return out


def _reg_value(theta: np.ndarray, prob: ErmProblem) -> float:
    if prob.regularizer == "l2":
        return float(np.sum(theta * theta))
    d = prob.huber_delta
    return float(np.sum(d * d * (np.sqrt(1.0 + (theta / d) ** 2) - 1.0)))


def _reg_grad(theta: np.ndarray, prob: ErmProblem) -> np.ndarray:
    if prob.regularizer == "l2":
        return 2.0 * theta
    d = prob.huber_delta
    return theta / np.sqrt(1.0 + (theta / d) ** 2)


def _reg_hess_diag(theta: np.ndarray, prob: ErmProblem) -> np.ndarray:
    if prob.regularizer == "l2":
        return np.full(theta.shape, 2.0)
    d = prob.huber_delta
    return (1.0 + (theta / d) ** 2) ** -1.5


def _targets(ds: Dataset, loss: str) -> np.ndarray:
    if loss == "squared":
        if ds.y_kind == "onehot":
            return ds.y
        return np.asarray(ds.y, dtype=np.float64)[:, None]
    if loss == "logistic-binary":
        return binary_labels(ds.y)[:, None]
    return _onehot(ds)


def _loss_terms(u: np.ndarray, t: np.ndarray, loss: str) -> np.ndarray:
    if loss == "squared":
        return np.sum((u - t) ** 2, axis=1)
    if loss == "logistic-binary":
        return -log_expit(t[:, 0] * u[:, 0])
    return logsumexp(u, axis=1) - np.sum(t * u, axis=1)


def empirical_risk(est: Estimator, ds: Dataset, prob: ErmProblem, with_reg: bool = True) -> float:
    """Mean loss plus ``lam * reg(theta)``; ``with_reg=False`` gives the bare training loss."""
    u = est.predict(ds.X)
    t = _targets(ds, prob.loss)
    if t.shape[1] != u.shape[1]:
        raise ConfigError(f"estimator has {u.shape[1]} outputs, labels have {t.shape[1]}")
    val = float(np.mean(_loss_terms(u, t, prob.loss)))
    if with_reg:
        val += prob.lam * _reg_value(est.theta, prob)
    if not np.isfinite(val):
        raise NumericalError("non-finite empirical risk")
    return val


def _design(ds: Dataset, scaling: str, fit_bias: bool) -> np.ndarray:
    Z = ds.X / np.sqrt(ds.p) if scaling == "inv-sqrt-d" else ds.X
    if fit_bias:
        Z = np.hstack([Z, np.ones((ds.n, 1))])
    return Z


def fit_ridge(ds: Dataset, lam: float, fit_bias: bool = False, scaling: str = "none") -> Estimator:
    """Closed-form minimizer of ``(1/n)||y - X theta||^2 + lam ||theta||^2``.

    Solved by Cholesky with one step of iterative refinement; multi-output
    (one-hot) targets are solved column by column.
    """
    if lam < 0:
        raise ConfigError("lam must be nonnegative")
    Z = _design(ds, scaling, fit_bias)
    T = _targets(ds, "squared")
    n, q = Z.shape
    G = Z.T @ Z / n
    reg = np.full(q, lam)
    if fit_bias:
        reg[-1] = 0.0
    G[np.diag_indices(q)] += reg
    rhs = Z.T @ T / n
    try:
        cf = linalg.cho_factor(G, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericalError("singular normal equations; use lam > 0") from exc
    piv = np.diag(cf[0]) ** 2
    if piv.min() <= 1e-12 * piv.max():
        raise NumericalError("singular normal equations; use lam > 0")
    W = linalg.cho_solve(cf, rhs, check_finite=False)
    W += linalg.cho_solve(cf, rhs - G @ W, check_finite=False)
    resid = float(np.linalg.norm(G @ W - rhs))
    if not np.all(np.isfinite(W)) or resid > 1e-6 * (1.0 + np.linalg.norm(rhs)):
        raise NumericalError(f"normal equations badly conditioned (residual {resid:.3g})")
    theta = W[:-1].T if fit_bias else W.T
    bias = W[-1] if fit_bias else np.zeros(W.shape[1])
    report = {"method": "cholesky", "iterations": 1, "residual": resid,
              "final_gradient_norm": 2.0 * resid, "converged": True}
    est = Estimator(theta, bias, scaling, report)
    prob = ErmProblem("squared", lam, fit_bias=fit_bias, scaling=scaling)
    report["objective"] = empirical_risk(est, ds, prob)
    return est


def _check_separable(Z: np.ndarray, y: np.ndarray) -> bool:
    """True iff some direction achieves y_i z_i . w >= 1 for every row."""
    A = -(y[:, None] * Z)
    res = optimize.linprog(np.zeros(Z.shape[1]), A_ub=A, b_ub=-np.ones(Z.shape[0]),
                           bounds=[(None, None)] * Z.shape[1], method="highs")
    return res.status == 0


def _newton(fun, x0: np.ndarray, tol: float, max_iter: int, label: str):
    """Damped Newton with Armijo backtracking. ``fun(x) -> (f, g, H)``."""
    x = x0.copy()
    f, g, H = fun(x)
    for it in range(max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return x, f, gnorm, it
        if it == max_iter:
            break
        try:
            step = -linalg.solve(H, g, assume_a="pos", check_finite=False)
        except (linalg.LinAlgError, ValueError):
            step = -np.linalg.lstsq(H, g, rcond=None)[0]
        slope = float(g @ step)
        if slope >= 0:
            step, slope = -g, -gnorm * gnorm
        t = 1.0
        while True:
            x_new = x + t * step
            f_new, g_new, H_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-12:
                # at float resolution: accept the full step if it lowers the gradient
                x_new = x + step
                f_new, g_new, H_new = fun(x_new)
                if np.linalg.norm(g_new) < gnorm:
                    break
                raise NumericalError(f"{label}: line search failed at gradient norm {gnorm:.3g}")
        x, f, g, H = x_new, f_new, g_new, H_new
    raise NumericalError(f"{label}: no convergence in {max_iter} iterations (gradient norm {gnorm:.3g})")


def fit_logistic(ds: Dataset, lam: float, tol: float = 1e-8, fit_bias: bool = False,
                 scaling: str = "none", max_iter: int = 200, regularizer: str = "l2",
                 huber_delta: float = 1.0) -> Estimator:
    """Newton's method on ``(1/n) sum log(1 + exp(-y u)) + lam reg(theta)``."""
    if lam < 0:
        raise ConfigError("lam must be nonnegative")
    prob = ErmProblem("logistic-binary", lam, regularizer, fit_bias, scaling, huber_delta)
    y = binary_labels(ds.y)
    Z = _design(ds, scaling, fit_bias)
    n, q = Z.shape
    if lam == 0 and _check_separable(Z, y):
        raise ConfigError("data are linearly separable and lam = 0: the risk has no minimizer")
    nreg = q - 1 if fit_bias else q

    def fun(w):
        m = y * (Z @ w)
        f = -np.mean(log_expit(m))
        th = w[:nreg]
        f += lam * _reg_value(th, prob)
        g = -(Z.T @ (y * expit(-m))) / n
        g[:nreg] += lam * _reg_grad(th, prob)
        s = expit(m) * expit(-m)
        H = (Z.T * s) @ Z / n
        H[np.arange(nreg), np.arange(nreg)] += lam * _reg_hess_diag(th, prob)
        return f, g, H

    w, f, gnorm, it = _newton(fun, np.zeros(q), tol, max_iter, "fit_logistic")
    theta = w[:nreg][None, :]
    bias = w[nreg:] if fit_bias else np.zeros(1)
    report = {"method": "newton", "iterations": it, "final_gradient_norm": gnorm,
              "objective": float(f), "converged": True}
    return Estimator(theta, bias, scaling, report)


def fit_multiclass(ds: Dataset, prob: ErmProblem, tol: float = 1e-8, max_iter: int = 200) -> Estimator:
    """Newton's method on the softmax cross-entropy risk in (W, b).

    The loss is invariant to a common shift of all outputs; the bias is
    reported in the gauge ``sum(b) = 0`` and the Newton system is made
    definite along that direction by adding ``1 1^T`` to the bias block.
    """
    if prob.loss != "multiclass-cross-entropy":
        raise ConfigError("fit_multiclass needs the multiclass-cross-entropy loss")
    if ds.y_kind != "onehot":
        raise ConfigError("fit_multiclass needs one-hot labels")
    if prob.lam <= 0:
        raise ConfigError("fit_multiclass needs lam > 0")
    Y = ds.y
    k = ds.k
    Z = _design(ds, prob.scaling, prob.fit_bias)
    n, q = Z.shape
    nreg = ds.p

    def unpack(w):
        return w.reshape(k, q)

    def fun(w):
        P = unpack(w)
        U = Z @ P.T
        f = float(np.mean(logsumexp(U, axis=1) - np.sum(Y * U, axis=1)))
        th = P[:, :nreg]
        f += prob.lam * _reg_value(th, prob)
        S = softmax(U, axis=1)
        G = (S - Y).T @ Z / n
        G[:, :nreg] += prob.lam * _reg_grad(th, prob)
        H = np.empty((k, q, k, q))
        for a in range(k):
            for c in range(a, k):
                wts = S[:, a] * ((a == c) - S[:, c])
                blk = (Z.T * wts) @ Z / n
                H[a, :, c, :] = blk
                H[c, :, a, :] = blk
        rd = prob.lam * _reg_hess_diag(th, prob)
        for a in range(k):
            H[a, np.arange(nreg), a, np.arange(nreg)] += rd[a]
        if prob.fit_bias:
            H[:, q - 1, :, q - 1] += 1.0
        return f, G.reshape(-1), H.reshape(k * q, k * q)

    w, f, gnorm, it = _newton(fun, np.zeros(k * q), tol, max_iter, "fit_multiclass")
    P = unpack(w)
    theta = P[:, :nreg]
    bias = P[:, nreg] - P[:, nreg].mean() if prob.fit_bias else np.zeros(k)
    report = {"method": "newton", "iterations": it, "final_gradient_norm": gnorm,
              "objective": float(f), "converged": True}
    return Estimator(theta, bias, prob.scaling, report)


def fit(ds: Dataset, prob: ErmProblem, tol: float = 1e-8) -> Estimator:
    """Dispatch on ``prob.loss``."""
    if prob.loss == "squared":
        if prob.regularizer != "l2":
            raise ConfigError("squared loss is solved in closed form for the l2 regularizer only")
        return fit_ridge(ds, prob.lam, prob.fit_bias, prob.scaling)
    if prob.loss == "logistic-binary":
        return fit_logistic(ds, prob.lam, tol, prob.fit_bias, prob.scaling,
                            regularizer=prob.regularizer, huber_delta=prob.huber_delta)
    return fit_multiclass(ds, prob, tol)


def test_error(est: Estimator, ds: Dataset, metric: str) -> float:
    """Mean squared residual, or misclassification rate under argmax / sign."""
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}; expected one of {METRICS}")
    u = est.predict(ds.X)
    if metric == "mse":
        if ds.y_kind == "onehot":
            return float(np.mean(np.sum((u - ds.y) ** 2, axis=1)))
        if u.shape[1] != 1:
            raise ConfigError("mse on scalar labels needs a single-output estimator")
        return float(np.mean((u[:, 0] - ds.y) ** 2))
    if metric == "zero-one-sign":
        if ds.y_kind != "class" or u.shape[1] != 1:
            raise ConfigError("zero-one-sign needs binary class labels and one output")
        y = binary_labels(ds.y)
        pred = np.where(u[:, 0] >= 0, 1.0, -1.0)
        return float(np.mean(pred != y))
    if ds.y_kind == "real":
        raise ConfigError("zero-one-argmax needs class labels")
    target = np.argmax(ds.y, axis=1) if ds.y_kind == "onehot" else ds.y.astype(np.int64)
    return float(np.mean(np.argmax(u, axis=1) != target))


test_error.__test__ = False  # not a pytest test when imported into test modules
