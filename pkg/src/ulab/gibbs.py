"""Gibbs measures ``exp(-beta * n * R(theta)) * prior(theta)`` over estimator parameters.

All temperatures use the extensive convention: the exponent is ``beta * n``
times the mean-form empirical risk, so ``beta`` is comparable across sample
sizes. A measure written with ``exp(-beta' * R)`` corresponds to
``beta = beta' / n``.

Free energies are ``-(1/n) log Z`` with ``Z = int exp(-beta n R) dprior`` and a
normalized prior.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, linalg
from scipy.special import expit, log_expit, logsumexp

from .erm import ErmProblem, Estimator, _design, _reg_grad, _reg_hess_diag, _reg_value, _newton, binary_labels
from .errors import ConfigError, NumericalError
from .mixture import Dataset
from .rng import as_generator

TARGET_ACCEPT = 0.57
TI_POINTS = 32


@dataclass(frozen=True)
class Prior:
    """``gaussian`` with per-coordinate variance ``scale**2``, or ``uniform-ball`` of radius ``scale``."""

    kind: str = "gaussian"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform-ball"):
            raise ConfigError(f"unknown prior {self.kind!r}")
        if not self.scale > 0:
            raise ConfigError("prior scale must be positive")

    def sample(self, q: int, size: int, rng) -> np.ndarray:
        rng = as_generator(rng)
        g = rng.standard_normal((size, q))
        if self.kind == "gaussian":
            return self.scale * g
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return self.scale * g * rng.random((size, 1)) ** (1.0 / q)

    def neg_log_density(self, W: np.ndarray) -> np.ndarray:
        """Up to the normalizing constant (which cancels in MCMC)."""
        if self.kind == "gaussian":
            return 0.5 * np.sum(W * W, axis=-1) / self.scale ** 2
        return np.where(np.sum(W * W, axis=-1) <= self.scale ** 2, 0.0, np.inf)


@dataclass(frozen=True)
class GibbsConfig:
    beta: float
    n_steps: int = 6000
    burn_in: int = 2000
    thinning: int = 1
    step_size: float | None = None
    prior: Prior = field(default_factory=Prior)
    target_accept: float = TARGET_ACCEPT

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if not 0 <= self.burn_in < self.n_steps:
            raise ConfigError("need 0 <= burn_in < n_steps (an empty chain was requested)")
        if self.thinning < 1:
            raise ConfigError("thinning must be at least 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError("step_size must be positive")

    @property
    def n_samples(self) -> int:
        return (self.n_steps - self.burn_in) // self.thinning


@dataclass(frozen=True)
class SampleChain:
    """Post-burn-in samples, shape (L, k, p), with biases (L, k) when fitted."""

    samples: np.ndarray
    bias: np.ndarray
    acceptance_rate: float
    config: GibbsConfig
    scaling: str = "none"
    risks: np.ndarray | None = None
    step_size: float = 0.0

    def __post_init__(self):
        if self.samples.shape[0] == 0:
            raise ConfigError("empty chain")
        if not np.all(np.isfinite(self.samples)):
            raise NumericalError("chain has non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]


class _Energy:
    """``beta * n * R(w) + prior(w)`` for a single-output problem in flat coordinates."""

    def __init__(self, prob: ErmProblem, ds: Dataset, beta: float, prior: Prior):
        if prob.loss not in ("squared", "logistic-binary"):
            raise ConfigError("Gibbs sampling supports the squared and logistic-binary losses")
        self.prob, self.beta, self.prior = prob, beta, prior
        self.Z = _design(ds, prob.scaling, prob.fit_bias)
        if prob.loss == "squared":
            if ds.y_kind == "onehot":
                raise ConfigError("Gibbs sampling is single-output")
            self.y = np.asarray(ds.y, dtype=np.float64)
        else:
            self.y = binary_labels(ds.y)
        self.n, self.q = self.Z.shape
        self.p = ds.p
        self.nreg = self.p

    def risk_parts(self, W):
        """Mean risk, its gradient and the loss-curvature weights for a batch W (C x q)."""
        U = W @ self.Z.T
        if self.prob.loss == "squared":
            r = U - self.y
            loss = np.mean(r * r, axis=1)
            gl = 2.0 * r / self.n
            curv = 2.0 * np.ones_like(U)
        else:
            m = self.y * U
            loss = -np.mean(log_expit(m), axis=1)
            gl = -(self.y * expit(-m)) / self.n
            curv = expit(U) * expit(-U)
        th = W[:, :self.nreg]
        lam = self.prob.lam
        reg = lam * np.array([_reg_value(t, self.prob) for t in th]) if lam else np.zeros(W.shape[0])
        g = gl @ self.Z
        if lam:
            g[:, :self.nreg] += lam * _reg_grad(th, self.prob)
        return loss + reg, g, curv

    def risk(self, W):
        return self.risk_parts(np.atleast_2d(W))[0]

    def __call__(self, W):
        R, gR, _ = self.risk_parts(W)
        bn = self.beta * self.n
        E = bn * R + self.prior.neg_log_density(W)
        G = bn * gR
        if self.prior.kind == "gaussian":
            G = G + W / self.prior.scale ** 2
        return E, G, R

    def hessian(self, w):
        _, _, curv = self.risk_parts(w[None])
        bn = self.beta * self.n
        H = bn * (self.Z.T * curv[0]) @ self.Z / self.n
        if self.prob.lam:
            H[np.arange(self.nreg), np.arange(self.nreg)] += bn * self.prob.lam * _reg_hess_diag(w[:self.nreg], self.prob)
        if self.prior.kind == "gaussian":
            H[np.diag_indices(self.q)] += 1.0 / self.prior.scale ** 2
        else:
            H[np.diag_indices(self.q)] += (self.q + 2.0) / self.prior.scale ** 2
        return H

    def mode(self) -> np.ndarray:
        """Maximum a posteriori point by Newton's method (Gaussian prior)."""
        def fun(w):
            E, G, _ = self(w[None])
            return float(E[0]), G[0], self.hessian(w)

        scale = 1.0 + self.beta * self.n
        w, *_ = _newton(fun, np.zeros(self.q), 1e-7 * scale, 200, "Gibbs mode")
        return w


def _energy_from(en: _Energy, prior: Prior) -> _Energy:
    out = object.__new__(_Energy)
    out.__dict__.update(en.__dict__)
    out.prior = prior
    return out


def _unit_mode(en: _Energy) -> np.ndarray:
    if en.prior.kind == "gaussian":
        return en.mode()
    g = _energy_from(en, Prior("gaussian", en.prior.scale))
    w = g.mode()
    nrm = np.linalg.norm(w)
    return w if nrm < en.prior.scale else w * (0.99 * en.prior.scale / nrm)


def _mala(en: _Energy, cfg: GibbsConfig, n_chains: int, rng, start=None, whitened: list | None = None):
    """Preconditioned MALA on ``n_chains`` parallel chains sharing one adapted step size.

    If ``whitened`` is a list, the kept whitened states and energy gradients
    are appended to it as ``(X, G)`` arrays of shape chains x L x q.
    """
    rng = as_generator(rng)
    if en.prior.kind == "uniform-ball" and en.q > 20:
        raise ConfigError("uniform-ball prior is supported up to 20 parameters")
    w0 = _unit_mode(en)
    H = en.hessian(w0)
    try:
        Lh = linalg.cholesky(0.5 * (H + H.T), lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("preconditioner Hessian is not positive definite") from exc
    # theta = w0 + L x with L L^T = H^{-1}: L = Lh^{-T}
    Lt = linalg.solve_triangular(Lh, np.eye(en.q), lower=True).T

    def to_w(X):
        return w0 + X @ Lt.T

    def energy(X):
        E, G, R = en(to_w(X))
        return E, G @ Lt, R

    q = en.q
    X = rng.standard_normal((n_chains, q)) if start is None else start
    if en.prior.kind == "uniform-ball":
        X *= 0.1
    E, G, R = energy(X)
    if not np.all(np.isfinite(E)):
        raise NumericalError("non-finite energy at chain start")
    eps = cfg.step_size if cfg.step_size is not None else 1.2 * q ** (-1.0 / 6.0)
    log_eps = np.log(eps)
    keep = []
    keep_R = []
    keep_x, keep_g = [], []
    acc_sum, acc_n = 0.0, 0
    for t in range(cfg.n_steps):
        eps = np.exp(log_eps)
        Z = rng.standard_normal((n_chains, q))
        Xp = X - 0.5 * eps * eps * G + eps * Z
        Ep, Gp, Rp = energy(Xp)
        fwd = np.sum(Z * Z, axis=1) * 0.5
        back = Xp - 0.5 * eps * eps * Gp - X
        bwd = np.sum(back * back, axis=1) / (2 * eps * eps)
        with np.errstate(invalid="ignore", over="ignore"):
            log_a = -(Ep - E) - bwd + fwd
        log_a = np.where(np.isfinite(log_a), log_a, -np.inf)
        a = np.exp(np.minimum(log_a, 0.0))
        accept = np.log(rng.random(n_chains)) < log_a
        X = np.where(accept[:, None], Xp, X)
        E = np.where(accept, Ep, E)
        G = np.where(accept[:, None], Gp, G)
        R = np.where(accept, Rp, R)
        if t < cfg.burn_in and cfg.step_size is None:
            gamma = (t + 10.0) ** -0.6
            log_eps += gamma * (float(a.mean()) - cfg.target_accept)
        elif t >= cfg.burn_in:
            acc_sum += float(accept.sum())
            acc_n += n_chains
            if (t - cfg.burn_in) % cfg.thinning == 0:
                keep.append(to_w(X))
                keep_R.append(R.copy())
                if whitened is not None:
                    keep_x.append(X.copy())
                    keep_g.append(G.copy())
    rate = acc_sum / max(acc_n, 1)
    if rate < 0.05:
        raise NumericalError(f"acceptance collapsed to {rate:.3f} after adaptation")
    W = np.stack(keep, axis=1)  # chains x L x q
    if not np.all(np.isfinite(W)):
        raise NumericalError("non-finite samples")
    if whitened is not None:
        whitened.append((np.stack(keep_x, axis=1), np.stack(keep_g, axis=1)))
    return W, np.stack(keep_R, axis=1), rate, float(np.exp(log_eps))


def _to_chain(W, Rs, rate, eps, en: _Energy, cfg: GibbsConfig) -> SampleChain:
    p = en.p
    theta = W[:, :p][:, None, :]
    bias = W[:, p:] if en.prob.fit_bias else np.zeros((W.shape[0], 1))
    return SampleChain(theta, bias, rate, cfg, en.prob.scaling, Rs, eps)


def gibbs_chains(prob: ErmProblem, ds: Dataset, cfg: GibbsConfig, rng, n_chains: int = 4) -> list[SampleChain]:
    """Independent chains advanced in lockstep (one shared, burn-in adapted step size)."""
    en = _Energy(prob, ds, cfg.beta, cfg.prior)
    W, Rs, rate, eps = _mala(en, cfg, n_chains, rng)
    return [_to_chain(W[c], Rs[c], rate, eps, en, cfg) for c in range(n_chains)]


def gibbs_chain(prob: ErmProblem, ds: Dataset, cfg: GibbsConfig, rng) -> SampleChain:
    """Metropolis-adjusted Langevin chain targeting ``exp(-beta n R) prior``.

    Proposals are preconditioned by the inverse Hessian of the energy at its
    mode; the step size adapts toward 0.57 acceptance during burn-in and is
    frozen afterwards.
    """
    return gibbs_chains(prob, ds, cfg, rng, n_chains=1)[0]


def merge_chains(chains: Sequence[SampleChain]) -> SampleChain:
    c0 = chains[0]
    return SampleChain(np.concatenate([c.samples for c in chains]), np.concatenate([c.bias for c in chains]),
                       float(np.mean([c.acceptance_rate for c in chains])), c0.config, c0.scaling,
                       None if c0.risks is None else np.concatenate([c.risks for c in chains]), c0.step_size)


def posterior_mean(chain: SampleChain) -> Estimator:
    if len(chain) == 0:
        raise ConfigError("empty chain")
    return Estimator(chain.samples.mean(axis=0), chain.bias.mean(axis=0), chain.scaling,
                     {"n_samples": len(chain), "acceptance_rate": chain.acceptance_rate})


def _batch_se(x: np.ndarray, n_batches: int = 20) -> float:
    """Standard error of the mean of a correlated series by non-overlapping batch means."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    nb = min(n_batches, x.size)
    if nb < 2:
        return 0.0
    m = x[: (x.size // nb) * nb].reshape(nb, -1).mean(axis=1)
    return float(m.std(ddof=1) / np.sqrt(nb))


# ----------------------------------------------------------------------------- free energy

def log_partition_analytic(prob: ErmProblem, ds: Dataset, beta: float, prior: Prior) -> float:
    """``log int exp(-beta n R) dN(0, scale^2 I)`` for the squared loss with l2 penalty."""
    if prob.loss != "squared" or prob.regularizer != "l2" or prior.kind != "gaussian":
        raise ConfigError("the closed form needs squared loss, l2 penalty and a Gaussian prior")
    Z = _design(ds, prob.scaling, prob.fit_bias)
    y = np.asarray(ds.y, dtype=np.float64)
    n, q = Z.shape
    D = np.ones(q)
    if prob.fit_bias:
        D[-1] = 0.0
    tau2 = prior.scale ** 2
    A = 2 * beta * (Z.T @ Z + n * prob.lam * np.diag(D)) + np.eye(q) / tau2
    b = 2 * beta * Z.T @ y
    c = beta * float(y @ y)
    cf = linalg.cho_factor(A)
    logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    return -0.5 * q * np.log(tau2) - 0.5 * logdet + 0.5 * float(b @ linalg.cho_solve(cf, b)) - c


def posterior_gaussian(prob: ErmProblem, ds: Dataset, beta: float, prior: Prior):
    """Exact mean and covariance of the Gibbs measure for squared loss (flat coordinates)."""
    Z = _design(ds, prob.scaling, prob.fit_bias)
    y = np.asarray(ds.y, dtype=np.float64)
    n, q = Z.shape
    D = np.ones(q)
    if prob.fit_bias:
        D[-1] = 0.0
    A = 2 * beta * (Z.T @ Z + n * prob.lam * np.diag(D)) + np.eye(q) / prior.scale ** 2
    cov = np.linalg.inv(A)
    return cov @ (2 * beta * Z.T @ y), 0.5 * (cov + cov.T)


def log_partition_grid(prob: ErmProblem, ds: Dataset, beta: float, prior: Prior,
                       points: int = 801, half_width: float | None = None) -> float:
    """Dense tensor-grid quadrature of ``log Z`` for up to 3 parameters."""
    en = _Energy(prob, ds, beta, prior)
    if en.q > 3:
        raise ConfigError("grid quadrature is limited to 3 parameters")
    if half_width is None:
        half_width = prior.scale * (8.0 if prior.kind == "gaussian" else 1.0)
    axis = np.linspace(-half_width, half_width, points)
    h = axis[1] - axis[0]
    grids = np.meshgrid(*([axis] * en.q), indexing="ij")
    W = np.stack([g.reshape(-1) for g in grids], axis=1)
    logs = []
    for s in range(0, W.shape[0], 200000):
        E, _, _ = en(W[s:s + 200000])
        logs.append(-E)
    logs = np.concatenate(logs)
    if prior.kind == "gaussian":
        log_norm = -0.5 * en.q * np.log(2 * np.pi * prior.scale ** 2)
    else:
        from scipy.special import gammaln
        log_norm = -(0.5 * en.q * np.log(np.pi) + en.q * np.log(prior.scale) - gammaln(0.5 * en.q + 1))
    return float(logsumexp(logs) + en.q * np.log(h) + log_norm)


@dataclass(frozen=True)
class FreeEnergyEstimate:
    value: float
    se: float
    method: str
    diagnostics: dict = field(default_factory=dict, compare=False)


def _log_grid_weights(betas: np.ndarray) -> np.ndarray:
    """Simpson weights w_i with sum_i w_i g(beta_i) ~ int g dbeta on a log-spaced grid."""
    t = np.log(betas)
    eye = np.eye(betas.size)
    return np.array([integrate.simpson(eye[i] * betas, x=t) for i in range(betas.size)])


def stein_control_variates(X: np.ndarray, G: np.ndarray, quadratic: bool = True) -> np.ndarray:
    """Zero-mean control variates from Stein's identity ``E[phi . grad U - div phi] = 0``.

    ``X`` and ``G`` are states and energy gradients (N x q). Linear test
    functions give ``G_i``; quadratic ones give ``X_i G_j + X_j G_i - 2 delta_ij``.
    """
    cols = [G]
    if quadratic:
        i, j = np.triu_indices(X.shape[1])
        cols.append(X[:, i] * G[:, j] + X[:, j] * G[:, i] - 2.0 * (i == j))
    return np.hstack(cols)


def cv_mean(f: np.ndarray, C: np.ndarray, n_chains: int = 1) -> tuple[float, float]:
    """Control-variate adjusted mean of ``f`` and its batch-means SE.

    ``f`` and ``C`` are stacked chain by chain (``n_chains`` equal blocks).
    """
    Cc = C - C.mean(axis=0)
    coef, *_ = np.linalg.lstsq(Cc, f - f.mean(), rcond=None)
    adj = f - C @ coef
    per = adj.reshape(n_chains, -1)
    se = float(np.sqrt(np.mean([_batch_se(r) ** 2 for r in per]) / n_chains))
    return float(adj.mean()), se


def free_energy_ti(prob: ErmProblem, ds: Dataset, beta: float, prior: Prior, rng,
                   points: int = TI_POINTS, beta_min_ratio: float = 1e-4, n_steps: int = 3000,
                   burn_in: int = 800, n_chains: int = 4, control_variates: bool = True,
                   max_se: float | None = None) -> FreeEnergyEstimate:
    """Thermodynamic integration ``f(beta) = int_0^beta <R>_b db``.

    ``<R>_b`` is estimated by MALA on a log-spaced grid from ``beta_min`` to
    ``beta`` and integrated by Simpson's rule in ``log b``. On ``[0, beta_min]``
    the integrand is expanded to first order around the prior,
    ``<R>_b ~ E0[R] - b n Var0[R]``, with prior moments from direct draws.
    With a Gaussian prior each grid average uses Stein control variates.
    """
    rng = as_generator(rng)
    betas = beta * np.logspace(np.log10(beta_min_ratio), 0.0, points)
    en0 = _Energy(prob, ds, beta, prior)
    prior_draws = prior.sample(en0.q, 50000, rng)
    r0 = en0.risk(prior_draws)
    use_cv = control_variates and prior.kind == "gaussian"
    means, ses, accs = [], [], []
    for b in betas:
        en = _Energy(prob, ds, b, prior)
        cfg = GibbsConfig(beta=b, n_steps=n_steps, burn_in=burn_in, prior=prior)
        wh = [] if use_cv else None
        _, Rs, rate, _ = _mala(en, cfg, n_chains, rng, whitened=wh)
        if use_cv:
            Xw, Gw = wh[0]
            q = Xw.shape[-1]
            C = stein_control_variates(Xw.reshape(-1, q), Gw.reshape(-1, q), quadratic=q <= 40)
            m, e = cv_mean(Rs.reshape(-1), C, n_chains)
        else:
            m = float(Rs.mean())
            e = float(np.sqrt(np.mean([_batch_se(r) ** 2 for r in Rs]) / n_chains))
        means.append(m)
        ses.append(e)
        accs.append(rate)
    means, ses = np.array(means), np.array(ses)
    w = _log_grid_weights(betas)
    b0, n = betas[0], ds.n
    head = b0 * float(r0.mean()) - 0.5 * b0 * b0 * n * float(r0.var())
    value = head + float(w @ means)
    se = float(np.sqrt(np.sum((w * ses) ** 2) + (b0 * r0.std() / np.sqrt(r0.size)) ** 2))
    diag = {"betas": betas.tolist(), "mean_risk": means.tolist(), "se_risk": ses.tolist(),
            "acceptance": accs, "head": head}
    if not np.isfinite(value):
        raise NumericalError("thermodynamic integration produced a non-finite value")
    if max_se is not None and se > max_se:
        raise NumericalError(f"thermodynamic integration SE {se:.3g} exceeds {max_se:.3g}")
    return FreeEnergyEstimate(value, se, "ti", diag)


def free_energy(prob: ErmProblem, ds: Dataset, beta: float, prior: Prior | None = None,
                method: str = "auto", rng=0, **kw) -> float:
    """``-(1/n) log int exp(-beta n R) dprior``.

    ``method`` is ``analytic`` (squared loss), ``ti`` (thermodynamic
    integration), ``grid`` (brute force, at most 3 parameters) or ``auto``.
    """
    prior = prior or Prior()
    if method == "auto":
        method = "analytic" if (prob.loss == "squared" and prob.regularizer == "l2"
                                and prior.kind == "gaussian") else "ti"
    if method == "analytic":
        return -log_partition_analytic(prob, ds, beta, prior) / ds.n
    if method == "grid":
        return -log_partition_grid(prob, ds, beta, prior, **kw) / ds.n
    if method == "ti":
        return free_energy_ti(prob, ds, beta, prior, rng, **kw).value
    raise ConfigError(f"unknown free-energy method {method!r}")


def partition_integral(prob: ErmProblem, ds: Dataset, beta: float, prior: Prior | None = None,
                       method: str = "auto", rng=0, **kw) -> float:
    """Debug accessor: the raw integral ``Z`` (may under/overflow)."""
    return float(np.exp(-ds.n * free_energy(prob, ds, beta, prior, method, rng, **kw)))


# ----------------------------------------------------------------------------- coupling

METRICS = ("pairwise-overlap", "teacher-overlap", "ensemble-test-error", "constant")


@dataclass(frozen=True)
class Metric:
    """A statistic ``h(theta_1, ..., theta_M)``.

    ``teacher-overlap`` needs ``theta_star``; ``ensemble-test-error`` needs
    held-out ``test_sets`` (one shared or one per member); ``constant``
    returns ``value``.
    """

    name: str
    theta_star: np.ndarray | None = None
    test_sets: tuple | None = None
    value: float = 0.0
    scaling: str = "none"

    def __post_init__(self):
        if self.name not in METRICS:
            raise ConfigError(f"unregistered metric {self.name!r}; known: {METRICS}")
        if self.name == "teacher-overlap" and self.theta_star is None:
            raise ConfigError("teacher-overlap needs theta_star")
        if self.name == "ensemble-test-error" and not self.test_sets:
            raise ConfigError("ensemble-test-error needs held-out test sets")

    @property
    def differentiable(self) -> bool:
        return self.name != "ensemble-test-error"


def _as_stack(t) -> np.ndarray:
    a = np.asarray(t, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, None, :]
    elif a.ndim == 2:
        a = a[None]
    return a  # J x k x p


def metric_values(metric: Metric, thetas: Sequence) -> np.ndarray:
    """Vectorized ``h`` over a leading sample axis (members may broadcast with J = 1)."""
    T = [_as_stack(t) for t in thetas]
    J = max(t.shape[0] for t in T)
    p = T[0].shape[-1]
    if metric.name == "constant":
        return np.full(J, metric.value)
    if metric.name == "pairwise-overlap":
        out = np.zeros(J)
        for a in range(len(T)):
            for b in range(a + 1, len(T)):
                out = out + np.sum(T[a] * T[b], axis=(1, 2)) / p
        return out
    if metric.name == "teacher-overlap":
        ts = _as_stack(metric.theta_star)
        return sum(np.sum(t * ts, axis=(1, 2)) for t in T) / p * np.ones(J)
    sets = metric.test_sets
    if len(sets) not in (1, len(T)):
        raise ConfigError("need one shared test set or one per ensemble member")
    out = np.zeros(J)
    for j in range(J):
        U = 0.0
        for m, t in enumerate(T):
            ds = sets[m if len(sets) > 1 else 0]
            tt = t[min(j, t.shape[0] - 1)]
            u = ds.X @ tt.T
            if metric.scaling == "inv-sqrt-d":
                u = u / np.sqrt(ds.p)
            U = U + u / len(T)
        ds = sets[0]
        if U.shape[1] == 1:
            y = binary_labels(ds.y)
            out[j] = np.mean(np.where(U[:, 0] >= 0, 1.0, -1.0) != y)
        else:
            target = np.argmax(ds.y, axis=1) if ds.y_kind == "onehot" else ds.y.astype(np.int64)
            out[j] = np.mean(np.argmax(U, axis=1) != target)
    return out


def metric_h(metric, thetas: Sequence) -> float:
    """Scalar value of a registered metric on parameter matrices ``thetas``."""
    if isinstance(metric, str):
        metric = Metric(metric)
    return float(metric_values(metric, thetas)[0])


def _metric_grad(metric: Metric, thetas: list, a: int) -> np.ndarray:
    """d h / d theta_a as a (J x k x p) stack."""
    T = [_as_stack(t) for t in thetas]
    p = T[0].shape[-1]
    J = max(t.shape[0] for t in T)
    if metric.name == "constant":
        return np.zeros((1,) + T[a].shape[1:])
    if metric.name == "pairwise-overlap":
        g = sum(T[b] for b in range(len(T)) if b != a)
        return np.broadcast_to(g / p, (J,) + T[a].shape[1:])
    if metric.name == "teacher-overlap":
        return _as_stack(metric.theta_star) / p
    raise ConfigError(f"metric {metric.name!r} is not differentiable")


@dataclass(frozen=True)
class CoupledProblem:
    """M objectives; the first ``M1`` are minimized, the rest sampled at ``betas``."""

    objectives: tuple
    M1: int
    betas: tuple = ()
    metric: Metric = field(default_factory=lambda: Metric("pairwise-overlap"))
    s: float = 0.0
    gibbs: GibbsConfig | None = None
    n_chains: int = 4

    def __post_init__(self):
        M = len(self.objectives)
        if not 0 <= self.M1 <= M:
            raise ConfigError("need 0 <= M1 <= M")
        if len(self.betas) != M - self.M1:
            raise ConfigError("one beta per sampled objective")
        ns = {ds.n for _, ds in self.objectives}
        if len(ns) != 1:
            raise ConfigError("all objectives must share the sample count n")

    @property
    def M(self) -> int:
        return len(self.objectives)

    @property
    def n(self) -> int:
        return self.objectives[0][1].n


def draw_coupled_samples(cp: CoupledProblem, rng) -> list[np.ndarray]:
    """Gibbs samples for every sampled objective, each as a (J x k x p) stack."""
    rng = as_generator(rng)
    out = []
    for (prob, ds), beta in zip(cp.objectives[cp.M1:], cp.betas):
        base = cp.gibbs or GibbsConfig(beta=beta)
        cfg = GibbsConfig(beta=beta, n_steps=base.n_steps, burn_in=base.burn_in,
                          thinning=base.thinning, prior=base.prior)
        chains = gibbs_chains(prob, ds, cfg, rng, cp.n_chains)
        out.append(merge_chains(chains).samples)
    return out


def _coupling(cp: CoupledProblem, s: float, thetas: list, samples: list, grads: bool):
    """``f_{n,s} = -(1/n) log mean_j exp(-s n h_j)`` and its gradients in the minimized thetas."""
    n = cp.n
    full = list(thetas) + list(samples)
    hv = metric_values(cp.metric, full)
    if s == 0:
        val = 0.0
        pi = np.full(hv.size, 1.0 / hv.size)
    else:
        z = -s * n * hv
        lme = logsumexp(z) - np.log(z.size)
        val = -lme / n
        pi = np.exp(z - logsumexp(z))
    if not grads:
        return val, None, hv
    gs = []
    for a in range(len(thetas)):
        g = _metric_grad(cp.metric, full, a)
        gs.append(s * np.tensordot(pi, np.broadcast_to(g, (hv.size,) + g.shape[1:]), axes=1)
                  if g.shape[0] > 1 else s * g[0])
    return val, gs, hv


def coupling_free_energy(cp: CoupledProblem, thetas: Sequence, samples: Sequence, s: float | None = None,
                         n_blocks: int = 20) -> FreeEnergyEstimate:
    """``f_{n,s}`` by log-mean-exp over the given samples with a delete-one-block jackknife SE."""
    s = cp.s if s is None else float(s)
    raw = [t.theta if isinstance(t, Estimator) else np.atleast_2d(t) for t in thetas]
    hv = metric_values(cp.metric, list(raw) + list(samples))
    n = cp.n

    def f(h):
        z = -s * n * h
        return float(-(logsumexp(z) - np.log(z.size)) / n)

    value = f(hv)
    B = min(n_blocks, hv.size)
    if s == 0 or B < 2:
        return FreeEnergyEstimate(value, 0.0, "log-mean-exp")
    blocks = np.array_split(np.arange(hv.size), B)
    loo = np.array([f(np.delete(hv, idx)) for idx in blocks])
    se = float(np.sqrt((B - 1) / B * np.sum((loo - loo.mean()) ** 2)))
    return FreeEnergyEstimate(value, se, "log-mean-exp", {"jackknife_blocks": B})


def coupled_objective(cp: CoupledProblem, thetas: Sequence, rng=0, samples=None) -> float:
    """``sum_{m <= M1} R_m(theta_m) + f_{n,s}`` with the sampled members drawn from their Gibbs measures."""
    if len(thetas) != cp.M1:
        raise ConfigError(f"expected {cp.M1} parameter matrices")
    from .erm import empirical_risk
    total = 0.0
    for (prob, ds), th in zip(cp.objectives[:cp.M1], thetas):
        est = th if isinstance(th, Estimator) else Estimator(np.atleast_2d(th), np.zeros(np.atleast_2d(th).shape[0]), prob.scaling)
        total += empirical_risk(est, ds, prob)
    if cp.s == 0:
        return total
    if samples is None:
        samples = draw_coupled_samples(cp, rng)
    raw = [t.theta if isinstance(t, Estimator) else np.atleast_2d(t) for t in thetas]
    val, _, _ = _coupling(cp, cp.s, raw, samples, False)
    return total + val


def _risk_and_grad(prob: ErmProblem, ds: Dataset, theta: np.ndarray):
    en = _Energy(prob, ds, 1.0, Prior())
    R, g, _ = en.risk_parts(theta.reshape(1, -1))
    return float(R[0]), g[0]


@dataclass(frozen=True)
class QCurve:
    s: np.ndarray
    q: np.ndarray
    se: np.ndarray
    per_replica: np.ndarray
    direct_h: np.ndarray

    def second_differences(self) -> tuple[np.ndarray, np.ndarray]:
        """Interior second differences of the replica-mean curve and their SE."""
        d2 = self.per_replica[:, :-2] - 2 * self.per_replica[:, 1:-1] + self.per_replica[:, 2:]
        R = d2.shape[0]
        se = d2.std(axis=0, ddof=1) / np.sqrt(R) if R > 1 else np.zeros(d2.shape[1])
        return d2.mean(axis=0), se

    def slope_at_zero(self) -> tuple[float, float]:
        """Central difference of q at s = 0 and its SE across replicas."""
        i = int(np.flatnonzero(self.s == 0)[0])
        if i == 0 or i == self.s.size - 1:
            raise ConfigError("s = 0 must be an interior grid point")
        cd = (self.per_replica[:, i + 1] - self.per_replica[:, i - 1]) / (self.s[i + 1] - self.s[i - 1])
        R = cd.size
        return float(cd.mean()), float(cd.std(ddof=1) / np.sqrt(R)) if R > 1 else 0.0

    def direct(self) -> tuple[float, float]:
        R = self.direct_h.size
        return float(self.direct_h.mean()), float(self.direct_h.std(ddof=1) / np.sqrt(R)) if R > 1 else 0.0


def _minimize_coupled(cp: CoupledProblem, s: float, samples: list, x0: np.ndarray, gtol: float):
    from scipy import optimize
    shapes = []
    for prob, ds in cp.objectives[:cp.M1]:
        shapes.append(ds.p + (1 if prob.fit_bias else 0))
    splits = np.cumsum(shapes)[:-1]

    def fun(x):
        parts = np.split(x, splits)
        total, grads = 0.0, []
        thetas = []
        for (prob, ds), w in zip(cp.objectives[:cp.M1], parts):
            R, g = _risk_and_grad(prob, ds, w)
            total += R
            grads.append(g)
            thetas.append(w[:ds.p][None, :])
        val, cg, _ = _coupling(cp, s, thetas, samples, True)
        for a, (prob, ds) in enumerate(cp.objectives[:cp.M1]):
            grads[a][:ds.p] += np.asarray(cg[a]).reshape(-1)
        return total + val, np.concatenate(grads)

    res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B",
                            options={"gtol": gtol, "ftol": 0.0, "maxiter": 20000, "maxcor": 30})
    gn = float(np.max(np.abs(fun(res.x)[1])))
    # the value error is quadratic in the residual gradient, so 1e-7 is ample
    if gn > max(100 * gtol, 1e-7):
        raise NumericalError(f"inner minimization stalled (gradient {gn:.3g})")
    return res.fun, res.x


def _q_single(cp: CoupledProblem, s_grid: np.ndarray, rng, gtol: float):
    if not cp.metric.differentiable:
        raise ConfigError("q_of_s needs a differentiable metric")
    samples = draw_coupled_samples(cp, rng) if cp.M1 < cp.M else []
    from .erm import fit
    x0 = []
    for prob, ds in cp.objectives[:cp.M1]:
        est = fit(ds, prob)
        x0.append(np.concatenate([est.theta[0], est.bias if prob.fit_bias else []]))
    x0 = np.concatenate(x0) if x0 else np.zeros(0)
    if cp.M1 == 0:
        vals = np.array([_coupling(cp, s, [], samples, False)[0] for s in s_grid])
        h0 = float(np.mean(metric_values(cp.metric, samples)))
        return vals, h0
    shapes = [ds.p + (1 if prob.fit_bias else 0) for prob, ds in cp.objectives[:cp.M1]]
    parts = np.split(x0, np.cumsum(shapes)[:-1])
    th0 = [w[:ds.p][None, :] for w, (_, ds) in zip(parts, cp.objectives[:cp.M1])]
    h0 = float(np.mean(metric_values(cp.metric, th0 + samples)))
    vals = []
    for s in s_grid:
        v, _ = _minimize_coupled(cp, float(s), samples, x0, gtol)
        vals.append(v)
    return np.array(vals), h0


def q_of_s(cp, s_grid: Sequence[float], rng=0, n_replicas: int = 1, gtol: float = 1e-11) -> QCurve:
    """``q(s) = E min_{theta[1:M1]} [sum R_m + f_{n,s}]`` on a grid of coupling strengths.

    ``cp`` is a :class:`CoupledProblem` or a factory ``rng -> CoupledProblem``
    drawing a fresh data replica. Within a replica the same Gibbs samples are
    reused for every ``s``, so each replica curve is concave up to the inner
    optimizer tolerance.
    """
    s_arr = np.asarray(s_grid, dtype=np.float64)
    if np.any(np.diff(s_arr) <= 0) or not np.any(s_arr == 0):
        raise ConfigError("s_grid must be increasing and contain 0")
    rng = as_generator(rng)
    rows, hs = [], []
    for r in range(n_replicas):
        sub = np.random.Generator(np.random.Philox(rng.integers(2 ** 63)))
        prob_r = cp(sub) if callable(cp) else cp
        vals, h0 = _q_single(prob_r, s_arr, sub, gtol)
        rows.append(vals)
        hs.append(h0)
    per = np.array(rows)
    se = per.std(axis=0, ddof=1) / np.sqrt(n_replicas) if n_replicas > 1 else np.zeros(s_arr.size)
    return QCurve(s_arr, per.mean(axis=0), se, per, np.array(hs))


def objective_risk(prob: ErmProblem, ds: Dataset) -> Callable[[np.ndarray], float]:
    """Mean-form risk of a flat parameter vector (convenience for oracles)."""
    en = _Energy(prob, ds, 1.0, Prior())
    return lambda w: float(en.risk(np.asarray(w)[None])[0])
