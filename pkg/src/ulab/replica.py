"""Asymptotic order parameters of regularized GLM estimation on diagonal Gaussian mixtures.

Scale conventions. The estimator acts as ``w @ x / sqrt(d)`` on data of
dimension ``d``, with per-cluster scaled means ``mu_tilde = sqrt(d) * mu`` and
covariance spectra ``sigma``. The objective is
``sum_i loss(y_i, w x_i / sqrt(d) + b) + sum_j psi(w_j)`` with
``psi(w) = lam * w^2 / 2``; :func:`replica_lambda` converts the ``lam`` of a
mean-form ERM problem.

Order parameters per cluster k (D = output dimension):

    M_k = E[w x / sqrt(d) | k] - b   (D)      Q_k  = Cov_k(w x / sqrt(d))   (D x D)
    V_k = response / variance          (D x D) R_k  = overlap with a teacher (D)

and the conjugate fields ``mh, Qh, Vh, rh``. With ``omega = M_k + b + Q_k^{1/2} xi``
and ``h = argmin_z loss(y, z) + (z - omega)^T V_k^{-1} (z - omega) / 2``::

    f = V^{-1} (h - omega) = -grad loss(h)          df/domega = -(I + H V)^{-1} H
    mh_k = alpha rho_k E f     Qh_k = alpha rho_k E f f^T     Vh_k = -alpha rho_k E df/domega

and coordinatewise, with ``A_i = (lam I + sum_k sigma_ki Vh_k)^{-1}`` and
``Bbar_i = sum_k mu_tilde_ki mh_k + sigma_ki w*_i rh_k``::

    M_k = <mu_tilde_k A Bbar>    Q_k = <sigma_k A (Bbar Bbar^T + sum_l sigma_l Qh_l) A>
    V_k = <sigma_k A>            R_k = <sigma_k w* A Bbar>

where ``<.>`` averages over the d coordinates. The bias solves
``sum_k rho_k E f_k = 0`` (stationarity of the objective in b).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import expit, log_expit, logsumexp, softmax
from scipy.stats import norm, qmc

from .errors import ConfigError, NumericalError
from .rng import as_generator, stream

LOSSES = ("squared", "logistic-binary", "multiclass-cross-entropy")
PSD_TOL = 1e-8
GH_ORDER = 32
MAX_CLASSES = 4


def replica_lambda(lam: float, alpha: float, d: int, scaling: str = "none") -> float:
    """Coordinate-penalty ``lam`` for a mean-form ERM risk ``(1/n) sum loss + lam ||theta||^2``.

    With unscaled predictions ``theta = w / sqrt(d)``; with ``inv-sqrt-d``
    scaling ``theta = w``.
    """
    if scaling == "none":
        return 2.0 * alpha * lam
    if scaling == "inv-sqrt-d":
        return 2.0 * alpha * d * lam
    raise ConfigError(f"unknown scaling {scaling!r}")


@dataclass(frozen=True)
class ReplicaProblem:
    """Diagonal-covariance mixture instance.

    ``labels`` holds the per-cluster target (K x D); it defaults to the one-hot
    class for cross-entropy and to +-1 by cluster parity (odd -> +1) for the
    scalar losses. A ``w_star`` teacher instead labels by
    ``y = w_star x / sqrt(d) + sqrt(noise_var) eps`` (squared loss only).
    """

    weights: np.ndarray
    mu_tilde: np.ndarray
    sigma: np.ndarray
    alpha: float
    loss: str
    lam: float
    fit_bias: bool = False
    labels: np.ndarray | None = None
    w_star: np.ndarray | None = None
    noise_var: float = 0.0
    regularizer: str = "quadratic"
    sigma_max: float = 1e6

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.mu_tilde, dtype=np.float64))
        sig = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "mu_tilde", mu)
        object.__setattr__(self, "sigma", sig)
        K = w.shape[0]
        if mu.shape[0] != K or sig.shape != mu.shape:
            raise ConfigError("weights, mu_tilde (K x d) and sigma (K x d) disagree")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("weights must be nonnegative and sum to 1")
        if np.any(sig <= 0) or np.any(sig > self.sigma_max):
            raise ConfigError("spectra must lie in (0, sigma_max]")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.regularizer != "quadratic":
            raise ConfigError("the fixed-point solver supports the quadratic regularizer only")
        if not self.alpha > 0 or self.lam < 0 or self.noise_var < 0:
            raise ConfigError("need alpha > 0, lam >= 0, noise_var >= 0")
        if self.loss == "multiclass-cross-entropy" and K > MAX_CLASSES:
            raise ConfigError(f"cross-entropy supports at most {MAX_CLASSES} classes")
        if self.w_star is not None:
            if self.loss != "squared":
                raise ConfigError("teacher labels are supported for the squared loss")
            ws = np.asarray(self.w_star, dtype=np.float64).reshape(-1)
            if ws.shape[0] != mu.shape[1]:
                raise ConfigError("w_star must have length d")
            object.__setattr__(self, "w_star", ws)
        D = K if self.loss == "multiclass-cross-entropy" else 1
        if self.labels is None:
            if D == K and self.loss == "multiclass-cross-entropy":
                lab = np.eye(K)
            else:
                lab = np.where(np.arange(K) % 2 == 1, 1.0, -1.0)[:, None]
        else:
            lab = np.asarray(self.labels, dtype=np.float64).reshape(K, D)
        if self.loss == "logistic-binary" and not np.all(np.isin(lab, (-1.0, 1.0))):
            raise ConfigError("logistic labels must be +-1")
        object.__setattr__(self, "labels", lab)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.mu_tilde.shape[1]

    @property
    def D(self) -> int:
        return self.labels.shape[1]

    @property
    def teacher(self) -> bool:
        return self.w_star is not None

    def teacher_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-cluster mean and variance of the noiseless teacher output."""
        ws = self.w_star
        return (self.mu_tilde * ws).mean(axis=1), (self.sigma * ws * ws).mean(axis=1)

    def to_json(self) -> dict:
        doc = {"weights": self.weights.tolist(), "mu_tilde": self.mu_tilde.tolist(),
               "sigma": self.sigma.tolist(), "alpha": self.alpha, "loss": self.loss,
               "lam": self.lam, "fit_bias": self.fit_bias, "labels": self.labels.tolist(),
               "noise_var": self.noise_var}
        if self.w_star is not None:
            doc["w_star"] = self.w_star.tolist()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ReplicaProblem":
        try:
            return cls(weights=np.asarray(doc["weights"]), mu_tilde=np.asarray(doc["mu_tilde"]),
                       sigma=np.asarray(doc["sigma"]), alpha=float(doc["alpha"]),
                       loss=doc["loss"], lam=float(doc["lam"]),
                       fit_bias=bool(doc.get("fit_bias", False)),
                       labels=None if doc.get("labels") is None else np.asarray(doc["labels"]),
                       w_star=None if doc.get("w_star") is None else np.asarray(doc["w_star"]),
                       noise_var=float(doc.get("noise_var", 0.0)))
        except KeyError as exc:
            raise ConfigError(f"replica problem lacks {exc.args[0]!r}") from exc

    @classmethod
    def from_moments(cls, moments, alpha: float, loss: str, lam: float, **kw) -> "ReplicaProblem":
        """Build from diagonal-mode class moments (raw means are rescaled by sqrt(p))."""
        if not moments.diagonal:
            raise ConfigError("replica problems need diagonal-mode moments")
        p = moments.p
        return cls(weights=moments.weights, mu_tilde=np.sqrt(p) * moments.means,
                   sigma=np.stack(moments.covs), alpha=alpha, loss=loss, lam=lam, **kw)


@dataclass(frozen=True)
class ReplicaState:
    M: np.ndarray
    Q: np.ndarray
    V: np.ndarray
    R: np.ndarray
    mh: np.ndarray
    Qh: np.ndarray
    Vh: np.ndarray
    rh: np.ndarray
    b: np.ndarray
    residual: float = np.inf
    iterations: int = 0
    converged: bool = False
    history: tuple[float, ...] = field(default=(), compare=False)

    def to_json(self) -> dict:
        out = {k: np.asarray(getattr(self, k)).tolist()
               for k in ("M", "Q", "V", "R", "mh", "Qh", "Vh", "rh", "b")}
        out.update(residual=float(self.residual), iterations=int(self.iterations),
                   converged=bool(self.converged))
        return out

    @classmethod
    def from_json(cls, doc: dict) -> "ReplicaState":
        arrs = {k: np.asarray(doc[k], dtype=np.float64)
                for k in ("M", "Q", "V", "R", "mh", "Qh", "Vh", "rh", "b")}
        return cls(**arrs, residual=float(doc["residual"]), iterations=int(doc["iterations"]),
                   converged=bool(doc["converged"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))


def initial_state(rp: ReplicaProblem) -> ReplicaState:
    K, D = rp.K, rp.D
    eye = np.broadcast_to(np.eye(D), (K, D, D)).copy()
    z = np.zeros((K, D))
    return ReplicaState(M=z.copy(), Q=eye.copy(), V=eye.copy(), R=z.copy(), mh=z.copy(),
                        Qh=np.zeros((K, D, D)), Vh=np.zeros((K, D, D)), rh=z.copy(), b=np.zeros(D))


# ----------------------------------------------------------------------------- channel

def _loss_derivs(loss: str, z: np.ndarray, y: np.ndarray):
    """Loss value (N), gradient (N x D) and Hessian (N x D x D) at ``z``."""
    N, D = z.shape
    if loss == "squared":
        r = z - y
        return np.sum(r * r, axis=1), 2.0 * r, np.broadcast_to(2.0 * np.eye(D), (N, D, D))
    if loss == "logistic-binary":
        m = y[:, 0] * z[:, 0]
        g = -y[:, 0] * expit(-m)
        H = expit(z[:, 0]) * expit(-z[:, 0])
        return -log_expit(m), g[:, None], H[:, None, None]
    s = softmax(z, axis=1)
    val = logsumexp(z, axis=1) - np.sum(y * z, axis=1)
    H = np.einsum("na,ab->nab", s, np.eye(D)) - s[:, :, None] * s[:, None, :]
    return val, s - y, H


def _prox_newton(loss: str, y: np.ndarray, V: np.ndarray, omega: np.ndarray,
                 tol: float, max_iter: int):
    """Solve ``V grad(h) + h - omega = 0`` node by node; returns (h, Hessian at h)."""
    N, D = omega.shape
    y = np.broadcast_to(y, (N, D))
    if loss == "squared":
        A = np.eye(D) + 2.0 * V
        h = np.linalg.solve(A, (omega + 2.0 * y @ V.T).T).T
        return h, np.broadcast_to(2.0 * np.eye(D), (N, D, D))
    h = omega.copy()
    eye = np.eye(D)
    _, g, H = _loss_derivs(loss, h, y)
    r = g @ V.T + h - omega
    rn = np.max(np.abs(r), axis=1)
    for _ in range(max_iter):
        if rn.max() <= tol:
            return h, H
        J = eye + V @ H  # N x D x D
        step = -np.linalg.solve(J, r[:, :, None])[:, :, 0]
        t = np.ones(N)
        cand = h + step
        for _ in range(40):
            _, g2, H2 = _loss_derivs(loss, cand, y)
            r2 = g2 @ V.T + cand - omega
            rn2 = np.max(np.abs(r2), axis=1)
            bad = rn2 > rn
            if not bad.any():
                break
            t = np.where(bad, 0.5 * t, t)
            cand = h + t[:, None] * step
        h, g, H, r, rn = cand, g2, H2, r2, rn2
    if rn.max() <= tol:
        return h, H
    raise NumericalError(f"prox Newton did not converge (residual {rn.max():.3g})")


def prox_loss(loss: str, y, V, omega, tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
    """``argmin_z loss(y, z) + (z - omega)^T V^{-1} (z - omega) / 2``.

    ``omega`` may be a single point (length D) or a batch (N x D). ``V`` is a
    D x D PSD matrix; ``V = 0`` returns ``omega``.
    """
    omega = np.asarray(omega, dtype=np.float64)
    single = omega.ndim == 1
    om = np.atleast_2d(omega)
    D = om.shape[1]
    V = np.asarray(V, dtype=np.float64).reshape(D, D)
    y = np.asarray(y, dtype=np.float64).reshape(-1, D)
    h, _ = _prox_newton(loss, y, V, om, tol, max_iter)
    return h[0] if single else h


def prox_reg(psi: str, a_half, b, lam: float, tol: float = 1e-13, max_iter: int = 100,
             delta: float = 1.0, newton: bool = False) -> np.ndarray:
    """Coordinatewise ``a^{1/2} * Prox_{psi(a^{1/2} .)}(a^{1/2} b)``.

    ``psi`` is ``quadratic`` (``lam w^2 / 2``, closed form) or ``pseudo-huber``
    (``lam delta^2 (sqrt(1 + (w/delta)^2) - 1)``, scalar Newton). ``newton=True``
    forces the Newton path for the quadratic case.
    """
    a = np.asarray(a_half, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if psi == "quadratic" and not newton:
        return a * (a * b / (1.0 + lam * a * a))
    if psi == "quadratic":
        d1 = lambda w: lam * w
        d2 = lambda w: np.full_like(w, lam)
    elif psi == "pseudo-huber":
        d1 = lambda w: lam * w / np.sqrt(1.0 + (w / delta) ** 2)
        d2 = lambda w: lam * (1.0 + (w / delta) ** 2) ** -1.5
    else:
        raise ConfigError(f"unknown separable penalty {psi!r}")
    z = a * b
    u = z.copy()
    for _ in range(max_iter):
        g = a * d1(a * u) + u - z
        if np.max(np.abs(g), initial=0.0) <= tol:
            return a * u
        u = u - g / (a * a * d2(a * u) + 1.0)
    raise NumericalError("prox_reg Newton did not converge")


@dataclass(frozen=True)
class _Nodes:
    xi: np.ndarray
    eta: np.ndarray | None
    w: np.ndarray


def _make_nodes(D: int, teacher: bool, order: int, mc_nodes: int, rng) -> _Nodes:
    dims = D + (1 if teacher else 0)
    if dims <= 2:
        x, w = hermegauss(order)
        w = w / w.sum()
        grids = np.meshgrid(*([x] * dims), indexing="ij")
        pts = np.stack([g.reshape(-1) for g in grids], axis=1)
        wg = np.meshgrid(*([w] * dims), indexing="ij")
        wts = np.prod(np.stack([g.reshape(-1) for g in wg], axis=1), axis=1)
    else:
        m = int(np.ceil(np.log2(max(mc_nodes, 2))))
        seed = int(as_generator(rng).integers(2 ** 32))
        u = qmc.Sobol(dims, scramble=True, seed=seed).random_base2(m)
        pts = norm.ppf(np.clip(u, 1e-16, 1 - 1e-16))
        wts = np.full(pts.shape[0], 1.0 / pts.shape[0])
    if teacher:
        return _Nodes(pts[:, :D], pts[:, D], wts)
    return _Nodes(pts, None, wts)


def _sqrtm_psd(S: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _cluster_fields(rp: ReplicaProblem, st: ReplicaState, k: int, b: np.ndarray, nodes: _Nodes):
    """Nodes of omega and y for cluster k."""
    sq = _sqrtm_psd(st.Q[k])
    omega = st.M[k] + b + nodes.xi @ sq
    if rp.teacher:
        mstar, T = rp.teacher_moments()
        c = np.linalg.pinv(sq) @ st.R[k]
        qinv = np.linalg.pinv(st.Q[k])
        v0 = max(T[k] - float(st.R[k] @ qinv @ st.R[k]), 0.0) + rp.noise_var
        y = (mstar[k] + nodes.xi @ c + np.sqrt(v0) * nodes.eta)[:, None]
        return omega, y, np.sqrt(v0)
    return omega, rp.labels[k][None, :], None


def _channel(rp: ReplicaProblem, st: ReplicaState, b: np.ndarray, nodes: _Nodes,
             tol: float, with_loss: bool = False):
    K, D = rp.K, rp.D
    w = nodes.w
    out = {"Ef": np.zeros((K, D)), "Eff": np.zeros((K, D, D)), "Edf": np.zeros((K, D, D)),
           "Efeta": np.zeros((K, D)), "Eloss": np.zeros(K)}
    eye = np.eye(D)
    for k in range(K):
        omega, y, vs = _cluster_fields(rp, st, k, b, nodes)
        h, H = _prox_newton(rp.loss, y, st.V[k], omega, tol, 100)
        val, g, _ = _loss_derivs(rp.loss, h, np.broadcast_to(y, h.shape))
        f = -g
        df = -np.linalg.solve(eye + H @ st.V[k], H)
        out["Ef"][k] = w @ f
        out["Eff"][k] = np.einsum("n,na,nb->ab", w, f, f)
        out["Edf"][k] = np.einsum("n,nab->ab", w, df)
        out["Edf"][k] = 0.5 * (out["Edf"][k] + out["Edf"][k].T)
        if vs is not None:
            out["Efeta"][k] = (w * nodes.eta) @ f / vs if vs > 0 else 0.0
        if with_loss:
            out["Eloss"][k] = w @ val
    return out


def solve_bias(st: ReplicaState, rp: ReplicaProblem, nodes: _Nodes | None = None,
               tol: float = 1e-12, max_iter: int = 60) -> np.ndarray:
    """Root of ``sum_k rho_k E f_k(b) = 0`` by damped Newton.

    For cross-entropy the outputs are defined up to a common shift; the
    Newton step uses the pseudo-inverse and the root is returned with
    ``sum(b) = 0``.
    """
    if nodes is None:
        nodes = _make_nodes(rp.D, rp.teacher, GH_ORDER, 4096, 0)
    rho = rp.weights
    gauge = rp.loss == "multiclass-cross-entropy"
    b = st.b.copy()

    def resid(bb):
        ch = _channel(rp, st, bb, nodes, 1e-13)
        return rho @ ch["Ef"], np.einsum("k,kab->ab", rho, ch["Edf"])

    F, J = resid(b)
    for _ in range(max_iter):
        if np.max(np.abs(F)) <= tol:
            break
        if gauge:
            step = -np.linalg.pinv(J, rcond=1e-10) @ F
        else:
            if abs(np.linalg.det(J)) < 1e-300 or np.linalg.cond(J) > 1e14:
                raise NumericalError("bias Jacobian is singular")
            step = -np.linalg.solve(J, F)
        t = 1.0
        while True:
            b_new = b + t * step
            F_new, J_new = resid(b_new)
            if np.linalg.norm(F_new) < np.linalg.norm(F) or t < 1e-6:
                break
            t *= 0.5
        b, F, J = b_new, F_new, J_new
    else:
        if np.max(np.abs(F)) > tol * 1e3:
            raise NumericalError(f"bias equation unsolved (residual {np.max(np.abs(F)):.3g})")
    if gauge:
        b = b - b.mean()
    return b


def _prior_side(rp: ReplicaProblem, mh, Qh, Vh, rh):
    sig, mu = rp.sigma, rp.mu_tilde
    D = rp.D
    Vsum = np.einsum("ki,kab->iab", sig, Vh) + rp.lam * np.eye(D)
    try:
        A = np.linalg.inv(Vsum)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular coordinate precision; need lam > 0 or alpha > 0") from exc
    Bbar = np.einsum("ki,ka->ia", mu, mh)
    if rp.teacher:
        Bbar = Bbar + np.einsum("ki,i,ka->ia", sig, rp.w_star, rh)
    CB = np.einsum("ki,kab->iab", sig, Qh)
    AB = np.einsum("iab,ib->ia", A, Bbar)
    second = np.einsum("iab,ibc,idc->iad", A, Bbar[:, :, None] * Bbar[:, None, :] + CB, A)
    d = rp.d
    M = mu @ AB / d
    Q = np.einsum("ki,iab->kab", sig, second) / d
    V = np.einsum("ki,iab->kab", sig, A) / d
    R = (sig * rp.w_star) @ AB / d if rp.teacher else np.zeros_like(M)
    Q = 0.5 * (Q + np.swapaxes(Q, 1, 2))
    V = 0.5 * (V + np.swapaxes(V, 1, 2))
    return M, Q, V, R, A, Bbar, CB


def _check_psd(name: str, S: np.ndarray) -> None:
    lo = min(float(np.linalg.eigvalsh(s)[0]) for s in S)
    if lo < -PSD_TOL:
        raise NumericalError(f"{name} left the PSD cone (min eigenvalue {lo:.3g})")


def replica_fixed_point(rp: ReplicaProblem, damping: float = 0.5, tol: float = 1e-8,
                        max_iter: int = 500, mc_nodes: int = 4096, rng=0,
                        order: int = GH_ORDER, patience: int = 50,
                        init: ReplicaState | None = None) -> ReplicaState:
    """Damped fixed-point iteration.

    The damping is halved (down to 0.05) whenever the residual increases. A
    run whose best residual has not improved for ``patience`` sweeps raises
    :class:`NumericalError`; exhausting ``max_iter`` returns an unconverged state.
    """
    if not 0 < damping <= 1:
        raise ConfigError("damping must lie in (0, 1]")
    nodes = _make_nodes(rp.D, rp.teacher, order, mc_nodes, rng)
    st = init if init is not None else initial_state(rp)
    rho = rp.weights[:, None]
    prev = np.inf
    best, since_best = np.inf, 0
    history = []
    for it in range(1, max_iter + 1):
        b = solve_bias(st, rp, nodes) if rp.fit_bias else st.b
        ch = _channel(rp, st, b, nodes, 1e-13)
        a = rp.alpha
        mh = a * rho * ch["Ef"]
        Qh = a * rho[:, :, None] * ch["Eff"]
        Vh = -a * rho[:, :, None] * ch["Edf"]
        rh = a * rho * ch["Efeta"]
        for name, S in (("Qh", Qh), ("Vh", Vh)):
            _check_psd(name, S)
        M, Q, V, R, *_ = _prior_side(rp, mh, Qh, Vh, rh)
        res = max(float(np.max(np.abs(x - y))) for x, y in
                  ((M, st.M), (Q, st.Q), (V, st.V), (R, st.R), (mh, st.mh),
                   (Qh, st.Qh), (Vh, st.Vh), (rh, st.rh), (b, st.b)))
        history.append(res)
        if res > prev:
            damping = max(0.5 * damping, 0.05)
        prev = res
        if res < best * (1 - 1e-3):
            best, since_best = res, 0
        else:
            since_best += 1
        t = damping
        st = ReplicaState(M=(1 - t) * st.M + t * M, Q=(1 - t) * st.Q + t * Q,
                          V=(1 - t) * st.V + t * V, R=(1 - t) * st.R + t * R,
                          mh=mh, Qh=Qh, Vh=Vh, rh=rh, b=b, residual=res, iterations=it,
                          converged=res <= tol, history=tuple(history))
        _check_psd("Q", st.Q)
        _check_psd("V", st.V)
        if res <= tol:
            return st
        if since_best >= patience:
            raise NumericalError(f"fixed point stagnated at residual {best:.3g} after {it} sweeps")
    return st


def random_state(rp: ReplicaProblem, rng, spread: float = 1.0) -> ReplicaState:
    """A random positive-definite starting point around :func:`initial_state`."""
    g = as_generator(rng)
    K, D = rp.K, rp.D

    def spd():
        A = g.standard_normal((K, D, D)) * spread / np.sqrt(D)
        return np.eye(D) + A @ np.swapaxes(A, 1, 2)

    z = np.zeros((K, D))
    return ReplicaState(M=spread * g.standard_normal((K, D)), Q=spd(), V=spd(), R=spread * g.standard_normal((K, D)),
                        mh=z.copy(), Qh=np.zeros((K, D, D)), Vh=np.zeros((K, D, D)), rh=z.copy(), b=np.zeros(D))


def uniqueness_check(rp: ReplicaProblem, reference: ReplicaState, restarts: int = 2, rng=0,
                     atol: float = 1e-6, **kw) -> dict:
    """Rerun the fixed point from random starts and report the largest overlap deviation.

    A diagnostic only: ``multiple`` flags restarts that converged elsewhere.
    ``rng`` must be the integer seed used for ``reference`` so the channel nodes match.
    """
    dev = []
    for r in range(restarts):
        try:
            st = replica_fixed_point(rp, rng=rng, init=random_state(rp, stream(int(rng), "restart", r)), **kw)
        except NumericalError:
            st = None
        if st is None or not st.converged:
            dev.append(np.inf)
            continue
        dev.append(max(float(np.max(np.abs(getattr(st, k) - getattr(reference, k)))) for k in ("M", "Q", "V", "b")))
    worst = max(dev) if dev else 0.0
    return {"restarts": restarts, "max_deviation": worst, "multiple": bool(worst > atol)}


def _binary_error(mean: float, var: float, sign: float) -> float:
    if var <= 0:
        return float(sign * mean < 0)
    return float(norm.cdf(-sign * mean / np.sqrt(var)))


def predict_errors(st: ReplicaState, rp: ReplicaProblem, rng=0, qmc_points: int = 1 << 16) -> dict:
    """Training loss ``sum_k rho_k E loss(y, h_k)`` and the asymptotic test error.

    The test error is the MSE for teacher problems, the sign-mismatch rate for
    scalar cluster labels and the argmax-mismatch rate for cross-entropy.
    """
    if not st.converged:
        raise NumericalError("refusing to predict from an unconverged state")
    nodes = _make_nodes(rp.D, rp.teacher, GH_ORDER, 4096, rng)
    ch = _channel(rp, st, st.b, nodes, 1e-13, with_loss=True)
    rho = rp.weights
    out = {"train_loss": float(rho @ ch["Eloss"]), "residual": float(st.residual),
           "iterations": int(st.iterations)}
    K, D = rp.K, rp.D
    mean = st.M + st.b
    if rp.teacher:
        mstar, T = rp.teacher_moments()
        mse = (mstar - mean[:, 0]) ** 2 + T - 2 * st.R[:, 0] + st.Q[:, 0, 0] + rp.noise_var
        out["test_error"] = out["test_mse"] = float(rho @ mse)
        return out
    if D == 1:
        errs = [_binary_error(mean[k, 0], st.Q[k, 0, 0], np.sign(rp.labels[k, 0])) for k in range(K)]
        out["test_error"] = float(rho @ np.array(errs))
        if rp.loss == "squared":
            mse = (rp.labels[:, 0] - mean[:, 0]) ** 2 + st.Q[:, 0, 0]
            out["test_mse"] = float(rho @ mse)
        return out
    target = np.argmax(rp.labels, axis=1)
    errs = np.zeros(K)
    if D == 2:
        for k in range(K):
            j = 1 - target[k]
            e = np.zeros(2)
            e[j], e[target[k]] = 1.0, -1.0
            # error iff omega_j - omega_target > 0 (ties toward the lower index have measure zero)
            errs[k] = _binary_error(e @ mean[k], e @ st.Q[k] @ e, -1.0)
    else:
        m = int(np.log2(qmc_points))
        seed = int(as_generator(rng).integers(2 ** 32))
        g = norm.ppf(np.clip(qmc.Sobol(D, scramble=True, seed=seed).random_base2(m), 1e-16, 1 - 1e-16))
        for k in range(K):
            om = mean[k] + g @ _sqrtm_psd(st.Q[k])
            errs[k] = np.mean(np.argmax(om, axis=1) != target[k])
    out["test_error"] = float(rho @ errs)
    if rp.loss == "squared":
        mse = np.sum((rp.labels - mean) ** 2, axis=1) + np.trace(st.Q, axis1=1, axis2=2)
        out["test_mse"] = float(rho @ mse)
    return out


TEST_FUNCTIONS = {
    "one": lambda w, mu, sig: np.ones(w.shape[:-1]),
    "w2": lambda w, mu, sig: np.sum(w * w, axis=-1),
    "clipped-w": lambda w, mu, sig: np.clip(w[..., 0], -1.0, 1.0),
    "clipped-w-mu": lambda w, mu, sig: np.clip(w[..., 0] * mu[0], -1.0, 1.0),
    "w2-sigma": lambda w, mu, sig: np.sum(w * w, axis=-1) * sig[0],
}


def empirical_measure_compare(est, st: ReplicaState, rp: ReplicaProblem,
                              test_fns=("one", "w2", "clipped-w"), n_draws: int = 64, rng=0) -> dict:
    """Compare coordinate averages of ``phi(w_i, mu_tilde_i, sigma_i)``.

    The empirical side uses the fitted estimator rescaled to replica
    coordinates; the limit side samples ``w_i = A_i (Bbar_i + C_i^{1/2} g)``
    with ``n_draws`` Gaussian draws per coordinate.
    """
    rng = as_generator(rng)
    theta = np.atleast_2d(est.theta)
    if theta.shape != (rp.D, rp.d):
        raise ConfigError(f"estimator shape {theta.shape} does not match ({rp.D}, {rp.d})")
    W = (np.sqrt(rp.d) * theta if est.scaling == "none" else theta).T  # d x D
    _, _, _, _, A, Bbar, CB = _prior_side(rp, st.mh, st.Qh, st.Vh, st.rh)
    L = np.stack([_sqrtm_psd(c) for c in CB])
    g = rng.standard_normal((n_draws, rp.d, rp.D))
    samples = np.einsum("iab,nib->nia", A, Bbar[None] + np.einsum("iab,nib->nia", L, g))
    out = {}
    for name in test_fns:
        if name not in TEST_FUNCTIONS:
            raise ConfigError(f"unknown test function {name!r}")
        fn = TEST_FUNCTIONS[name]
        emp = float(np.mean(fn(W, rp.mu_tilde, rp.sigma)))
        per_draw = np.array([np.mean(fn(samples[j], rp.mu_tilde, rp.sigma)) for j in range(n_draws)])
        lim = float(per_draw.mean())
        se = float(per_draw.std(ddof=1) / np.sqrt(n_draws)) if n_draws > 1 else 0.0
        out[name] = {"empirical": emp, "replica": lim, "replica_se": se, "discrepancy": emp - lim}
    return out


def with_alpha(rp: ReplicaProblem, alpha: float, lam: float | None = None) -> ReplicaProblem:
    return replace(rp, alpha=alpha, lam=rp.lam if lam is None else lam)
