"""Random feature maps ``x = sigma(F^T z)`` applied to Gaussian-mixture latents."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import integrate, special

from .errors import ConfigError
from .mixture import Dataset, MixtureSpec
from .rng import as_generator

GH_ORDER = 64
DEFAULT_GAMMA = 10.0

_gh_x, _gh_w = hermegauss(GH_ORDER)
_gh_w = _gh_w / _gh_w.sum()


def gaussian_mean(fn: Callable, kinks: tuple[float, ...] = ()) -> float:
    """E[fn(g)] for g ~ N(0, 1).

    Smooth integrands use 64-point Gauss-Hermite. Gauss-Hermite converges
    slowly across a kink (relu is off by ~3e-3), so piecewise-smooth
    integrands are split at their kinks and integrated adaptively.
    """
    if not kinks:
        return float(_gh_w @ fn(_gh_x))
    edges = (-np.inf, *sorted(kinks), np.inf)
    pdf = lambda t: float(fn(np.array([t]))[0]) * np.exp(-0.5 * t * t) / np.sqrt(2 * np.pi)
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        total += integrate.quad(pdf, a, b, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
    return total


@dataclass(frozen=True)
class _Activation:
    raw: Callable
    kinks: tuple[float, ...]
    smooth: bool
    centered: bool


def _relu(u):
    return np.maximum(u, 0.0)


_REGISTRY: dict[str, _Activation] = {
    "identity": _Activation(lambda u: u, (), True, False),
    "tanh-centered": _Activation(np.tanh, (), True, True),
    "erf-centered": _Activation(special.erf, (), True, True),
    "shifted-relu-centered": _Activation(_relu, (0.0,), False, True),
    # contrast suite only: deliberately outside the smooth, centered regime
    "relu": _Activation(_relu, (0.0,), False, False),
    "sign": _Activation(lambda u: np.where(u >= 0, 1.0, -1.0), (0.0,), False, False),
}
_OFFSETS: dict[str, float] = {}


def _offset(name: str) -> float:
    if name not in _OFFSETS:
        act = _REGISTRY[name]
        _OFFSETS[name] = gaussian_mean(act.raw, act.kinks) if act.centered else 0.0
    return _OFFSETS[name]


@dataclass(frozen=True)
class ActivationSpec:
    """A registered elementwise activation.

    Names ending in ``-centered`` have their Gaussian mean subtracted; ``relu``
    and ``sign`` are kept for contrast experiments and flagged by
    ``assumption_violating``.
    """

    name: str
    parameters: tuple[float, ...] = ()

    def __post_init__(self):
        if self.name not in _REGISTRY:
            raise ConfigError(f"unregistered activation {self.name!r}; known: {sorted(_REGISTRY)}")

    @property
    def offset(self) -> float:
        return _offset(self.name)

    @property
    def assumption_violating(self) -> bool:
        return not _REGISTRY[self.name].smooth

    @property
    def kinks(self) -> tuple[float, ...]:
        return _REGISTRY[self.name].kinks

    def __call__(self, u):
        out = _REGISTRY[self.name].raw(u)
        off = self.offset
        return out - off if off else out


def check_centering(act: ActivationSpec, tol: float) -> bool:
    """True iff |E[act(g)]| <= tol for g ~ N(0, 1)."""
    return abs(gaussian_mean(act, act.kinks)) <= tol


@dataclass(frozen=True)
class FeatureMatrix:
    F: np.ndarray

    @property
    def d(self) -> int:
        return self.F.shape[0]

    @property
    def p(self) -> int:
        return self.F.shape[1]

    @property
    def ratio(self) -> float:
        return self.p / self.d


def init_random_features(d: int, p: int, rng, gamma: float = DEFAULT_GAMMA) -> FeatureMatrix:
    """Gaussian feature matrix with i.i.d. N(0, 1/d) entries, shape d x p."""
    if d < 1 or p < 1:
        raise ConfigError("feature dimensions must be positive")
    if not 1.0 / gamma <= p / d <= gamma:
        warnings.warn(f"p/d = {p / d:.3g} outside [1/{gamma}, {gamma}]", stacklevel=2)
    rng = as_generator(rng)
    return FeatureMatrix(rng.standard_normal((d, p)) / np.sqrt(d))


def apply_feature_map(fm: FeatureMatrix, act: ActivationSpec, latents: Dataset, chunk: int = 65536) -> Dataset:
    if latents.p != fm.d:
        raise ConfigError(f"latent dimension {latents.p} does not match feature matrix d={fm.d}")
    out = np.empty((latents.n, fm.p))
    for s in range(0, latents.n, chunk):
        out[s:s + chunk] = act(latents.X[s:s + chunk] @ fm.F)
    return replace(latents, X=out, provenance="feature-mapped")


def _bivariate_nodes(order: int = 32):
    x, w = hermegauss(order)
    w = w / w.sum()
    return x, w


def feature_moments(fm: FeatureMatrix, act: ActivationSpec, latent: MixtureSpec,
                    order: int = 24) -> tuple[np.ndarray, list[np.ndarray]]:
    """Exact per-cluster feature means and covariances by Gauss-Hermite quadrature.

    Conditionally on cluster c the pre-activations ``u = F^T z`` are Gaussian
    with mean ``F^T mu_c`` and covariance ``F^T Sigma_c F``; each feature mean is
    a 1-D integral and each covariance entry a 2-D integral over the
    corresponding bivariate normal (means and variances use a finer 1-D rule).
    Kinked activations lose accuracy here.
    """
    x, w = _bivariate_nodes(order)
    means, covs = [], []
    for cl in latent.clusters:
        m = fm.F.T @ cl.mean
        S = fm.F.T @ cl.dense_cov() @ fm.F
        s = np.sqrt(np.clip(np.diag(S), 0.0, None))
        # means and variances are 1-D integrals; the finer 1-D rule removes the
        # dominant error, which sits on the diagonal
        a64 = act(m[:, None] + s[:, None] * _gh_x[None, :])
        mean = a64 @ _gh_w
        var = (a64 * a64) @ _gh_w - mean * mean
        # second moments E[a(u_j) a(u_l)] with u_l = m_l + s_l (r g1 + sqrt(1-r^2) g2)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(np.outer(s, s) > 0, S / np.outer(s, s), 0.0)
        r = np.clip(r, -1.0, 1.0)
        p = m.shape[0]
        second = np.empty((p, p))
        a1 = act(m[:, None] + s[:, None] * x[None, :])  # p x q, node g1
        block = max(1, int(4e6 // (p * order * order)))
        for lo in range(0, p, block):
            hi = min(p, lo + block)
            rb = r[lo:hi]  # b x p
            # u_l at (g1, g2) for l in all, given row block j: argument depends on r_jl
            arg = (m[None, :, None, None]
                   + s[None, :, None, None] * (rb[:, :, None, None] * x[None, None, :, None]
                                               + np.sqrt(1.0 - rb[:, :, None, None] ** 2) * x[None, None, None, :]))
            a2 = act(arg)  # b x p x q x q
            second[lo:hi] = np.einsum("jq,jlqr,q,r->jl", a1[lo:hi], a2, w, w, optimize=True)
        cov = second - np.outer(mean, mean)
        cov = 0.5 * (cov + cov.T)
        cov[np.diag_indices(p)] = var
        means.append(mean)
        covs.append(cov)
    return np.stack(means), covs
