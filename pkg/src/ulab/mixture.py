"""Finite mixture distributions, datasets and label rules.

Convention: a :class:`Dataset` stores samples as the *rows* of ``X`` (shape
``n x p``), i.e. ``X`` here is the transpose of the ``p x n`` matrix obtained by
stacking samples column-wise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericalError
from .rng import as_generator

WEIGHT_TOL = 1e-12
SYMMETRY_TOL = 1e-12
PSD_TOL = 1e-10
LABEL_RULES = ("cluster-index", "linear-regression", "sign", "logit-noise")


@dataclass(frozen=True)
class ClusterSpec:
    """One Gaussian component: weight, mean and (dense or diagonal) covariance."""

    weight: float
    mean: np.ndarray
    cov: np.ndarray
    diagonal: bool = False

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise ConfigError(f"cluster weight {self.weight} outside [0, 1]")
        if self.diagonal and self.cov.ndim != 1:
            raise ConfigError("diagonal covariance must be stored as a vector")
        if not self.diagonal and self.cov.ndim != 2:
            raise ConfigError("dense covariance must be a matrix")

    @property
    def p(self) -> int:
        return self.mean.shape[0]

    def dense_cov(self) -> np.ndarray:
        return np.diag(self.cov) if self.diagonal else self.cov

    def cov_diag(self) -> np.ndarray:
        return self.cov if self.diagonal else np.diag(self.cov).copy()


@dataclass(frozen=True)
class MixtureSpec:
    clusters: tuple[ClusterSpec, ...]
    p: int

    @property
    def k(self) -> int:
        return len(self.clusters)

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.clusters])

    @property
    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.clusters])

    def to_json(self) -> dict:
        out = []
        for c in self.clusters:
            kind = "diag" if c.diagonal else "dense"
            out.append({
                "weight": float(c.weight),
                "mean": c.mean.tolist(),
                "cov": {"kind": kind, "data": c.cov.reshape(-1).tolist()},
            })
        return {"p": self.p, "clusters": out}

    @classmethod
    def from_json(cls, doc: dict) -> "MixtureSpec":
        p = int(doc["p"])
        weights, means, covs = [], [], []
        for c in doc["clusters"]:
            weights.append(float(c["weight"]))
            means.append(np.asarray(c["mean"], dtype=np.float64))
            data = np.asarray(c["cov"]["data"], dtype=np.float64)
            kind = c["cov"]["kind"]
            if kind == "dense":
                if data.size != p * p:
                    raise ConfigError("dense covariance payload must have p*p entries")
                covs.append(data.reshape(p, p))
            elif kind == "diag":
                covs.append(data)
            else:
                raise ConfigError(f"unknown covariance kind {kind!r}")
        return build_gmm_spec(weights, means, covs)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "MixtureSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TeacherSpec:
    """Target function ``y = eta(theta_star @ x, eps, c)``.

    ``rule`` is one of ``LABEL_RULES``. ``cluster-index`` ignores ``theta_star``
    (which may be None); the other rules use a single teacher row.
    """

    rule: str
    theta_star: np.ndarray | None = None
    noise_scale: float = 0.0
    onehot: bool = False

    def __post_init__(self):
        if self.rule not in LABEL_RULES:
            raise ConfigError(f"unknown label rule {self.rule!r}; expected one of {LABEL_RULES}")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be nonnegative")
        if self.rule != "cluster-index":
            if self.theta_star is None:
                raise ConfigError(f"label rule {self.rule!r} needs theta_star")
            th = np.atleast_2d(np.asarray(self.theta_star, dtype=np.float64))
            if th.shape[0] != 1:
                raise ConfigError(f"label rule {self.rule!r} takes exactly one teacher row")
            object.__setattr__(self, "theta_star", th)


@dataclass(frozen=True)
class Dataset:
    """Samples ``X`` (n x p), labels ``y`` and cluster assignments ``c``.

    ``y_kind`` is ``"real"`` (regression targets), ``"class"`` (discrete labels:
    class indices or +-1) or ``"onehot"`` (``y`` has shape n x k).
    """

    X: np.ndarray
    y: np.ndarray
    c: np.ndarray
    k: int
    y_kind: str = "class"
    provenance: str = "gmm"
    teacher: TeacherSpec | None = field(default=None, compare=False)

    def __post_init__(self):
        n = self.X.shape[0]
        if self.X.ndim != 2 or n < 1 or self.X.shape[1] < 1:
            raise ConfigError("X must be a nonempty n x p matrix")
        if self.c.shape != (n,):
            raise ConfigError("c must have one entry per row of X")
        if self.k < 1 or (n and (self.c.min() < 0 or self.c.max() >= self.k)):
            raise ConfigError("cluster index out of range")
        if self.y_kind == "onehot":
            if self.y.shape != (n, self.k):
                raise ConfigError("one-hot labels must have shape n x k")
            if not np.allclose(self.y.sum(axis=1), 1.0, atol=1e-12):
                raise ConfigError("one-hot rows must sum to 1")
        elif self.y_kind in ("real", "class"):
            if self.y.shape != (n,):
                raise ConfigError("labels must have one entry per row")
        else:
            raise ConfigError(f"unknown y_kind {self.y_kind!r}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, X=self.X[idx], y=self.y[idx], c=self.c[idx])

    def with_labels(self, y, y_kind: str, teacher: TeacherSpec | None = None) -> "Dataset":
        return replace(self, y=np.asarray(y, dtype=np.float64), y_kind=y_kind, teacher=teacher)


def build_gmm_spec(weights: Sequence[float], means: Sequence, covariances: Sequence) -> MixtureSpec:
    """Validate and assemble a mixture. Covariances given as vectors are diagonal."""
    if not (len(weights) == len(means) == len(covariances)) or len(weights) == 0:
        raise ConfigError("weights, means and covariances must have the same nonzero length")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
        raise ConfigError(f"weights must be nonnegative and sum to 1 (got sum {w.sum()!r})")
    means = [np.asarray(m, dtype=np.float64).reshape(-1) for m in means]
    p = means[0].shape[0]
    clusters = []
    for wi, mu, cov in zip(w, means, covariances):
        if mu.shape[0] != p:
            raise ConfigError("all means must have the same length")
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 1:
            if cov.shape[0] != p:
                raise ConfigError("diagonal covariance length must equal p")
            if cov.min() < -PSD_TOL:
                raise ConfigError("covariance has a negative variance")
            clusters.append(ClusterSpec(float(wi), mu, np.maximum(cov, 0.0), diagonal=True))
            continue
        if cov.shape != (p, p):
            raise ConfigError(f"covariance must be {p}x{p}, got {cov.shape}")
        scale = max(1.0, float(np.max(np.abs(cov))))
        if np.max(np.abs(cov - cov.T)) > SYMMETRY_TOL * scale:
            raise ConfigError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if p and np.linalg.eigvalsh(cov)[0] < -PSD_TOL * scale:
            raise ConfigError("covariance is not positive semi-definite")
        clusters.append(ClusterSpec(float(wi), mu, cov))
    return MixtureSpec(tuple(clusters), p)


def cov_factor(cov: np.ndarray, max_retries: int = 3) -> np.ndarray:
    """Symmetric square root of a PSD matrix, with diagonal jitter on failure."""
    p = cov.shape[0]
    jitter = 1e-10 * np.trace(cov) / p
    a = cov
    for attempt in range(max_retries + 1):
        try:
            vals, vecs = np.linalg.eigh(a)
        except np.linalg.LinAlgError:
            vals = None
        if vals is not None:
            scale = max(1.0, float(np.abs(vals).max()))
            if vals[0] >= -PSD_TOL * scale:
                return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
        if attempt < max_retries:
            a = a + jitter * np.eye(p)
    raise NumericalError("covariance factorization failed after jitter retries")


def assign_clusters(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF cluster assignment; a draw on a boundary goes to the lower index."""
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.minimum(np.searchsorted(cum, u, side="left"), len(weights) - 1)


def sample_mixture(spec: MixtureSpec, n: int, rng) -> Dataset:
    """Draw ``n`` i.i.d. samples. Labels default to the cluster index."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    rng = as_generator(rng)
    c = assign_clusters(spec.weights, rng.random(n))
    X = np.empty((n, spec.p))
    for j, cl in enumerate(spec.clusters):
        idx = np.flatnonzero(c == j)
        g = rng.standard_normal((idx.size, spec.p))
        if cl.diagonal:
            X[idx] = cl.mean + g * np.sqrt(cl.cov)
        else:
            X[idx] = cl.mean + g @ cov_factor(cl.cov)
    return Dataset(X=X, y=c.astype(np.float64), c=c, k=spec.k, y_kind="class", provenance="gmm")


def label_dataset(ds: Dataset, teacher: TeacherSpec, rng) -> Dataset:
    """Attach labels from the teacher rule; ``X`` and ``c`` are left untouched."""
    rng = as_generator(rng)
    if teacher.rule == "cluster-index":
        if teacher.onehot:
            y = np.zeros((ds.n, ds.k))
            y[np.arange(ds.n), ds.c] = 1.0
            return ds.with_labels(y, "onehot", teacher)
        return ds.with_labels(ds.c.astype(np.float64), "class", teacher)
    th = teacher.theta_star
    if th.shape[1] != ds.p:
        raise ConfigError(f"teacher has dimension {th.shape[1]}, data has p={ds.p}")
    proj = ds.X @ th[0]
    if teacher.rule == "linear-regression":
        eps = rng.standard_normal(ds.n)
        return ds.with_labels(proj + teacher.noise_scale * eps, "real", teacher)
    if teacher.rule == "sign":
        eps = rng.standard_normal(ds.n)
        return ds.with_labels(np.where(proj + teacher.noise_scale * eps >= 0, 1.0, -1.0), "class", teacher)
    # logit-noise: P(y = +1) = sigmoid(proj / noise_scale)
    eps = rng.logistic(size=ds.n)
    return ds.with_labels(np.where(proj + teacher.noise_scale * eps >= 0, 1.0, -1.0), "class", teacher)


def binary_labels_from_clusters(ds: Dataset, rule: str = "parity") -> Dataset:
    """Map cluster indices to +-1 (odd clusters -> +1), e.g. odd-vs-even classification."""
    if rule != "parity":
        raise ConfigError(f"unknown binary mapping {rule!r}")
    return ds.with_labels(np.where(ds.c % 2 == 1, 1.0, -1.0), "class")
