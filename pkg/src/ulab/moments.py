"""Class-conditional moment estimation and the moment-matched Gaussian mixture."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericalError
from .mixture import Dataset, MixtureSpec, build_gmm_spec
from .rng import as_generator

PROJECTION_TOL = 1e-6


@dataclass(frozen=True)
class ClassMoments:
    """Per-cluster sample means, covariances (1/(N_c - 1) normalization) and counts.

    In diagonal mode ``covs[c]`` is the vector of per-coordinate variances.
    """

    means: np.ndarray
    covs: tuple[np.ndarray, ...]
    counts: np.ndarray
    diagonal: bool = False

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def p(self) -> int:
        return self.means.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    def to_json(self) -> dict:
        kind = "diag" if self.diagonal else "dense"
        clusters = [{"weight": float(w), "mean": m.tolist(),
                     "cov": {"kind": kind, "data": S.reshape(-1).tolist()}}
                    for w, m, S in zip(self.weights, self.means, self.covs)]
        return {"p": self.p, "clusters": clusters, "N_c": [int(n) for n in self.counts]}

    @classmethod
    def from_json(cls, doc: dict) -> "ClassMoments":
        p = int(doc["p"])
        kinds = {c["cov"]["kind"] for c in doc["clusters"]}
        if len(kinds) != 1:
            raise ConfigError("mixed covariance kinds in moments file")
        diagonal = kinds == {"diag"}
        covs = []
        for c in doc["clusters"]:
            data = np.asarray(c["cov"]["data"], dtype=np.float64)
            covs.append(data if diagonal else data.reshape(p, p))
        means = np.array([c["mean"] for c in doc["clusters"]], dtype=np.float64)
        return cls(means, tuple(covs), np.asarray(doc["N_c"], dtype=np.int64), diagonal)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "ClassMoments":
        return cls.from_json(json.loads(Path(path).read_text()))


class MomentAccumulator:
    """Single-pass mean/covariance accumulator, merged with Chan's pairwise update.

    Memory is O(p^2) (O(p) in diagonal mode) independent of the number of rows.
    ``merge`` is associative up to floating-point reassociation.
    """

    def __init__(self, p: int, diagonal: bool = False):
        self.p = p
        self.diagonal = diagonal
        self.n = 0
        self.mean = np.zeros(p)
        self.m2 = np.zeros(p) if diagonal else np.zeros((p, p))

    def _absorb(self, n_b: int, mean_b: np.ndarray, m2_b: np.ndarray) -> None:
        if n_b == 0:
            return
        n = self.n + n_b
        delta = mean_b - self.mean
        if self.diagonal:
            corr = delta * delta
        else:
            corr = np.outer(delta, delta)
        self.m2 = self.m2 + m2_b + corr * (self.n * n_b / n)
        self.mean = self.mean + delta * (n_b / n)
        self.n = n

    def update(self, X: np.ndarray) -> "MomentAccumulator":
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] == 0:
            return self
        mb = X.mean(axis=0)
        Z = X - mb
        m2 = (Z * Z).sum(axis=0) if self.diagonal else Z.T @ Z
        self._absorb(X.shape[0], mb, m2)
        return self

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        out = MomentAccumulator(self.p, self.diagonal)
        out._absorb(self.n, self.mean, self.m2)
        out._absorb(other.n, other.mean, other.m2)
        return out

    def covariance(self) -> np.ndarray:
        if self.n < 2:
            raise ConfigError("need at least two samples for a covariance")
        S = self.m2 / (self.n - 1)
        return S if self.diagonal else 0.5 * (S + S.T)


def estimate_class_moments(ds: Dataset, diagonal: bool = False) -> ClassMoments:
    """Two-pass per-cluster sample moments."""
    means, covs, counts = [], [], []
    for j in range(ds.k):
        Xj = ds.X[ds.c == j]
        if Xj.shape[0] < 2:
            raise ConfigError(f"cluster {j} has {Xj.shape[0]} samples; need at least 2")
        mu = Xj.mean(axis=0)
        Z = Xj - mu
        if diagonal:
            S = (Z * Z).sum(axis=0) / (Xj.shape[0] - 1)
        else:
            S = Z.T @ Z / (Xj.shape[0] - 1)
            S = 0.5 * (S + S.T)
        means.append(mu)
        covs.append(S)
        counts.append(Xj.shape[0])
    return ClassMoments(np.stack(means), tuple(covs), np.array(counts, dtype=np.int64), diagonal)


def allocate(weights: Sequence[float], N: int) -> np.ndarray:
    """Largest-remainder rounding of ``weights * N`` to integers summing to ``N``."""
    w = np.asarray(weights, dtype=np.float64)
    raw = w * N
    base = np.floor(raw).astype(np.int64)
    short = N - int(base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def mc_class_moments(generator: Callable[[int, int, np.random.Generator], np.ndarray],
                     weights: Sequence[float], N: int, rng, batch: int = 20000,
                     diagonal: bool = False) -> ClassMoments:
    """Stream ``N`` samples split across clusters and accumulate their moments.

    ``generator(cluster, count, rng)`` must return a ``count x p`` array of
    samples from that cluster's conditional law.
    """
    rng = as_generator(rng)
    alloc = allocate(weights, N)
    if np.any(alloc < 2):
        raise ConfigError(f"allocation {alloc.tolist()} leaves a cluster with fewer than 2 samples")
    means, covs = [], []
    for j, Nj in enumerate(alloc):
        acc = None
        done = 0
        while done < Nj:
            m = int(min(batch, Nj - done))
            X = generator(j, m, rng)
            if acc is None:
                acc = MomentAccumulator(X.shape[1], diagonal)
            acc.update(X)
            done += m
        means.append(acc.mean.copy())
        covs.append(acc.covariance())
    return ClassMoments(np.stack(means), tuple(covs), alloc, diagonal)


def psd_project(S: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Nearest (Frobenius) symmetric matrix with all eigenvalues >= floor."""
    S = np.asarray(S, dtype=np.float64)
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    if np.max(np.abs(S - S.T)) > 1e-10 * scale:
        raise ConfigError("psd_project needs a symmetric input")
    try:
        vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("eigendecomposition failed") from exc
    out = (vecs * np.maximum(vals, floor)) @ vecs.T
    return 0.5 * (out + out.T)


def build_equivalent_gmm(m: ClassMoments) -> MixtureSpec:
    """Gaussian mixture with the estimated weights, means and PSD-projected covariances."""
    covs = []
    for j, S in enumerate(m.covs):
        if m.diagonal:
            op = float(np.max(np.abs(S))) if S.size else 0.0
            clipped = np.maximum(S, 0.0)
            if np.max(np.abs(clipped - S), initial=0.0) > PROJECTION_TOL * max(op, 1e-300):
                raise NumericalError(f"cluster {j}: negative variances beyond tolerance")
            covs.append(clipped)
            continue
        vals = np.linalg.eigvalsh(S)
        op = float(np.max(np.abs(vals))) if vals.size else 0.0
        change = float(np.max(np.maximum(-vals, 0.0), initial=0.0))
        if change > PROJECTION_TOL * op:
            raise NumericalError(f"cluster {j}: PSD projection moves an eigenvalue by {change:.3g}")
        covs.append(psd_project(S) if change > 0 else S)
    return build_gmm_spec(m.weights, list(m.means), covs)
