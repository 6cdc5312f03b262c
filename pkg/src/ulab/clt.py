"""Cluster-conditional one-dimensional projections: data versus its equivalent Gaussian mixture."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .features import ActivationSpec, apply_feature_map, feature_moments, init_random_features
from .mixture import Dataset, MixtureSpec, build_gmm_spec, sample_mixture
from .moments import build_equivalent_gmm, mc_class_moments
from .rng import as_generator, stream
from .sources import symmetric_mixture

DIRECTION_KINDS = ("random-unit", "trained-rows", "coordinate-spike", "user")
UNIT_TOL = 1e-12


@dataclass(frozen=True)
class DirectionSet:
    """Unit directions (rows of ``directions``) with a kind tag per row."""

    directions: np.ndarray
    kinds: tuple[str, ...]

    def __post_init__(self):
        D = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        object.__setattr__(self, "directions", D)
        if len(self.kinds) != D.shape[0]:
            raise ConfigError("one kind per direction")
        for k in set(self.kinds):
            if k not in DIRECTION_KINDS:
                raise ConfigError(f"unknown direction kind {k!r}")
        if np.any(np.abs(np.linalg.norm(D, axis=1) - 1.0) > UNIT_TOL):
            raise ConfigError("directions must have unit norm")

    @property
    def p(self) -> int:
        return self.directions.shape[1]

    def __len__(self) -> int:
        return self.directions.shape[0]

    def select(self, *kinds: str) -> "DirectionSet":
        idx = [i for i, k in enumerate(self.kinds) if k in kinds]
        return DirectionSet(self.directions[idx], tuple(self.kinds[i] for i in idx))

    def __add__(self, other: "DirectionSet") -> "DirectionSet":
        return DirectionSet(np.vstack([self.directions, other.directions]), self.kinds + other.kinds)


def _normalize(D: np.ndarray) -> np.ndarray:
    D = np.atleast_2d(np.asarray(D, dtype=np.float64))
    nrm = np.linalg.norm(D, axis=1, keepdims=True)
    if np.any(nrm == 0):
        raise ConfigError("zero direction")
    out = D / nrm
    # one more pass removes the last-ulp drift
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def random_unit(p: int, m: int, rng) -> DirectionSet:
    rng = as_generator(rng)
    return DirectionSet(_normalize(rng.standard_normal((m, p))), ("random-unit",) * m)


def coordinate_spikes(p: int, m: int, rng=None, indices: Sequence[int] | None = None) -> DirectionSet:
    """Standard basis vectors: the least spread-out unit directions."""
    if indices is None:
        indices = as_generator(rng).choice(p, size=min(m, p), replace=False)
    D = np.zeros((len(indices), p))
    D[np.arange(len(indices)), np.asarray(indices)] = 1.0
    return DirectionSet(D, ("coordinate-spike",) * len(indices))


def trained_rows(est) -> DirectionSet:
    """Normalized rows of a fitted estimator's parameter matrix."""
    th = np.atleast_2d(est.theta if hasattr(est, "theta") else est)
    return DirectionSet(_normalize(th), ("trained-rows",) * th.shape[0])


def user_directions(D: np.ndarray) -> DirectionSet:
    D = _normalize(D)
    return DirectionSet(D, ("user",) * D.shape[0])


def default_directions(p: int, rng, est=None, n_random: int = 64, n_spikes: int = 8) -> DirectionSet:
    rng = as_generator(rng)
    out = random_unit(p, n_random, rng)
    if est is not None:
        out = out + trained_rows(est)
    return out + coordinate_spikes(p, n_spikes, rng)


def project_conditional(ds: Dataset, theta: np.ndarray) -> dict[int, np.ndarray]:
    """Projections ``theta . x_i`` grouped by cluster index."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if theta.shape[0] != ds.p:
        raise ConfigError(f"direction length {theta.shape[0]} does not match p={ds.p}")
    proj = ds.X @ theta
    return {c: proj[ds.c == c] for c in range(ds.k) if np.any(ds.c == c)}


def _check(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ConfigError("distance needs two nonempty samples")
    return a, b


def _cdf_gaps(a: np.ndarray, b: np.ndarray):
    a, b = np.sort(a), np.sort(b)
    grid = np.concatenate([a, b])
    grid.sort(kind="mergesort")
    Fa = np.searchsorted(a, grid, side="right") / a.size
    Fb = np.searchsorted(b, grid, side="right") / b.size
    return grid, Fa - Fb


def dist_ks(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic ``sup |F_a - F_b|``."""
    a, b = _check(a, b)
    _, gap = _cdf_gaps(a, b)
    return float(np.max(np.abs(gap)))


def dist_w1(a, b) -> float:
    """Exact Wasserstein-1 distance between two empirical measures, ``int |F_a - F_b|``."""
    a, b = _check(a, b)
    if a.size == b.size:
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    grid, gap = _cdf_gaps(a, b)
    return float(np.sum(np.abs(gap[:-1]) * np.diff(grid)))


@dataclass(frozen=True)
class CltReport:
    """Distances per (cluster, direction) and per-cluster suprema by direction kind."""

    rows: tuple[dict, ...]
    suprema: dict
    metadata: dict = field(default_factory=dict)

    def sup(self, metric: str = "w1", kinds: Sequence[str] | None = None) -> float:
        """Supremum over clusters and over directions of the given kinds."""
        vals = [r[metric] for r in self.rows if kinds is None or r["kind"] in kinds]
        return float(max(vals)) if vals else 0.0

    def cluster_sup(self, c: int, metric: str = "w1", kinds: Sequence[str] | None = None) -> float:
        vals = [r[metric] for r in self.rows if r["cluster"] == c and (kinds is None or r["kind"] in kinds)]
        return float(max(vals)) if vals else 0.0

    def to_json(self) -> dict:
        return {"rows": list(self.rows), "suprema": self.suprema, "metadata": self.metadata}

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "clt_report.json").write_text(json.dumps(self.to_json(), indent=1))
        with open(out / "clt_table.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cluster", "direction_id", "ks", "w1"])
            for r in self.rows:
                w.writerow([r["cluster"], r["direction_id"], f"{r['ks']:.10g}", f"{r['w1']:.10g}"])


def clt_report(data: Dataset, gmm: Dataset, dirs: DirectionSet, min_count: int = 1000,
               metadata: dict | None = None) -> CltReport:
    if data.p != gmm.p or dirs.p != data.p:
        raise ConfigError("data, gmm and directions must share p")
    cd = set(np.unique(data.c).tolist())
    cg = set(np.unique(gmm.c).tolist())
    if cd != cg:
        raise ConfigError(f"clusters {sorted(cd ^ cg)} appear in only one dataset")
    for c in sorted(cd):
        nd, ng = int(np.sum(data.c == c)), int(np.sum(gmm.c == c))
        if min(nd, ng) < min_count:
            raise ConfigError(f"cluster {c} has {min(nd, ng)} samples; need {min_count}")
    Pd = data.X @ dirs.directions.T
    Pg = gmm.X @ dirs.directions.T
    rows = []
    for c in sorted(cd):
        a_all, b_all = Pd[data.c == c], Pg[gmm.c == c]
        for j in range(len(dirs)):
            a, b = a_all[:, j], b_all[:, j]
            rows.append({"cluster": int(c), "direction_id": j, "kind": dirs.kinds[j],
                         "ks": dist_ks(a, b), "w1": dist_w1(a, b), "n_data": a.size, "n_gmm": b.size})
    suprema = {}
    for c in sorted(cd):
        for kind in sorted(set(dirs.kinds)):
            sel = [r for r in rows if r["cluster"] == c and r["kind"] == kind]
            suprema[f"{c}/{kind}"] = {"ks": max(r["ks"] for r in sel), "w1": max(r["w1"] for r in sel)}
    meta = {"p": data.p, "n_directions": len(dirs)}
    meta.update(metadata or {})
    return CltReport(tuple(rows), suprema, meta)


def null_band(data: Dataset, gmm: Dataset, dirs: DirectionSet, rng, n_perm: int = 200,
              quantile: float = 0.95, metric: str = "w1") -> dict[int, float]:
    """Per-cluster permutation quantile of the supremum distance under exchangeability."""
    rng = as_generator(rng)
    dist = dist_w1 if metric == "w1" else dist_ks
    out = {}
    for c in sorted(set(np.unique(data.c).tolist())):
        A = data.X[data.c == c] @ dirs.directions.T
        B = gmm.X[gmm.c == c] @ dirs.directions.T
        pool = np.vstack([A, B])
        na = A.shape[0]
        sups = np.empty(n_perm)
        for t in range(n_perm):
            perm = rng.permutation(pool.shape[0])
            P = pool[perm]
            sups[t] = max(dist(P[:na, j], P[na:, j]) for j in range(pool.shape[1]))
        out[c] = float(np.quantile(sups, quantile))
    return out


# ----------------------------------------------------------------------------- random-features regime

@dataclass(frozen=True)
class FeaturePair:
    data: Dataset
    gmm: Dataset
    train: Dataset
    equivalent: MixtureSpec


def random_features_pair(d: int, p: int, n: int, activation: str, seed: int,
                         moments: str = "auto", mc_samples: int = 200_000,
                         n_train: int = 0, latent: MixtureSpec | None = None) -> FeaturePair:
    """Feature-mapped latent mixture data, an independent draw from its equivalent GMM
    and an optional independent training split.

    ``moments="quadrature"`` computes the exact feature moments; ``"mc"``
    estimates them from ``mc_samples`` fresh draws. ``"auto"`` uses
    quadrature for smooth activations.
    """
    act = ActivationSpec(activation)
    if moments == "auto":
        moments = "mc" if act.assumption_violating else "quadrature"
    latent = latent or symmetric_mixture(d, stream(seed, "latent"))
    fm = init_random_features(d, p, stream(seed, "features"))
    data = apply_feature_map(fm, act, sample_mixture(latent, n, stream(seed, "data")))
    if moments == "quadrature":
        means, covs = feature_moments(fm, act, latent)
        eq = build_gmm_spec(latent.weights, list(means), covs)
    elif moments == "mc":
        singles = [build_gmm_spec([1.0], [cl.mean], [cl.cov]) for cl in latent.clusters]

        def draw(j, m, rng):
            return apply_feature_map(fm, act, sample_mixture(singles[j], m, rng)).X

        eq = build_equivalent_gmm(mc_class_moments(draw, latent.weights, mc_samples, stream(seed, "moments")))
        eq = build_gmm_spec(latent.weights, [c.mean for c in eq.clusters], [c.dense_cov() for c in eq.clusters])
    else:
        raise ConfigError(f"unknown moment method {moments!r}")
    gmm = sample_mixture(eq, n, stream(seed, "gmm"))
    train = (apply_feature_map(fm, act, sample_mixture(latent, n_train, stream(seed, "train")))
             if n_train else None)
    return FeaturePair(data, gmm, train, eq)


@dataclass(frozen=True)
class DecayTable:
    p: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    per_seed: np.ndarray
    slope: float

    def monotone_decreasing(self, n_se: float = 1.0) -> bool:
        """Each step down the grid changes the mean by no more than ``+n_se`` combined SE."""
        for i in range(len(self.p) - 1):
            tol = n_se * np.hypot(self.se[i], self.se[i + 1])
            if self.mean[i + 1] > self.mean[i] + tol:
                return False
        return True

    def rows(self) -> list[dict]:
        return [{"p": int(p), "mean_sup": float(m), "se": float(s)} for p, m, s in zip(self.p, self.mean, self.se)]


def decay_study(generator: Callable[[int, int], float], p_grid: Sequence[int],
                seeds: Sequence[int]) -> DecayTable:
    """Tabulate ``generator(p, seed) -> sup-distance`` over a p grid and seeds.

    The slope is a least-squares fit of log(mean) against log(p).
    """
    p_arr = np.asarray(p_grid)
    if np.any(np.diff(p_arr) <= 0):
        raise ConfigError("p_grid must be increasing")
    vals = np.array([[generator(int(p), int(s)) for s in seeds] for p in p_arr])
    mean = vals.mean(axis=1)
    se = vals.std(axis=1, ddof=1) / np.sqrt(vals.shape[1]) if vals.shape[1] > 1 else np.zeros(len(p_arr))
    slope = float(np.polyfit(np.log(p_arr), np.log(np.maximum(mean, 1e-300)), 1)[0]) if len(p_arr) > 1 else 0.0
    return DecayTable(p_arr, mean, se, vals, slope)
