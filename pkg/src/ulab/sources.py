"""Data sources for experiments: mixtures, random-feature maps of latent mixtures and UMDS pools."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .features import ActivationSpec, FeatureMatrix, apply_feature_map, init_random_features
from .mixture import (Dataset, MixtureSpec, TeacherSpec, binary_labels_from_clusters, build_gmm_spec,
                      label_dataset, sample_mixture)
from .moments import ClassMoments, build_equivalent_gmm, estimate_class_moments, mc_class_moments
from .rng import as_generator, stream


@dataclass(frozen=True)
class Labeler:
    """How labels are attached: cluster parity (+-1), cluster index, one-hot, or a teacher rule."""

    kind: str = "parity"
    teacher: TeacherSpec | None = None

    def __call__(self, ds: Dataset, rng) -> Dataset:
        if self.kind == "parity":
            return binary_labels_from_clusters(ds)
        if self.kind == "cluster-index":
            return label_dataset(ds, TeacherSpec("cluster-index"), rng)
        if self.kind == "onehot":
            return label_dataset(ds, TeacherSpec("cluster-index", onehot=True), rng)
        return label_dataset(ds, self.teacher, rng)


def parse_labeler(doc, p: int, seed: int) -> Labeler:
    if doc is None or isinstance(doc, str):
        kind = doc or "parity"
        if kind not in ("parity", "cluster-index", "onehot"):
            raise ConfigError(f"unknown label mapping {kind!r}")
        return Labeler(kind)
    try:
        rule = doc["rule"]
    except (KeyError, TypeError) as exc:
        raise ConfigError("teacher labels need a 'rule'") from exc
    th = doc.get("theta_star", "gaussian")
    if isinstance(th, str):
        if th != "gaussian":
            raise ConfigError(f"unknown teacher draw {th!r}")
        th = stream(seed, "teacher").standard_normal(p) / np.sqrt(p)
    return Labeler("teacher", TeacherSpec(rule, np.asarray(th, dtype=np.float64),
                                          float(doc.get("noise_scale", 0.0))))


def _single(cl) -> MixtureSpec:
    return build_gmm_spec([1.0], [cl.mean], [cl.cov])


class MixtureSource:
    """Gaussian mixture (possibly the equivalent GMM of another source)."""

    provenance = "gmm"

    def __init__(self, spec: MixtureSpec, labeler: Labeler, diagonal_moments: bool = False):
        self.spec = spec
        self.labeler = labeler
        self.diagonal_moments = diagonal_moments
        self._singles = [_single(c) for c in spec.clusters]

    @property
    def p(self) -> int:
        return self.spec.p

    @property
    def k(self) -> int:
        return self.spec.k

    @property
    def weights(self) -> np.ndarray:
        return self.spec.weights

    def sample(self, n: int, rng) -> Dataset:
        rng = as_generator(rng)
        ds = sample_mixture(self.spec, n, rng)
        return self.labeler(ds, rng)

    def cluster_rows(self, j: int, m: int, rng) -> np.ndarray:
        return sample_mixture(self._singles[j], m, rng).X

    def moments(self, N: int, rng) -> ClassMoments:
        return mc_class_moments(self.cluster_rows, self.weights, N, rng, diagonal=self.diagonal_moments)

    def equivalent(self, m: ClassMoments) -> "MixtureSource":
        return MixtureSource(build_equivalent_gmm(m), self.labeler, self.diagonal_moments)


class FeatureSource:
    """``x = [act(F_1^T z), ..., act(F_M^T z)]`` for latent mixture draws ``z``.

    Labels are computed from the latent cluster (or by a teacher on ``x``).
    """

    provenance = "feature-mapped"

    def __init__(self, latent: MixtureSpec, fms: list[FeatureMatrix], act: ActivationSpec, labeler: Labeler):
        self.latent = latent
        self.fms = list(fms)
        self.act = act
        self.labeler = labeler
        self._singles = [_single(c) for c in latent.clusters]
        self.diagonal_moments = False

    @property
    def views(self) -> int:
        return len(self.fms)

    @property
    def p(self) -> int:
        return sum(fm.p for fm in self.fms)

    @property
    def k(self) -> int:
        return self.latent.k

    @property
    def weights(self) -> np.ndarray:
        return self.latent.weights

    def _map(self, z: Dataset) -> Dataset:
        parts = [apply_feature_map(fm, self.act, z).X for fm in self.fms]
        X = parts[0] if len(parts) == 1 else np.hstack(parts)
        return replace(z, X=X, provenance="feature-mapped")

    def sample(self, n: int, rng) -> Dataset:
        rng = as_generator(rng)
        ds = self._map(sample_mixture(self.latent, n, rng))
        return self.labeler(ds, rng)

    def cluster_rows(self, j: int, m: int, rng) -> np.ndarray:
        return self._map(sample_mixture(self._singles[j], m, rng)).X

    def moments(self, N: int, rng) -> ClassMoments:
        return mc_class_moments(self.cluster_rows, self.weights, N, rng)

    def equivalent(self, m: ClassMoments) -> MixtureSource:
        return MixtureSource(build_equivalent_gmm(m), self.labeler)


class PoolSource:
    """A finite external dataset; draws are disjoint row subsets of the pool."""

    provenance = "external"

    def __init__(self, pool: Dataset, labeler: Labeler | None):
        self.pool = pool
        self.labeler = labeler
        self.diagonal_moments = False

    @property
    def p(self) -> int:
        return self.pool.p

    @property
    def k(self) -> int:
        return self.pool.k

    @property
    def weights(self) -> np.ndarray:
        return np.bincount(self.pool.c, minlength=self.k) / self.pool.n

    def split(self, sizes, rng) -> list[Dataset]:
        rng = as_generator(rng)
        if sum(sizes) > self.pool.n:
            raise ConfigError(f"pool of {self.pool.n} rows cannot supply {sum(sizes)} disjoint draws")
        perm = rng.permutation(self.pool.n)
        out, start = [], 0
        for s in sizes:
            ds = self.pool.subset(np.sort(perm[start:start + s]))
            out.append(self.labeler(ds, rng) if self.labeler else ds)
            start += s
        return out

    def sample(self, n: int, rng) -> Dataset:
        return self.split([n], rng)[0]

    def moments(self, N: int, rng) -> ClassMoments:
        return estimate_class_moments(self.pool)

    def equivalent(self, m: ClassMoments) -> MixtureSource:
        return MixtureSource(build_equivalent_gmm(m), self.labeler or Labeler("cluster-index"))


def symmetric_mixture(d: int, rng, mean_norm: float = 1.0, var: float = 1.0) -> MixtureSpec:
    """Two equal-weight clusters ``N(+-mu, var I)`` (diagonal storage), ``||mu|| = mean_norm``."""
    rng = as_generator(rng)
    mu = rng.standard_normal(d)
    mu *= mean_norm / np.linalg.norm(mu)
    return build_gmm_spec([0.5, 0.5], [mu, -mu], [np.full(d, var), np.full(d, var)])


def single_cluster(d: int, rng, spectrum=(0.5, 1.5)) -> MixtureSpec:
    """One centered cluster with a diagonal spectrum drawn uniformly from ``spectrum``."""
    lo, hi = spectrum
    if not 0 < lo <= hi:
        raise ConfigError("spectrum bounds must satisfy 0 < lo <= hi")
    sig = as_generator(rng).uniform(lo, hi, d)
    return build_gmm_spec([1.0], [np.zeros(d)], [sig])


def _mixture_from(doc: dict, seed: int) -> MixtureSpec:
    if "spec" in doc:
        return MixtureSpec.from_json(doc["spec"])
    if "path" in doc:
        return MixtureSpec.load(doc["path"])
    gen = doc.get("generator")
    d = doc.get("d")
    if gen is None or d is None:
        raise ConfigError("mixture source needs 'spec', 'path' or 'generator' with 'd'")
    r = stream(seed, "mixture")
    if gen == "symmetric":
        return symmetric_mixture(int(d), r, float(doc.get("mean_norm", 1.0)), float(doc.get("var", 1.0)))
    if gen == "single-cluster":
        return single_cluster(int(d), r, tuple(doc.get("spectrum", (0.5, 1.5))))
    raise ConfigError(f"unknown mixture generator {gen!r}")


def make_source(doc: dict, seed: int):
    """Build a source from its JSON description under master ``seed``."""
    if not isinstance(doc, dict) or "type" not in doc:
        raise ConfigError("data source needs a 'type'")
    kind = doc["type"]
    if kind == "mixture":
        spec = _mixture_from(doc, seed)
        diag = all(c.diagonal for c in spec.clusters)
        return MixtureSource(spec, parse_labeler(doc.get("labels"), spec.p, seed),
                             diagonal_moments=bool(doc.get("diagonal_moments", diag)))
    if kind == "features":
        try:
            d, p = int(doc["d"]), int(doc["p"])
        except KeyError as exc:
            raise ConfigError(f"feature source lacks {exc.args[0]!r}") from exc
        lat = doc.get("latent", {})
        if "spec" in lat or "path" in lat:
            latent = _mixture_from(lat, seed)
        else:
            latent = symmetric_mixture(d, stream(seed, "latent"), float(lat.get("mean_norm", 1.0)),
                                       float(lat.get("var", 1.0)))
        views = int(doc.get("views", 1))
        if views < 1:
            raise ConfigError("need at least one feature view")
        fms = [init_random_features(d, p, stream(seed, "features") if m == 0 else stream(seed, "features", m))
               for m in range(views)]
        act = ActivationSpec(doc.get("activation", "tanh-centered"))
        return FeatureSource(latent, fms, act, parse_labeler(doc.get("labels"), views * p, seed))
    if kind == "umds":
        from .umds import load_external_dataset
        pool = load_external_dataset(Path(doc["path"]))
        lab = doc.get("labels")
        return PoolSource(pool, None if lab is None else parse_labeler(lab, pool.p, seed))
    raise ConfigError(f"unknown data source type {kind!r}")
