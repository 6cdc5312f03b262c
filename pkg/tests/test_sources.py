import numpy as np
import pytest

from ulab.errors import ConfigError
from ulab.mixture import Dataset
from ulab.rng import stream
from ulab.sources import FeatureSource, MixtureSource, PoolSource, make_source, parse_labeler, symmetric_mixture
from ulab.umds import save_external_dataset


def test_symmetric_mixture():
    s = symmetric_mixture(50, stream(0), mean_norm=2.0, var=0.5)
    assert np.isclose(np.linalg.norm(s.means[0]), 2.0) and np.allclose(s.means[0], -s.means[1])
    assert all(c.diagonal and np.allclose(c.cov, 0.5) for c in s.clusters)


def test_make_mixture_and_teacher():
    src = make_source({"type": "mixture", "generator": "single-cluster", "d": 30,
                       "labels": {"rule": "linear-regression", "noise_scale": 0.1}}, seed=3)
    assert isinstance(src, MixtureSource) and src.labeler.kind == "teacher"
    ds = src.sample(200, stream(1))
    assert ds.y_kind == "real"
    again = make_source({"type": "mixture", "generator": "single-cluster", "d": 30,
                         "labels": {"rule": "linear-regression", "noise_scale": 0.1}}, seed=3)
    assert np.array_equal(again.labeler.teacher.theta_star, src.labeler.teacher.theta_star)


def test_make_features_views():
    src = make_source({"type": "features", "d": 10, "p": 12, "views": 2}, seed=0)
    assert isinstance(src, FeatureSource) and src.p == 24
    ds = src.sample(100, stream(2))
    assert ds.X.shape == (100, 24) and set(np.unique(ds.y)) <= {-1.0, 1.0}
    assert not np.allclose(ds.X[:, :12], ds.X[:, 12:])
    m = src.moments(2000, stream(3))
    eq = src.equivalent(m)
    assert eq.p == 24 and eq.k == 2


def test_pool_split_is_disjoint(tmp_path):
    g = np.random.default_rng(0)
    n = 100
    X = np.arange(n, dtype=float)[:, None] * np.ones((1, 3))
    ds = Dataset(X, g.standard_normal(n), g.integers(0, 2, n), 2, "real")
    save_external_dataset(ds, tmp_path)
    src = make_source({"type": "umds", "path": str(tmp_path)}, seed=0)
    assert isinstance(src, PoolSource)
    a, b = src.split([30, 50], stream(1))
    ids_a, ids_b = set(a.X[:, 0]), set(b.X[:, 0])
    assert len(ids_a) == 30 and len(ids_b) == 50 and not ids_a & ids_b
    with pytest.raises(ConfigError):
        src.split([60, 60], stream(1))


def test_bad_sources():
    with pytest.raises(ConfigError):
        make_source({"d": 3}, 0)
    with pytest.raises(ConfigError):
        make_source({"type": "mixture", "generator": "ring", "d": 3}, 0)
    with pytest.raises(ConfigError):
        make_source({"type": "features", "p": 3}, 0)
    with pytest.raises(ConfigError):
        parse_labeler("halves", 3, 0)
    with pytest.raises(ConfigError):
        parse_labeler({"rule": "sign", "theta_star": "uniform"}, 3, 0)
