import numpy as np
import pytest
from hypothesis import given, strategies as st

from ulab.errors import ConfigError, NumericalError
from ulab.mixture import (Dataset, MixtureSpec, TeacherSpec, assign_clusters, binary_labels_from_clusters,
                          build_gmm_spec, cov_factor, label_dataset, sample_mixture)
from ulab.rng import stream


def _spec():
    A = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.2], [0.0, 0.2, 0.5]])
    return build_gmm_spec([0.3, 0.7], [[1.0, 0.0, -1.0], [0.0, 2.0, 0.0]], [A, [0.5, 1.0, 1.5]])


def test_spec_validation():
    with pytest.raises(ConfigError):
        build_gmm_spec([0.5, 0.4], [[0.0], [0.0]], [[1.0], [1.0]])
    with pytest.raises(ConfigError):
        build_gmm_spec([1.0], [[0.0, 0.0]], [np.array([[1.0, 0.5], [0.0, 1.0]])])
    with pytest.raises(ConfigError):
        build_gmm_spec([1.0], [[0.0, 0.0]], [np.array([[1.0, 2.0], [2.0, 1.0]])])
    with pytest.raises(ConfigError):
        build_gmm_spec([1.0], [[0.0, 0.0]], [[1.0]])
    with pytest.raises(ConfigError):
        build_gmm_spec([], [], [])


def test_spec_json_roundtrip(tmp_path):
    s = _spec()
    s.save(tmp_path / "m.json")
    t = MixtureSpec.load(tmp_path / "m.json")
    assert t.k == 2 and t.p == 3
    assert np.array_equal(t.weights, s.weights)
    for a, b in zip(s.clusters, t.clusters):
        assert np.array_equal(a.mean, b.mean) and np.array_equal(a.dense_cov(), b.dense_cov())
        assert a.diagonal == b.diagonal


def test_sample_moments_match_spec():
    s = _spec()
    ds = sample_mixture(s, 200_000, stream(0, "mix"))
    assert ds.X.shape == (200_000, 3) and ds.k == 2
    frac = np.mean(ds.c == 0)
    assert abs(frac - 0.3) < 4 * np.sqrt(0.3 * 0.7 / ds.n)
    for j, cl in enumerate(s.clusters):
        X = ds.X[ds.c == j]
        assert np.allclose(X.mean(0), cl.mean, atol=0.02)
        assert np.allclose(np.cov(X.T), cl.dense_cov(), atol=0.03)


def test_sample_reproducible():
    s = _spec()
    a = sample_mixture(s, 100, stream(9))
    b = sample_mixture(s, 100, stream(9))
    assert np.array_equal(a.X, b.X) and np.array_equal(a.c, b.c)
    with pytest.raises(ConfigError):
        sample_mixture(s, 0, stream(9))


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6), st.lists(st.floats(0, 1), min_size=1, max_size=50))
def test_assign_clusters_inverse_cdf(ws, us):
    w = np.array(ws) / np.sum(ws)
    u = np.sort(np.array(us))
    c = assign_clusters(w, u)
    assert np.all((c >= 0) & (c < len(w)))
    assert np.all(np.diff(c) >= 0)


@given(st.integers(1, 6), st.integers(0, 10_000))
def test_cov_factor_squares_back(p, seed):
    g = np.random.default_rng(seed)
    A = g.standard_normal((p, p + 2))
    C = A @ A.T
    F = cov_factor(C)
    assert np.allclose(F @ F.T, C, atol=1e-9 * max(1.0, np.abs(C).max()))


def test_cov_factor_rejects_indefinite():
    with pytest.raises(NumericalError):
        cov_factor(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_labels():
    s = build_gmm_spec([0.5, 0.5], [[1.0, 0.0], [-1.0, 0.0]], [[1.0, 1.0], [1.0, 1.0]])
    ds = sample_mixture(s, 5000, stream(1))
    b = binary_labels_from_clusters(ds)
    assert np.array_equal(b.y, np.where(ds.c == 1, 1.0, -1.0))
    oh = label_dataset(ds, TeacherSpec("cluster-index", onehot=True), stream(2))
    assert oh.y.shape == (ds.n, 2) and np.array_equal(oh.y.argmax(1), ds.c)
    th = np.array([1.0, 2.0])
    lin = label_dataset(ds, TeacherSpec("linear-regression", th, noise_scale=0.5), stream(3))
    resid = lin.y - ds.X @ th
    assert abs(resid.std() - 0.5) < 0.03 and lin.y_kind == "real"
    sg = label_dataset(ds, TeacherSpec("sign", th), stream(4))
    assert np.array_equal(sg.y, np.where(ds.X @ th >= 0, 1.0, -1.0))
    with pytest.raises(ConfigError):
        TeacherSpec("sign")
    with pytest.raises(ConfigError):
        label_dataset(ds, TeacherSpec("sign", np.ones(3)), stream(4))


def test_dataset_validation():
    X = np.zeros((3, 2))
    with pytest.raises(ConfigError):
        Dataset(X, np.zeros(3), np.array([0, 1, 2]), 2)
    with pytest.raises(ConfigError):
        Dataset(X, np.zeros(2), np.zeros(3, int), 1)
    with pytest.raises(ConfigError):
        Dataset(X, np.zeros((3, 2)), np.zeros(3, int), 2, "onehot")
