import numpy as np
import pytest
from hypothesis import given, strategies as st

from ulab.errors import ConfigError
from ulab.mixture import Dataset, build_gmm_spec, sample_mixture
from ulab.moments import (ClassMoments, MomentAccumulator, allocate, build_equivalent_gmm,
                          estimate_class_moments, mc_class_moments, psd_project)
from ulab.rng import stream


@given(st.integers(2, 60), st.integers(1, 5), st.integers(1, 59), st.booleans(), st.integers(0, 999))
def test_accumulator_merge_matches_one_shot(n, p, cut, diagonal, seed):
    cut = min(cut, n - 1)
    X = np.random.default_rng(seed).standard_normal((n, p)) * 3 + 1
    a = MomentAccumulator(p, diagonal).update(X[:cut])
    b = MomentAccumulator(p, diagonal).update(X[cut:])
    m = a.merge(b)
    ref = np.cov(X.T, ddof=1).reshape(p, p)
    assert np.allclose(m.mean, X.mean(0), atol=1e-12)
    assert np.allclose(m.covariance(), np.diag(ref) if diagonal else ref, atol=1e-10)


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8), st.integers(0, 10_000))
def test_allocate_sums(ws, N):
    if sum(ws) == 0:
        ws = [1.0] * len(ws)
    w = np.array(ws) / np.sum(ws)
    a = allocate(w, N)
    assert a.sum() == N and np.all(a >= 0)
    assert np.all(np.abs(a - w * N) < 1 + 1e-9)


@given(st.integers(1, 6), st.integers(0, 999), st.floats(0.0, 0.5))
def test_psd_project(p, seed, floor):
    A = np.random.default_rng(seed).standard_normal((p, p))
    S = A + A.T
    P = psd_project(S, floor)
    assert np.linalg.eigvalsh(P)[0] >= floor - 1e-10
    assert np.allclose(psd_project(P, floor), P, atol=1e-10)


def test_psd_project_rejects_asymmetric():
    with pytest.raises(ConfigError):
        psd_project(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_class_moments_match_numpy(tmp_path):
    spec = build_gmm_spec([0.4, 0.6], [[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]], [[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]])
    ds = sample_mixture(spec, 3000, stream(0))
    m = estimate_class_moments(ds)
    for j in range(2):
        X = ds.X[ds.c == j]
        assert np.allclose(m.means[j], X.mean(0)) and np.allclose(m.covs[j], np.cov(X.T))
    assert m.counts.sum() == 3000
    assert np.allclose(m.weights, m.counts / 3000)
    md = estimate_class_moments(ds, diagonal=True)
    assert np.allclose(md.covs[0], np.diag(m.covs[0]))
    m.save(tmp_path / "m.json")
    back = ClassMoments.load(tmp_path / "m.json")
    assert np.array_equal(back.means, m.means) and all(np.array_equal(a, b) for a, b in zip(back.covs, m.covs))


def test_small_cluster_rejected():
    ds = Dataset(np.zeros((3, 2)), np.zeros(3), np.array([0, 0, 1]), 2)
    with pytest.raises(ConfigError):
        estimate_class_moments(ds)


def test_equivalent_gmm_preserves_moments():
    spec = build_gmm_spec([0.5, 0.5], [[1.0, -1.0], [0.0, 2.0]],
                          [np.array([[1.0, 0.3], [0.3, 0.5]]), np.array([[2.0, 0.0], [0.0, 1.0]])])
    ds = sample_mixture(spec, 4000, stream(1))
    m = estimate_class_moments(ds)
    g = build_equivalent_gmm(m)
    for j, cl in enumerate(g.clusters):
        assert np.allclose(cl.mean, m.means[j])
        assert np.allclose(cl.dense_cov(), m.covs[j], atol=1e-12)
    assert np.allclose(g.weights, m.weights)


def test_streaming_moments_converge():
    spec = build_gmm_spec([1.0], [[0.5, -0.5]], [[1.0, 4.0]])
    gen = lambda j, k, rng: sample_mixture(spec, k, rng).X
    m = mc_class_moments(gen, [1.0], 200_000, stream(2), batch=7000)
    assert np.allclose(m.means[0], [0.5, -0.5], atol=0.02)
    assert np.allclose(np.diag(m.covs[0]), [1.0, 4.0], rtol=0.02)
    with pytest.raises(ConfigError):
        mc_class_moments(gen, [0.999, 0.001], 100, stream(2))
