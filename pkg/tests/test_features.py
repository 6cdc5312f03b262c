import numpy as np
import pytest

import oracles
from ulab.errors import ConfigError
from ulab.features import (ActivationSpec, apply_feature_map, check_centering, feature_moments,
                           init_random_features)
from ulab.mixture import build_gmm_spec, sample_mixture
from ulab.rng import stream


@pytest.mark.parametrize("name", ["tanh-centered", "erf-centered", "shifted-relu-centered"])
def test_centered_activations(name):
    act = ActivationSpec(name)
    assert check_centering(act, 1e-10)


def test_flags_and_registry():
    assert ActivationSpec("relu").assumption_violating
    assert ActivationSpec("sign").assumption_violating
    assert not ActivationSpec("tanh-centered").assumption_violating
    assert not check_centering(ActivationSpec("relu"), 1e-3)
    with pytest.raises(ConfigError):
        ActivationSpec("softplus-ish")


def test_shifted_relu_offset():
    assert abs(ActivationSpec("shifted-relu-centered").offset - 1 / np.sqrt(2 * np.pi)) < 1e-12


def test_feature_matrix_scale():
    fm = init_random_features(400, 600, stream(0))
    assert fm.F.shape == (400, 600) and fm.ratio == 1.5
    assert abs(fm.F.var() * 400 - 1.0) < 0.01
    with pytest.warns(UserWarning):
        init_random_features(2, 100, stream(0))
    with pytest.raises(ConfigError):
        init_random_features(0, 3, stream(0))


def test_apply_dim_mismatch():
    fm = init_random_features(3, 4, stream(0))
    ds = sample_mixture(build_gmm_spec([1.0], [np.zeros(5)], [np.ones(5)]), 3, stream(1))
    with pytest.raises(ConfigError):
        apply_feature_map(fm, ActivationSpec("tanh-centered"), ds)


def test_quadrature_means_match_oracle(frozen):
    for row in frozen["tanh_mean"]:
        assert abs(oracles.gaussian_feature_mean(np.tanh, row["m"], row["s"]) - row["value"]) < 1e-12
    d, p = 6, 5
    fm = init_random_features(d, p, stream(2))
    mu = np.linspace(-1, 1, d)
    lat = build_gmm_spec([0.5, 0.5], [mu, -mu], [np.full(d, 0.8), np.full(d, 1.3)])
    means, covs = feature_moments(fm, ActivationSpec("tanh-centered"), lat)
    for c, cl in enumerate(lat.clusters):
        m = fm.F.T @ cl.mean
        s = np.sqrt(np.diag(fm.F.T @ cl.dense_cov() @ fm.F))
        ref = [oracles.gaussian_feature_mean(np.tanh, a, b) for a, b in zip(m, s)]
        assert np.allclose(means[c], ref, atol=1e-10)
        assert np.allclose(covs[c], covs[c].T)
        assert np.linalg.eigvalsh(covs[c])[0] > -1e-12


def test_quadrature_covariance_matches_monte_carlo():
    d, p = 8, 6
    fm = init_random_features(d, p, stream(3))
    lat = build_gmm_spec([1.0], [np.full(d, 0.3)], [np.ones(d)])
    act = ActivationSpec("tanh-centered")
    _, covs = feature_moments(fm, act, lat)
    X = apply_feature_map(fm, act, sample_mixture(lat, 400_000, stream(4))).X
    assert np.allclose(np.cov(X.T), covs[0], atol=4e-3)
