import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noisy_feature_lab.checks import central_difference
from noisy_feature_lab.config import ExperimentConfig
from noisy_feature_lab.model import (ModelWeights, batch_gradient, empirical_loss, forward,
                                     forward_batch, forward_dataset, init_weights, logistic_loss,
                                     loss_derivative, read_weights, write_weights)

from conftest import random_instance


def loop_forward(w, a, b):
    """Direct transcription: F_j = (1/m) sum_r sum_p ReLU(<w_{j,r}, x_p>), f = F_{+1} - F_{-1}."""
    m = w.shape[1]
    F = [0.0, 0.0]
    for j in range(2):
        for r in range(m):
            for x in (a, b):
                F[j] += max(0.0, sum(w[j, r, k] * x[k] for k in range(len(x))))
        F[j] /= m
    return F[0] - F[1]


def test_zero_init():
    W = init_weights(ExperimentConfig(sigma_0=0.0, d=10, m=3))
    assert not W.w.any()


def test_init_std():
    W = init_weights(ExperimentConfig(m=100, d=2000, sigma_0=0.01))
    assert 0.0095 <= W.w.std() <= 0.0105
    assert W.w.shape == (2, 100, 2000)
    assert np.array_equal(W.w, W.w0)


def test_init_reproducible():
    a = init_weights(ExperimentConfig(seed_init=4))
    b = init_weights(ExperimentConfig(seed_init=4))
    assert np.array_equal(a.w, b.w)


def test_forward_zero_weights():
    assert forward(np.zeros((2, 3, 5)), (np.ones(5), -np.ones(5))) == 0.0


def test_forward_hand_example():
    mu = np.array([20.0, 0.0, 0.0])
    w = np.zeros((2, 1, 3))
    w[0, 0] = mu / (mu @ mu)
    assert forward(w, (mu, np.zeros(3))) == pytest.approx(1.0, abs=1e-15)


def test_forward_matches_loops():
    rng = np.random.default_rng(1)
    for _ in range(20):
        d, m = rng.integers(1, 7), rng.integers(1, 4)
        w = rng.standard_normal((2, m, d))
        a, b = rng.standard_normal(d), rng.standard_normal(d)
        assert forward(w, (a, b)) == pytest.approx(loop_forward(w, a, b), rel=1e-12, abs=1e-14)


def test_dataset_and_batch_forward_agree():
    rng = np.random.default_rng(2)
    ds, W = random_instance(rng, 6, 8, 3)
    f = forward_dataset(W, ds)
    for i in range(ds.n):
        assert f[i] == pytest.approx(forward(W, ds.patches(i)), rel=1e-12, abs=1e-14)
    sig = np.array([ds.signal_patch(i) for i in range(ds.n)])
    np.testing.assert_allclose(forward_batch(W, sig, ds.noise), f, rtol=1e-12, atol=1e-14)


def test_forward_rejects_wrong_dimension():
    with pytest.raises(ValueError):
        forward(np.zeros((2, 1, 3)), (np.zeros(4), np.zeros(4)))


def test_loss_values():
    assert logistic_loss(0.0, 1) == pytest.approx(0.6931471805599453, rel=1e-15)
    assert logistic_loss(1.0, -1) == pytest.approx(1.3132616875182228, rel=1e-15)
    tiny = logistic_loss(1000.0, 1)
    assert math.isfinite(tiny) and 0 <= tiny <= 1e-300
    assert logistic_loss(-1000.0, 1) == pytest.approx(1000.0)


def test_loss_derivative_values():
    assert loss_derivative(0.0, 1) == -0.5
    # limits: 0 from below for large correct margins, -1 from above for large wrong ones
    assert -1e-300 <= loss_derivative(1000.0, 1) <= 0
    assert loss_derivative(1000.0, -1) == pytest.approx(-1.0, abs=1e-15)
    assert -1e-13 < loss_derivative(30.0, 1) < 0
    assert -1 < loss_derivative(30.0, -1) < -1 + 1e-12


@settings(max_examples=200, deadline=None)
@given(f=st.floats(-30, 30), y=st.sampled_from([-1, 1]))
def test_loss_derivative_open_interval(f, y):
    v = loss_derivative(f, y)
    assert -1 < v < 0


@settings(max_examples=100, deadline=None)
@given(f=st.floats(-20, 20), y=st.sampled_from([-1, 1]))
def test_loss_derivative_is_derivative(f, y):
    h = 1e-6
    fd = (logistic_loss(f + h, y) - logistic_loss(f - h, y)) / (2 * h)
    # d/df log(1+exp(-y f)) = y * l'
    assert y * loss_derivative(f, y) == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_gradient_zero_when_all_inactive():
    rng = np.random.default_rng(3)
    ds, _ = random_instance(rng, 5, 4, 2)
    w = np.zeros((2, 2, 5))
    assert not batch_gradient(w, ds).any()


def _kink_distance(w, ds):
    sig = np.multiply.outer(w @ ds.mu, ds.y.astype(float))
    noi = np.einsum("jrd,nd->jrn", w, ds.noise)
    return min(np.abs(sig).min(), np.abs(noi).min())


def test_gradient_finite_difference_small():
    rng = np.random.default_rng(4)
    while True:
        ds, W = random_instance(rng, 4, 2, 2)
        if _kink_distance(W.w, ds) > 1e-3:
            break
    g = batch_gradient(W.w, ds)
    for idx in np.ndindex(*W.w.shape):
        fd = central_difference(lambda v: empirical_loss(v, ds), W.w, idx)
        assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), abs(g[idx]), 1e-9)


def test_gradient_in_signal_noise_span():
    rng = np.random.default_rng(5)
    ds, W = random_instance(rng, 12, 4, 3)
    g = batch_gradient(W.w, ds)
    basis = np.vstack([ds.mu, ds.noise]).T
    for j in range(2):
        for r in range(3):
            coef, *_ = np.linalg.lstsq(basis, g[j, r], rcond=None)
            resid = np.linalg.norm(basis @ coef - g[j, r])
            assert resid <= 1e-12 * max(np.linalg.norm(g[j, r]), 1e-300)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 8), m=st.integers(1, 4))
def test_patch_order_invariance(seed, d, m):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((2, m, d))
    a, b = rng.standard_normal(d), rng.standard_normal(d)
    assert forward(w, (a, b)) == forward(w, (b, a))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(1e-3, 1e3))
def test_positive_homogeneity(seed, c):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((2, 3, 5))
    x = (rng.standard_normal(5), rng.standard_normal(5))
    assert forward(c * w, x) == pytest.approx(c * forward(w, x), rel=1e-12, abs=1e-12)


def test_weights_round_trip(tmp_path):
    W = init_weights(ExperimentConfig(d=7, m=3, seed_init=9))
    W2 = W.with_weights(W.w + 0.5)
    write_weights(W2, tmp_path / "w.txt")
    back = read_weights(tmp_path / "w.txt")
    assert np.array_equal(back.w, W2.w) and np.array_equal(back.w0, W.w0)
    assert (back.sigma_0, back.seed_init) == (W.sigma_0, 9)


def test_init_weights_are_immutable():
    W = init_weights(ExperimentConfig(d=4, m=2))
    with pytest.raises(ValueError):
        W.w0[0, 0, 0] = 1.0
    assert isinstance(W, ModelWeights)
