import numpy as np
import pytest

from scalr.gradcheck import batched_loss, gradient_check, numeric_gradient, relative_error


def test_relative_error():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 0]), np.array([0, 1.0])) == pytest.approx(np.sqrt(2))


def test_numeric_gradient_of_linear_block(rng):
    # the loss is linear in W2, so central differences are exact up to round-off
    w1, w3 = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    w2 = rng.normal(size=(3, 6))
    k, v = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    eta = np.ones(4)
    g = numeric_gradient((w1, w2, w3), k, v, eta)["w2"]
    h1, h3 = k @ w1.T, k @ w3.T
    z = h1 / (1 + np.exp(-h1)) * h3
    assert np.allclose(g, -v.T @ z, rtol=0, atol=1e-8)
    assert np.isclose(batched_loss(w1, w2, w3, k, v, eta), -np.sum((z @ w2.T) * v))


def test_gradient_check_passes_and_catches_errors():
    ok = gradient_check(n_instances=30, seed=1)
    assert ok.passed and max(ok.max_error.values()) < 1e-6
    assert ok.lines()[-1].startswith("PASS: 30 instances")
    bad = gradient_check(n_instances=5, seed=1, perturb="w3")
    assert not bad.passed and bad.failures == 5
