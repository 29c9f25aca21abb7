import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spectron.errors import NonFiniteError, RankDeficientError, ShapeError
from spectron.matrix import svd_oracle
from spectron.spectral import (
    DEFAULT_NS,
    NewtonSchulzConfig,
    exact_orthogonalize,
    exact_spectral_norm,
    factored_spectral_norm,
    ortho_newton_schulz,
    power_iter,
)

BAND = (0.5, 1.5)

shapes = st.tuples(st.integers(1, 24), st.integers(1, 24))
seeds = st.integers(0, 2**32 - 1)


def with_spectrum(rng, m, n, s):
    u, _ = np.linalg.qr(rng.normal(size=(m, len(s))))
    v, _ = np.linalg.qr(rng.normal(size=(n, len(s))))
    return u * s @ v.T


def test_default_coefficients():
    assert (DEFAULT_NS.coeff_a, DEFAULT_NS.coeff_b, DEFAULT_NS.coeff_c) == (3.4445, -4.7750, 2.0315)
    assert DEFAULT_NS.k_ns == 5 and DEFAULT_NS.eps == 1e-7


@pytest.mark.parametrize("shape", [(3, 3), (4, 9), (9, 4), (1, 5)])
def test_ns_zero_stays_zero(shape):
    assert np.array_equal(ortho_newton_schulz(np.zeros(shape)), np.zeros(shape))


def test_ns_on_orthogonal_matrix(rng):
    q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    out = ortho_newton_schulz(q)
    u, s, v = svd_oracle(out)
    assert BAND[0] <= s.min() and s.max() <= BAND[1]
    # the band caps each |s^2 - 1| at 1.25
    assert np.linalg.norm(out @ out.T - np.eye(8)) <= 0.5
    assert np.allclose(u @ v.T, q, atol=1e-9)


def test_ns_wide_random(rng):
    g = rng.normal(size=(64, 256))
    out = ortho_newton_schulz(g)
    _, s, _ = svd_oracle(out)
    assert BAND[0] <= s.min() and s.max() <= BAND[1]
    assert np.linalg.norm(out - exact_orthogonalize(g)) / np.sqrt(64) <= 0.35


def test_ns_singular_values_enter_band_above_threshold(rng):
    # five quintic steps lift any normalized singular value >= 1.1e-3 into the band
    for _ in range(20):
        m, n = rng.integers(2, 40, size=2)
        k = min(m, n)
        s = np.geomspace(1.0, 1.0, k)
        s[-1] = 1.1e-3 * np.sqrt(k)
        g = with_spectrum(rng, m, n, s)
        _, out, _ = svd_oracle(ortho_newton_schulz(g))
        assert BAND[0] <= out.min() and out.max() <= BAND[1]


def test_ns_rank_deficient_keeps_null_directions(rng):
    g = rng.normal(size=(10, 2)) @ rng.normal(size=(2, 7))
    _, s, _ = svd_oracle(ortho_newton_schulz(g))
    assert np.all(s[:2] >= BAND[0]) and np.all(s[2:] <= 1e-9)


@given(shapes, seeds)
def test_ns_transpose_equivariance(shape, seed):
    g = np.random.default_rng(seed).normal(size=shape)
    assert np.max(np.abs(ortho_newton_schulz(g.T) - ortho_newton_schulz(g).T)) <= 1e-9


@given(shapes, seeds, st.floats(1e-2, 1e2))
def test_ns_scale_invariance(shape, seed, c):
    g = np.random.default_rng(seed).normal(size=shape)
    assert np.max(np.abs(ortho_newton_schulz(c * g) - ortho_newton_schulz(g))) <= 1e-9


@given(shapes, seeds, st.floats(1e-2, 1e2))
def test_ns_scale_invariance_with_scaled_eps(shape, seed, c):
    g = np.random.default_rng(seed).normal(size=shape)
    scaled = NewtonSchulzConfig(eps=c * DEFAULT_NS.eps)
    assert np.max(np.abs(ortho_newton_schulz(c * g, scaled) - ortho_newton_schulz(g))) <= 1e-9


def test_ns_errors():
    with pytest.raises(NonFiniteError):
        ortho_newton_schulz(np.array([[1.0, np.inf]]))
    with pytest.raises(ShapeError):
        ortho_newton_schulz(np.ones(3))


def test_exact_orthogonalize_cases(rng):
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    assert np.allclose(exact_orthogonalize(q), q, atol=1e-9)
    assert np.allclose(exact_orthogonalize(np.diag([5.0, 0.1])), np.eye(2), atol=1e-12)
    out = exact_orthogonalize(rng.normal(size=(6, 3)))
    assert np.linalg.norm(out.T @ out - np.eye(3)) <= 1e-9


def test_exact_orthogonalize_rank_deficient():
    with pytest.raises(RankDeficientError):
        exact_orthogonalize(np.outer([1.0, 2.0, 3.0], [1.0, 1.0]))


def test_power_iter_fixed_point():
    est = power_iter(np.diag([3.0, 1.0]), np.array([1.0, 0.0]))
    assert est.sigma == 3.0
    assert np.array_equal(np.abs(est.u), [1.0, 0.0])


def test_power_iter_converges():
    est = power_iter(np.diag([3.0, 1.0]), np.array([1.0, 1.0]) / np.sqrt(2), k=20)
    assert abs(est.sigma - 3.0) <= 1e-6


def test_power_iter_warm_start(rng):
    w = rng.normal(size=(32, 16))
    u = np.ones(32) / np.sqrt(32)
    for _ in range(50):
        est = power_iter(w, u, k=1)
        u = est.u
    assert abs(est.sigma - svd_oracle(w)[1][0]) <= 1e-4


def test_power_iter_zero_matrix():
    u0 = np.array([0.6, 0.8])
    est = power_iter(np.zeros((2, 3)), u0)
    assert est.sigma == 0.0 and np.array_equal(est.u, u0)


def test_power_iter_orthogonal_start():
    w = np.array([[0.0, 0.0], [2.0, 1.0]])
    est = power_iter(w, np.array([1.0, 0.0]))
    assert abs(est.sigma - np.sqrt(5.0)) <= 1e-12


@given(shapes, seeds, st.integers(1, 4))
def test_power_iter_lower_bound(shape, seed, k):
    g = np.random.default_rng(seed)
    w = g.normal(size=shape)
    u0 = g.normal(size=shape[0])
    est = power_iter(w, u0 / np.linalg.norm(u0), k)
    assert est.sigma >= 0.0
    assert abs(np.linalg.norm(est.u) - 1.0) <= 1e-12
    assert est.sigma <= exact_spectral_norm(w) + 1e-10


def test_exact_spectral_norm_cases():
    assert exact_spectral_norm(np.zeros((3, 3))) == 0.0
    assert abs(exact_spectral_norm(np.diag([2.0, 7.0, 1.0])) - 7.0) <= 1e-14


def test_submultiplicativity(rng):
    for _ in range(500):
        m, k, n = rng.integers(1, 10, size=3)
        x, y = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        assert exact_spectral_norm(x @ y) <= exact_spectral_norm(x) * exact_spectral_norm(y) + 1e-9


@given(st.integers(4, 20), st.integers(4, 20), st.integers(1, 3), seeds)
def test_factored_norm_matches_dense(m, n, k, seed):
    g = np.random.default_rng(seed)
    p, q = g.normal(size=(m, k)), g.normal(size=(n, k))
    assert abs(factored_spectral_norm(p, q) - exact_spectral_norm(p @ q.T)) <= 1e-10 * exact_spectral_norm(p @ q.T)


def test_rms_to_rms_identity(rng):
    m, n = 12, 20
    w = rng.normal(size=(m, n))
    bound = np.sqrt(n / m) * exact_spectral_norm(w)
    x = rng.normal(size=(10**4, n))
    x /= np.sqrt(np.mean(x * x, axis=1, keepdims=True))
    y = x @ w.T
    gains = np.sqrt(np.mean(y * y, axis=1))
    assert gains.max() <= bound + 1e-9
    _, _, v = svd_oracle(w)
    top = v[:, 0] * np.sqrt(n)
    gain = np.sqrt(np.mean((w @ top) ** 2))
    assert gain >= 0.9 * bound
