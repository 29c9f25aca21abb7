"""Orthogonalization and spectral-norm estimation, plus exact SVD-based oracles."""

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, RankDeficientError, ShapeError
from .matrix import as_matrix, svd_oracle


@dataclass(frozen=True)
class NewtonSchulzConfig:
    k_ns: int = 5
    eps: float = 1e-7
    coeff_a: float = 3.4445
    coeff_b: float = -4.7750
    coeff_c: float = 2.0315


@dataclass
class SpectralEstimate:
    sigma: float
    u: np.ndarray


DEFAULT_NS = NewtonSchulzConfig()


def ortho_newton_schulz(g, cfg=DEFAULT_NS):
    """Approximate ``U @ V.T`` of ``g`` with the quintic Newton-Schulz iteration.

    The input is scaled by ``1 / (||g||_F + eps)`` and put in wide orientation
    before ``cfg.k_ns`` polynomial applications. The Gram product uses the
    short side: ``X p(X^T X) == p(X X^T) X``.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.size == 0:
        raise ShapeError(f"ortho_newton_schulz: expected non-empty 2-D input, got {g.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("ortho_newton_schulz: non-finite input")
    a, b, c = cfg.coeff_a, cfg.coeff_b, cfg.coeff_c
    x = g / (np.sqrt(np.sum(g * g)) + cfg.eps)
    tall = g.shape[0] > g.shape[1]
    if tall:
        x = x.T
    for _ in range(cfg.k_ns):
        gram = x @ x.T
        x = a * x + (b * gram + c * (gram @ gram)) @ x
    if tall:
        x = x.T
    return np.ascontiguousarray(x)


def exact_orthogonalize(g, rel_tol=1e-10):
    g = as_matrix(g, "exact_orthogonalize input")
    u, s, v = svd_oracle(g)
    if s[0] == 0.0 or s[-1] < rel_tol * s[0]:
        raise RankDeficientError(
            f"exact_orthogonalize: rank-deficient input (sigma_min={s[-1]:.3e}, sigma_max={s[0]:.3e})"
        )
    return u @ v.T


def power_iter(w, u0, k=1):
    """Rayleigh-quotient estimate of the top singular pair after ``k`` rounds.

    The estimate never exceeds the true spectral norm. A zero matrix returns
    ``sigma = 0`` and hands ``u0`` back unchanged.
    """
    w = np.asarray(w, dtype=np.float64)
    u = np.asarray(u0, dtype=np.float64).ravel()
    if w.ndim != 2 or u.shape[0] != w.shape[0]:
        raise ShapeError(f"power_iter: vector of length {u.shape[0]} does not match {w.shape}")
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(u))):
        raise NonFiniteError("power_iter: non-finite input")
    if k < 1:
        raise ValueError("power_iter: k must be positive")
    if not np.any(w):
        return SpectralEstimate(0.0, u.copy())
    u = u / np.linalg.norm(u)
    for _ in range(k):
        v = w.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            # u is orthogonal to the column space; restart from the largest column
            col = w[:, np.argmax(np.sum(w * w, axis=0))]
            u = col / np.linalg.norm(col)
            v = w.T @ u
            nv = np.linalg.norm(v)
        v = v / nv
        u = w @ v
        u = u / np.linalg.norm(u)
    sigma = float(u @ (w @ v))
    return SpectralEstimate(sigma, u)


def exact_spectral_norm(w):
    w = as_matrix(w, "exact_spectral_norm input")
    if not np.any(w):
        return 0.0
    _, s, _ = svd_oracle(w)
    return float(s[0])


def factored_spectral_norm(p, q):
    """Exact ``||p @ q.T||_2`` through QR of the thin factors.

    Only the small ``k x k`` core ``R_p R_q^T`` goes through the SVD oracle.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape[1] != q.shape[1]:
        raise ShapeError(f"factored_spectral_norm: inner dimensions {p.shape} vs {q.shape}")
    if p.shape[1] >= min(p.shape[0], q.shape[0]):
        return exact_spectral_norm(p @ q.T)
    _, rp = np.linalg.qr(p)
    _, rq = np.linalg.qr(q)
    return exact_spectral_norm(rp @ rq.T)
