"""Dense float64 kernels, the Jacobi SVD oracle and the seeded generator.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64; ``as_matrix``
is the single validation gate.
"""

import zlib

import numpy as np
from numba import njit

from .errors import ConvergenceError, NonFiniteError, ShapeError

DenseMatrix = np.ndarray

SVD_MAX_DIM = 2048
SVD_MAX_SWEEPS = 80


def as_matrix(x, name="matrix"):
    """Return ``x`` as a finite 2-D float64 array, raising on anything else."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name}: expected a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name}: contains NaN or Inf entries")
    return a


def matmul(x, y):
    x = as_matrix(x, "X")
    y = as_matrix(y, "Y")
    if x.shape[1] != y.shape[0]:
        raise ShapeError(f"matmul: {x.shape} x {y.shape} do not conform")
    return x @ y


def transpose(x):
    return np.ascontiguousarray(as_matrix(x).T)


def frobenius_norm(x):
    return float(np.sqrt(np.sum(np.square(as_matrix(x)))))


def rms_vec(y):
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size == 0:
        raise ShapeError("rms_vec: empty vector")
    return float(np.sqrt(np.mean(np.square(y))))


@njit(cache=True)
def _jacobi_sweeps(cols, v, tol, max_sweeps):
    """Cyclic one-sided Jacobi on the rows of ``cols``; returns sweeps used or -1."""
    n, m = cols.shape
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += cols[p, i] * cols[p, i]
                    beta += cols[q, i] * cols[q, i]
                    gamma += cols[p, i] * cols[q, i]
                if abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    xp = cols[p, i]
                    xq = cols[q, i]
                    cols[p, i] = c * xp - s * xq
                    cols[q, i] = s * xp + c * xq
                for i in range(n):
                    vp = v[p, i]
                    vq = v[q, i]
                    v[p, i] = c * vp - s * vq
                    v[q, i] = s * vp + c * vq
        if not rotated:
            return sweep + 1
    return -1


def _complete_basis(u, keep):
    """Replace the columns of ``u`` not flagged in ``keep`` by an orthonormal completion."""
    m, k = u.shape
    good = u[:, keep]
    q, _ = np.linalg.qr(np.hstack([good, np.eye(m)]))
    # first columns of q span the good columns; the rest are the complement
    out = u.copy()
    out[:, ~keep] = q[:, good.shape[1] : good.shape[1] + int((~keep).sum())]
    return out


def svd_oracle(x, tol=1e-15):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``(U, S, V)`` with ``X = U @ diag(S) @ V.T``, singular values in
    descending order. ``V`` accumulates the plane rotations (stored transposed
    while sweeping so every update touches contiguous rows).
    """
    x = as_matrix(x, "svd input")
    if min(x.shape) > SVD_MAX_DIM:
        raise ShapeError(f"svd_oracle: min dimension {min(x.shape)} exceeds {SVD_MAX_DIM}")
    flipped = x.shape[0] < x.shape[1]
    # rows of ``cols`` are the columns being orthogonalized (contiguous gathers)
    cols = x.copy() if flipped else x.T.copy()
    n, m = cols.shape
    v = np.eye(n)
    if _jacobi_sweeps(cols, v, tol, SVD_MAX_SWEEPS) < 0:
        raise ConvergenceError(f"svd_oracle: no convergence after {SVD_MAX_SWEEPS} sweeps")

    work = cols.T
    v = v.T
    sigma = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sigma, kind="stable")
    sigma, work, v = sigma[order], work[:, order], v[:, order]
    floor = max(m, n) * np.finfo(float).eps * (sigma[0] if sigma.size else 0.0)
    keep = sigma > floor
    u = np.zeros_like(work)
    u[:, keep] = work[:, keep] / sigma[keep]
    if not np.all(keep):
        u = _complete_basis(u, keep)
    if flipped:
        return v, sigma, u
    return u, sigma, v


class Rng:
    """Counter-based (Philox) generator addressed by ``(seed, site)``.

    ``Rng(seed).child("block0.attn.q")`` always yields the same stream no
    matter what else was drawn first.
    """

    def __init__(self, seed, site=()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.site = tuple(site)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.site)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, name):
        key = zlib.crc32(str(name).encode("utf-8"))
        return Rng(self.seed, self.site + (key,))

    def normal(self, size=None, scale=1.0):
        return self._gen.normal(0.0, scale, size)

    def uniform(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size)

    def unit_vector(self, n):
        v = self._gen.normal(size=n)
        return v / np.linalg.norm(v)
