"""Spectron and the ablation/baseline update rules for factorized weights.

Every step function is pure: it returns a new ``FactorizedWeight`` and a new
``SpectronState`` and never mutates its inputs.
"""

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonFiniteError, ShapeError
from .spectral import (
    DEFAULT_NS,
    NewtonSchulzConfig,
    exact_orthogonalize,
    exact_spectral_norm,
    ortho_newton_schulz,
    power_iter,
)

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.95
ADAM_EPS = 1e-8


def factor_rank(n, rank_ratio):
    return max(1, int(round(rank_ratio * n)))


@dataclass(frozen=True)
class FactorizedWeight:
    """``W = A @ B.T`` with ``A`` of shape (m, r) and ``B`` of shape (n, r)."""

    A: np.ndarray
    B: np.ndarray
    rank_ratio: float = 0.25

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[1]:
            raise ShapeError(f"factor shapes {self.A.shape} and {self.B.shape} do not share a rank")

    @property
    def shape(self):
        return (self.A.shape[0], self.B.shape[0])

    @property
    def rank(self):
        return self.A.shape[1]

    def materialize(self):
        return self.A @ self.B.T


class OptimizerVariant(str, enum.Enum):
    SPECTRON = "spectron"
    ORTHO_ONLY = "ortho_only"
    SPECNORM_ONLY = "specnorm_only"
    NAIVE_MOMENTUM = "naive_momentum"
    ADAPTIVE_MOMENTS = "adaptive_moments"

    @property
    def orthogonalizes(self):
        return self in (OptimizerVariant.SPECTRON, OptimizerVariant.ORTHO_ONLY)

    @property
    def renormalizes(self):
        return self in (OptimizerVariant.SPECTRON, OptimizerVariant.SPECNORM_ONLY)


@dataclass(frozen=True)
class SpectronState:
    M_A: np.ndarray
    M_B: np.ndarray
    u_A: np.ndarray
    u_B: np.ndarray
    eta: float
    t: int = 0
    beta: float = 0.95
    cfg: NewtonSchulzConfig = DEFAULT_NS
    k_power: int = 1
    weight_decay: float = 0.0
    exact: bool = False
    # second moments (adaptive baseline) and momentum power-iteration vectors
    # (spectral-norm-only ablation); unused by the other rules
    V_A: np.ndarray = None
    V_B: np.ndarray = None
    u_MA: np.ndarray = None
    u_MB: np.ndarray = None
    last: dict = field(default_factory=dict, compare=False)


def init_state(w, eta, rng, **kwargs):
    """Zero momentum and random unit power-iteration vectors for ``w``."""
    m, n = w.shape
    r = w.rank
    return SpectronState(
        M_A=np.zeros((m, r)),
        M_B=np.zeros((n, r)),
        u_A=rng.unit_vector(m),
        u_B=rng.unit_vector(n),
        eta=eta,
        V_A=np.zeros((m, r)),
        V_B=np.zeros((n, r)),
        u_MA=rng.unit_vector(m),
        u_MB=rng.unit_vector(n),
        **kwargs,
    )


def rho_bound(sigma_a, sigma_b, eta):
    rho = eta / (sigma_a + sigma_b + 1.0)
    if rho >= 1.0:
        log.warning("constraint radius %.4g >= 1; the composite-update bound is loose", rho)
    return rho


def composite_update(a, b, da, db):
    """Change of ``A @ B.T`` induced by factor increments ``da``, ``db``."""
    if da.shape != a.shape or db.shape != b.shape:
        raise ShapeError(f"increments {da.shape}, {db.shape} do not match factors {a.shape}, {b.shape}")
    return da @ b.T + a @ db.T + da @ db.T


def apply_weight_decay(factor, lambda_wd, eta):
    if lambda_wd == 0.0:
        return factor
    return factor * (1.0 - eta * lambda_wd)


def _check_grads(w, ga, gb, layer):
    if ga.shape != w.A.shape or gb.shape != w.B.shape:
        raise ShapeError(f"{layer}: gradient shapes {ga.shape}, {gb.shape} vs factors {w.A.shape}, {w.B.shape}")
    if not (np.all(np.isfinite(ga)) and np.all(np.isfinite(gb))):
        raise NonFiniteError(f"{layer}: non-finite gradient")


def _ortho(m, s):
    if s.exact:
        return exact_orthogonalize(m)
    return ortho_newton_schulz(m, s.cfg)


def _factor_sigmas(w, s):
    """Spectral norms of the current factors and the refreshed warm-start vectors."""
    if s.exact:
        return exact_spectral_norm(w.A), exact_spectral_norm(w.B), s.u_A, s.u_B
    est_a = power_iter(w.A, s.u_A, s.k_power)
    est_b = power_iter(w.B, s.u_B, s.k_power)
    return est_a.sigma, est_b.sigma, est_a.u, est_b.u


def _apply(w, s, delta_a, delta_b, eta, **updates):
    a = apply_weight_decay(w.A, s.weight_decay, eta) - delta_a
    b = apply_weight_decay(w.B, s.weight_decay, eta) - delta_b
    return replace(w, A=a, B=b), replace(s, t=s.t + 1, **updates)


def spectron_step(w, ga, gb, s, lr=None, renormalize=True, layer="layer"):
    """One Spectron update of a factorized weight.

    Momentum is an exponential average of the gradients, each factor's momentum
    is orthogonalized, and both factor steps share the radius
    ``lr / (sigma_A + sigma_B + 1)`` measured on the pre-update factors. With
    ``renormalize=False`` the denominator is the constant 1 (the
    orthogonalized-momentum ablation).
    """
    _check_grads(w, ga, gb, layer)
    eta = s.eta if lr is None else lr
    m_a = s.beta * s.M_A + (1.0 - s.beta) * ga
    m_b = s.beta * s.M_B + (1.0 - s.beta) * gb
    o_a = _ortho(m_a, s)
    o_b = _ortho(m_b, s)
    sigma_a, sigma_b, u_a, u_b = _factor_sigmas(w, s)
    rho = rho_bound(sigma_a, sigma_b, eta) if renormalize else eta
    last = {"sigma_a": sigma_a, "sigma_b": sigma_b, "rho": rho}
    return _apply(w, s, rho * o_a, rho * o_b, eta, M_A=m_a, M_B=m_b, u_A=u_a, u_B=u_b, last=last)


def _specnorm_step(w, ga, gb, s, eta, layer):
    m_a = s.beta * s.M_A + (1.0 - s.beta) * ga
    m_b = s.beta * s.M_B + (1.0 - s.beta) * gb
    sigma_a, sigma_b, u_a, u_b = _factor_sigmas(w, s)
    rho = rho_bound(sigma_a, sigma_b, eta)
    if s.exact:
        sm_a, sm_b = exact_spectral_norm(m_a), exact_spectral_norm(m_b)
        u_ma, u_mb = s.u_MA, s.u_MB
    else:
        est_ma = power_iter(m_a, s.u_MA, s.k_power)
        est_mb = power_iter(m_b, s.u_MB, s.k_power)
        sm_a, sm_b, u_ma, u_mb = est_ma.sigma, est_mb.sigma, est_ma.u, est_mb.u
    d_a = rho * m_a / sm_a if sm_a > 0.0 else np.zeros_like(m_a)
    d_b = rho * m_b / sm_b if sm_b > 0.0 else np.zeros_like(m_b)
    last = {"sigma_a": sigma_a, "sigma_b": sigma_b, "rho": rho}
    return _apply(w, s, d_a, d_b, eta, M_A=m_a, M_B=m_b, u_A=u_a, u_B=u_b, u_MA=u_ma, u_MB=u_mb, last=last)


def _naive_step(w, ga, gb, s, eta):
    m_a = s.beta * s.M_A + (1.0 - s.beta) * ga
    m_b = s.beta * s.M_B + (1.0 - s.beta) * gb
    return _apply(w, s, eta * m_a, eta * m_b, eta, M_A=m_a, M_B=m_b, last={})


def adam_update(p, g, m, v, t, eta, weight_decay=0.0, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """Decoupled-weight-decay adaptive-moment update; ``t`` counts from 1.

    Returns ``(new_p, new_m, new_v)``.
    """
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    p = apply_weight_decay(p, weight_decay, eta) - eta * m_hat / (np.sqrt(v_hat) + eps)
    return p, m, v


def _adaptive_step(w, ga, gb, s, eta):
    t = s.t + 1
    a, m_a, v_a = adam_update(w.A, ga, s.M_A, s.V_A, t, eta, s.weight_decay)
    b, m_b, v_b = adam_update(w.B, gb, s.M_B, s.V_B, t, eta, s.weight_decay)
    return replace(w, A=a, B=b), replace(s, t=t, M_A=m_a, M_B=m_b, V_A=v_a, V_B=v_b, last={})


def variant_step(variant, w, ga, gb, s, lr=None, layer="layer"):
    """Dispatch one update of ``w`` under the given ablation/baseline rule."""
    variant = OptimizerVariant(variant)
    _check_grads(w, ga, gb, layer)
    eta = s.eta if lr is None else lr
    if variant is OptimizerVariant.SPECTRON:
        return spectron_step(w, ga, gb, s, lr=eta, layer=layer)
    if variant is OptimizerVariant.ORTHO_ONLY:
        return spectron_step(w, ga, gb, s, lr=eta, renormalize=False, layer=layer)
    if variant is OptimizerVariant.SPECNORM_ONLY:
        return _specnorm_step(w, ga, gb, s, eta, layer)
    if variant is OptimizerVariant.NAIVE_MOMENTUM:
        return _naive_step(w, ga, gb, s, eta)
    return _adaptive_step(w, ga, gb, s, eta)
