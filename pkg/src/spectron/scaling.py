"""Compute-optimal scaling-law fitting.

Two independent routes to the model-size exponent:

* IsoFLOP: a quadratic in ``ln N`` per compute budget gives ``N_opt(C)``,
  then a power law through the ``(C, N_opt)`` pairs gives the exponent.
* Parametric: ``L(N, D) = E + A / N**alpha + B / D**beta`` fitted by a
  multi-start bounded quasi-Newton search on a Huber loss of log-loss
  residuals; the exponent is then ``beta / (alpha + beta)``.
"""

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .errors import DataError, FitError

log = logging.getLogger(__name__)

HUBER_DELTA = 1e-3
# low-rank minus dense compute-optimal parameter exponents
SAVINGS_EXPONENT = 0.49 - 0.479
COEF_BOUNDS = (1e-2, 1e6)
EXPONENT_BOUNDS = (1e-3, 3.0)
LOG_E_BOUNDS = (-5.0, 5.0)

DEFAULT_STARTS = [
    {"alpha": a, "beta": b, "log_e": e, "log_coef": c}
    for a, b, e, c in itertools.product((0.1, 0.3, 0.5, 0.8), (0.1, 0.3, 0.5, 0.8), (0.0, 0.5, 1.0), (2.0, 5.0, 8.0))
]


@dataclass(frozen=True)
class RunPoint:
    n_params: float
    tokens: float
    flops: float
    loss: float

    @classmethod
    def from_nd(cls, n_params, tokens, loss):
        return cls(float(n_params), float(tokens), 6.0 * n_params * tokens, float(loss))


@dataclass
class ScalingFit:
    coefA: float
    coefB: float
    irreducible: float
    alpha: float
    beta: float
    huber_delta: float = HUBER_DELTA
    objective: float = math.nan
    start_index: int = -1
    histories: list = field(default_factory=list, repr=False)

    def predict(self, n_params, tokens):
        n = np.asarray(n_params, dtype=float)
        d = np.asarray(tokens, dtype=float)
        return self.irreducible + self.coefA / n**self.alpha + self.coefB / d**self.beta

    @property
    def exponents(self):
        return compute_optimal(self.alpha, self.beta)


@dataclass
class IsoflopCurve:
    budget: float
    samples: list
    coeffs: tuple  # (a, b, c) of a*x**2 + b*x + c with x = ln N
    n_opt: float
    loss_min: float


def isoflop_fit(samples, budget=math.nan):
    """Least-squares quadratic in ``ln N`` through ``(N, loss)`` samples at one budget."""
    samples = sorted((float(n), float(l)) for n, l in samples)
    if len({n for n, _ in samples}) < 3:
        raise FitError(f"isoflop_fit: budget {budget:.3g} has fewer than 3 distinct model sizes")
    x = np.log([n for n, _ in samples])
    y = np.array([l for _, l in samples])
    design = np.vander(x, 3)
    (a, b, c), *_ = np.linalg.lstsq(design, y, rcond=None)
    if not a > 0:
        raise FitError(f"isoflop_fit: budget {budget:.3g} gives a concave fit (leading coefficient {a:.3g})")
    x_opt = -b / (2.0 * a)
    return IsoflopCurve(budget, samples, (float(a), float(b), float(c)), float(math.exp(x_opt)), float(c - b * b / (4.0 * a)))


def powerlaw_fit(budgets, values):
    """OLS of ``ln value`` on ``ln C``; returns ``(exponent, prefactor)``."""
    c = np.asarray(budgets, dtype=float)
    v = np.asarray(values, dtype=float)
    if c.shape != v.shape or c.size < 2:
        raise FitError("powerlaw_fit: need at least two (budget, value) pairs")
    if np.any(c <= 0) or np.any(v <= 0):
        raise FitError("powerlaw_fit: budgets and values must be positive")
    if np.unique(c).size < 2:
        raise FitError("powerlaw_fit: budgets must not all coincide")
    slope, intercept = np.polyfit(np.log(c), np.log(v), 1)
    return float(slope), float(math.exp(intercept))


def group_by_budget(points, rel_tol=1e-6):
    """Bucket points whose ``flops`` agree within ``rel_tol``; sorted by budget."""
    groups = []
    for p in sorted(points, key=lambda p: (p.flops, p.n_params)):
        if groups and abs(p.flops - groups[-1][0]) <= rel_tol * groups[-1][0]:
            groups[-1][1].append(p)
        else:
            groups.append((p.flops, [p]))
    return groups


def isoflop_pipeline(points):
    """Per-budget IsoFLOP fits plus the N- and D-exponents through their optima."""
    curves = [isoflop_fit([(p.n_params, p.loss) for p in pts], budget) for budget, pts in group_by_budget(points)]
    budgets = [c.budget for c in curves]
    n_exp, n_pre = powerlaw_fit(budgets, [c.n_opt for c in curves])
    d_exp, d_pre = powerlaw_fit(budgets, [c.budget / (6.0 * c.n_opt) for c in curves])
    return curves, {"n_exponent": n_exp, "n_prefactor": n_pre, "d_exponent": d_exp, "d_prefactor": d_pre}


def huber(r, delta=HUBER_DELTA):
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def _log_pred(theta, log_n, log_d):
    log_a, log_b, log_e, alpha, beta = theta
    terms = np.stack([log_a - alpha * log_n, log_b - beta * log_d, np.full_like(log_n, log_e)])
    return logsumexp(terms, axis=0)


def huber_objective(theta, log_n, log_d, log_l, delta=HUBER_DELTA):
    return float(np.sum(huber(_log_pred(theta, log_n, log_d) - log_l, delta)))


def parametric_fit(points, starts=None, delta=HUBER_DELTA):
    """Best-objective fit over a grid of starting points.

    Each start runs L-BFGS-B with finite-difference gradients inside the box
    ``COEF_BOUNDS`` for the coefficients. Ties are broken by start index.
    """
    points = list(points)
    if len(points) < 6:
        raise FitError(f"parametric_fit: need at least 6 points, got {len(points)}")
    if len(group_by_budget(points)) < 2:
        raise FitError("parametric_fit: points must span at least two compute budgets")
    starts = DEFAULT_STARTS if starts is None else starts
    # sorted so the objective does not depend on input order
    pts = sorted(points, key=lambda p: (p.n_params, p.tokens, p.loss))
    log_n = np.log([p.n_params for p in pts])
    log_d = np.log([p.tokens for p in pts])
    log_l = np.log([p.loss for p in pts])
    lc = tuple(math.log(b) for b in COEF_BOUNDS)
    bounds = [lc, lc, LOG_E_BOUNDS, EXPONENT_BOUNDS, EXPONENT_BOUNDS]
    args = (log_n, log_d, log_l, delta)

    best, histories = None, []
    for index, s in enumerate(starts):
        x0 = np.array([s["log_coef"], s["log_coef"], s["log_e"], s["alpha"], s["beta"]], dtype=float)
        history = [huber_objective(x0, *args)]
        res = minimize(
            huber_objective,
            x0,
            args=args,
            method="L-BFGS-B",
            bounds=bounds,
            callback=lambda xk: history.append(huber_objective(xk, *args)),
            options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 5000},
        )
        histories.append(history)
        if not np.all(np.isfinite(res.x)) or not np.isfinite(res.fun):
            continue
        # a line-search stall at machine precision still leaves a usable optimum
        if not (res.success or "ABNORMAL" in str(res.message)):
            continue
        key = (float(res.fun), index)
        if best is None or key < best[0]:
            best = (key, res.x)
    if best is None:
        finals = [h[-1] for h in histories if h]
        raise FitError(f"parametric_fit: no start converged (best residual objective {min(finals):.3e})")

    (objective, index), x = best
    log_a, log_b, log_e, alpha, beta = (float(v) for v in x)
    for name, value in (("coefA", log_a), ("coefB", log_b)):
        if min(abs(value - lc[0]), abs(value - lc[1])) < 1e-6:
            log.warning("parametric_fit: %s landed on the fit-box boundary (%.3g)", name, math.exp(value))
    return ScalingFit(
        coefA=math.exp(log_a),
        coefB=math.exp(log_b),
        irreducible=math.exp(log_e),
        alpha=alpha,
        beta=beta,
        huber_delta=delta,
        objective=objective,
        start_index=index,
        histories=histories,
    )


def compute_optimal(alpha, beta):
    """Exponents ``(a_N, a_D)`` of ``N_opt ~ C**a_N`` and ``D_opt ~ C**a_D``; they sum to 1."""
    if not (alpha > 0 and beta > 0):
        raise ValueError("alpha and beta must be positive")
    a_n = beta / (alpha + beta)
    return a_n, 1.0 - a_n


def optimal_allocation(fit, budget):
    """``(N_opt, D_opt)`` minimizing the fitted surface subject to ``C = 6 N D``."""
    a_n, _ = compute_optimal(fit.alpha, fit.beta)
    g = (fit.alpha * fit.coefA / (fit.beta * fit.coefB)) ** (1.0 / (fit.alpha + fit.beta))
    n_opt = g * (budget / 6.0) ** a_n
    return n_opt, budget / (6.0 * n_opt)


def inference_savings(flops, exponent=SAVINGS_EXPONENT):
    """Percent inference saving ``(1 - C**-exponent) * 100`` at compute ``flops``."""
    if not flops > 0:
        raise ValueError("flops must be positive")
    return (1.0 - flops ** (-exponent)) * 100.0


def planted_grid(
    coef_a=1000.0,
    coef_b=1000.0,
    irreducible=1.777,
    alpha=0.398,
    beta=0.332,
    budgets=(1e18, 1e19, 1e20, 1e21),
    sizes=(10, 10, 10, 9),
    span=4.0,
    offset=1.25,
):
    """Noiseless IsoFLOP grid drawn from a known loss surface (39 points by default).

    Model sizes at each budget are log-spaced over ``[N*/span, N*·span]``
    around ``offset`` times the analytic optimum ``N*``.
    """
    truth = ScalingFit(coef_a, coef_b, irreducible, alpha, beta)
    points = []
    for budget, count in zip(budgets, sizes):
        center, _ = optimal_allocation(truth, budget)
        for n in np.geomspace(center * offset / span, center * offset * span, count):
            d = budget / (6.0 * n)
            points.append(RunPoint(float(n), float(d), float(budget), float(truth.predict(n, d))))
    return points


def read_points_csv(path):
    """Parse ``n_params,tokens,loss`` rows; raises ``DataError`` naming the bad row."""
    points = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        missing = {"n_params", "tokens", "loss"} - set(reader.fieldnames)
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
        for row_no, row in enumerate(reader, start=2):
            try:
                n, d, l = (float(row[k]) for k in ("n_params", "tokens", "loss"))
            except (TypeError, ValueError):
                raise DataError(f"{path}: row {row_no}: non-numeric value") from None
            if not (n > 0 and d > 0 and l > 0 and all(map(math.isfinite, (n, d, l)))):
                raise DataError(f"{path}: row {row_no}: values must be finite and positive")
            points.append(RunPoint.from_nd(n, d, l))
    if not points:
        raise DataError(f"{path}: no data rows")
    return points


def write_points_csv(path, points):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_params", "tokens", "loss"])
        for p in points:
            w.writerow([format(p.n_params, ".17g"), format(p.tokens, ".17g"), format(p.loss, ".17g")])
