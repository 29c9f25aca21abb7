"""Per-step spectral diagnostics of one factorized layer.

Norms here come from the SVD oracle, not the optimizer's own power-iteration
estimates, so recording never perturbs the run being measured.
"""

import csv
import math
import os
from dataclasses import astuple, dataclass, fields

import numpy as np

from .errors import ShapeError
from .optim import composite_update
from .spectral import exact_spectral_norm, factored_spectral_norm

PROBE_COUNT = 64


@dataclass(frozen=True)
class TelemetryRecord:
    step: int
    layer_id: str
    dw_spec: float
    w_spec: float
    dy_rms: float
    dy_rms_bound: float
    rho: float
    sigma_a: float
    sigma_b: float


COLUMNS = [f.name for f in fields(TelemetryRecord)]


def make_probes(n, rng, count=PROBE_COUNT):
    """``count`` fixed probe inputs of length ``n``, each scaled to unit rms."""
    x = rng.normal((count, n))
    return x / np.sqrt(np.mean(x * x, axis=1, keepdims=True))


def record(step, layer_id, before, after, probes, eta=None):
    """Diagnostics for the step that turned factors ``before`` into ``after``.

    ``sigma_a``/``sigma_b`` are the exact norms of the pre-step factors and
    ``rho`` the radius ``eta / (sigma_a + sigma_b + 1)`` they imply; ``rho`` is
    NaN when ``eta`` is not given.
    """
    a0, b0 = before.A, before.B
    if after.A.shape != a0.shape or after.B.shape != b0.shape:
        raise ShapeError(f"{layer_id}: factor shapes changed across the step")
    m, n = before.shape
    if probes.shape[1] != n:
        raise ShapeError(f"{layer_id}: probes have length {probes.shape[1]}, layer input is {n}")
    da, db = after.A - a0, after.B - b0
    dw = composite_update(a0, b0, da, db)
    if np.all(np.isfinite(dw)):
        # dA B^T + (A + dA) dB^T keeps the rank-2r structure visible
        dw_spec = factored_spectral_norm(np.hstack([da, after.A]), np.hstack([b0, db]))
        w_spec = factored_spectral_norm(after.A, after.B)
    else:
        dw_spec = w_spec = math.inf
    dy = probes @ dw.T
    dy_rms = float(np.mean(np.sqrt(np.mean(dy * dy, axis=1))))
    sigma_a = exact_spectral_norm(a0)
    sigma_b = exact_spectral_norm(b0)
    rho = eta / (sigma_a + sigma_b + 1.0) if eta is not None else math.nan
    return TelemetryRecord(
        step=int(step),
        layer_id=layer_id,
        dw_spec=dw_spec,
        w_spec=w_spec,
        dy_rms=dy_rms,
        dy_rms_bound=math.sqrt(n / m) * dw_spec,
        rho=rho,
        sigma_a=sigma_a,
        sigma_b=sigma_b,
    )


def _fmt(value):
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def write_csv(records, path):
    """Append ``records`` sorted by (step, layer_id); the header is written once."""
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    rows = sorted(records, key=lambda r: (r.step, r.layer_id))
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(COLUMNS)
        for rec in rows:
            writer.writerow([_fmt(v) for v in astuple(rec)])


def read_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {k: float(v) for k, v in row.items() if k not in ("step", "layer_id")}
            out.append(TelemetryRecord(step=int(row["step"]), layer_id=row["layer_id"], **vals))
    return out
