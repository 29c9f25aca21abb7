import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spectron.checkpoint import load_checkpoint, save_checkpoint
from spectron.errors import ShapeError, SpectronError
from spectron.matrix import Rng
from spectron.model import spectral_init
from spectron.optim import FactorizedWeight, composite_update, init_state, spectron_step
from spectron.spectral import exact_spectral_norm
from spectron.telemetry import COLUMNS, TelemetryRecord, make_probes, read_csv, record, write_csv


def test_probes_unit_rms():
    p = make_probes(12, Rng(0))
    assert p.shape == (64, 12)
    assert np.allclose(np.sqrt(np.mean(p * p, axis=1)), 1.0, atol=1e-12)


def test_no_change_records_zero():
    w = spectral_init(8, 6, 2, Rng(0))
    rec = record(0, "l", w, w, make_probes(6, Rng(1)), eta=0.01)
    assert rec.dw_spec == 0.0 and rec.dy_rms == 0.0
    assert abs(rec.w_spec - exact_spectral_norm(w.materialize())) <= 1e-12
    assert abs(rec.rho - 0.01 / (rec.sigma_a + rec.sigma_b + 1.0)) <= 1e-18


def test_rank_one_bound_is_tight(rng):
    m, n, sigma = 7, 5, 0.3
    u = rng.normal(size=m)
    u /= np.linalg.norm(u)
    v = rng.normal(size=n)
    v /= np.linalg.norm(v)
    before = FactorizedWeight(np.zeros((m, 1)), v[:, None])
    after = FactorizedWeight(sigma * u[:, None], v[:, None])
    rec = record(3, "l", before, after, (v * math.sqrt(n))[None, :])
    assert abs(rec.dw_spec - sigma) <= 1e-14
    assert abs(rec.dy_rms - rec.dy_rms_bound) <= 1e-14
    assert math.isnan(rec.rho)


@given(st.integers(0, 2**32 - 1))
def test_random_step_respects_bound(seed):
    g = np.random.default_rng(seed)
    w = spectral_init(9, 12, 3, Rng(seed))
    s = init_state(w, 0.05, Rng(seed).child("s"))
    w2, _ = spectron_step(w, g.normal(size=w.A.shape), g.normal(size=w.B.shape), s)
    rec = record(0, "l", w, w2, make_probes(12, Rng(seed).child("p")), eta=0.05)
    dense = composite_update(w.A, w.B, w2.A - w.A, w2.B - w.B)
    assert abs(rec.dw_spec - exact_spectral_norm(dense)) <= 1e-12
    assert rec.dy_rms <= rec.dy_rms_bound + 1e-9
    assert all(math.isfinite(x) for x in (rec.dw_spec, rec.w_spec, rec.dy_rms, rec.rho))


def test_probe_shape_checked():
    w = spectral_init(8, 6, 2, Rng(0))
    with pytest.raises(ShapeError):
        record(0, "l", w, w, np.ones((4, 8)))


def fake(step, layer, x):
    return TelemetryRecord(step, layer, x, 2 * x, x / 3, x + 1e-17, 0.1, 1 / 3, math.pi)


def test_empty_csv_is_header_only(tmp_path):
    path = tmp_path / "t.csv"
    write_csv([], path)
    assert path.read_text() == ",".join(COLUMNS) + "\n"


def test_csv_round_trip(tmp_path, rng):
    recs = [fake(i, f"layer{i % 3}", float(x)) for i, x in enumerate(rng.normal(size=1000))]
    path = tmp_path / "t.csv"
    write_csv(recs, path)
    assert read_csv(path) == sorted(recs, key=lambda r: (r.step, r.layer_id))


def test_csv_sorted_and_appends(tmp_path):
    path = tmp_path / "t.csv"
    write_csv([fake(1, "b", 1.0), fake(0, "b", 2.0), fake(1, "a", 3.0), fake(0, "a", 4.0)], path)
    write_csv([fake(2, "a", 5.0)], path)
    rows = read_csv(path)
    assert [(r.step, r.layer_id) for r in rows] == [(0, "a"), (0, "b"), (1, "a"), (1, "b"), (2, "a")]
    assert path.read_text().count("step,") == 1


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"w.A": rng.normal(size=(5, 2)), "emb": rng.normal(size=(3, 4)), "vec": rng.normal(size=6)}
    path = tmp_path / "c.spck"
    save_checkpoint(path, tensors)
    raw = path.read_bytes()
    assert raw[:4] == b"SPCK" and int.from_bytes(raw[4:8], "little") == 1
    back = load_checkpoint(path)
    assert list(back) == sorted(tensors)
    assert np.array_equal(back["w.A"], tensors["w.A"]) and back["vec"].shape == (1, 6)


def test_checkpoint_rejects_truncation(tmp_path):
    path = tmp_path / "c.spck"
    save_checkpoint(path, {"x": np.ones((4, 4))})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(SpectronError):
        load_checkpoint(path)
    path.write_bytes(b"XXXX")
    with pytest.raises(SpectronError):
        load_checkpoint(path)
