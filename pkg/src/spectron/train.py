"""Desk-scale training loop shared by every CLI command."""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import synth_corpus
from .errors import NonFiniteError
from .matrix import Rng
from .model import eval_loss, init_model, loss_and_grads
from .optim import OptimizerVariant, adam_update, init_state, variant_step
from .spectral import NewtonSchulzConfig
from .telemetry import make_probes, record

log = logging.getLogger(__name__)

HELDOUT_FRACTION = 0.1


def lr_at(step, cfg):
    """Linear warmup over the first ``warmup_frac`` of steps, then cosine decay to 0."""
    opt = cfg.optimizer
    if opt.schedule == "constant":
        return opt.eta
    warm = int(round(cfg.warmup_frac * cfg.steps))
    if step < warm:
        return opt.eta * (step + 1) / warm
    progress = (step - warm) / max(1, cfg.steps - warm)
    return opt.eta * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class Data:
    train: np.ndarray
    heldout: np.ndarray
    vocab: int


def make_data(cfg, tokens=None):
    if tokens is None:
        tokens = synth_corpus(cfg.seed, cfg.model.vocab, cfg.corpus_tokens)
    cut = int(len(tokens) * (1.0 - HELDOUT_FRACTION))
    return Data(tokens[:cut], tokens[cut:], cfg.model.vocab)


def windows(stream, starts, length):
    idx = np.asarray(starts)[:, None] + np.arange(length + 1)[None, :]
    w = stream[idx]
    return w[:, :-1], w[:, 1:]


def train_batch(data, cfg, step):
    t = cfg.model.seq_len
    rng = Rng(cfg.seed).child(f"batch{step}")
    starts = rng.integers(0, len(data.train) - t - 1, cfg.batch)
    return windows(data.train, starts, t)


def eval_batch(data, cfg):
    t = cfg.model.seq_len
    span = len(data.heldout) - t - 1
    starts = np.linspace(0, span, cfg.eval_batch).astype(np.int64)
    return windows(data.heldout, starts, t)


@dataclass
class RunResult:
    losses: list = field(default_factory=list)  # (step, loss, lr)
    telemetry: list = field(default_factory=list)
    initial_eval: float = math.nan
    final_eval: float = math.nan
    diverged: bool = False
    model: object = None
    initial: object = None

    def max_dw_spec(self, layer_id=None):
        vals = [r.dw_spec for r in self.telemetry if layer_id is None or r.layer_id == layer_id]
        return max(vals) if vals else 0.0


class DenseUpdater:
    """Updates the non-factorized parameters (embeddings, head, dense hidden layers).

    Plain momentum for the naive-momentum rule, the adaptive-moment rule otherwise.
    """

    def __init__(self, params, variant, beta, weight_decay):
        self.naive = variant is OptimizerVariant.NAIVE_MOMENTUM
        self.beta = beta
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        out = {}
        for name, p in params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"{name}: non-finite gradient")
            if self.naive:
                self.m[name] = self.beta * self.m[name] + (1.0 - self.beta) * g
                out[name] = p - lr * self.m[name]
            else:
                out[name], self.m[name], self.v[name] = adam_update(
                    p, g, self.m[name], self.v[name], self.t, lr, self.weight_decay
                )
        return out


def run(cfg, data=None, telemetry_layers=None, tokens=None):
    """Train ``cfg`` from its seed; every source of randomness derives from ``cfg.seed``."""
    data = data or make_data(cfg, tokens)
    layers = cfg.telemetry_layers if telemetry_layers is None else telemetry_layers
    opt = cfg.optimizer
    variant = OptimizerVariant(opt.variant)
    root = Rng(cfg.seed)
    model = init_model(cfg.model, cfg.seed)
    initial = replace(model, factors=dict(model.factors), dense={k: v.copy() for k, v in model.dense.items()})
    ns = NewtonSchulzConfig(k_ns=opt.k_ns)
    states = {
        lid: init_state(
            w, opt.eta, root.child("opt." + lid), beta=opt.beta, cfg=ns, k_power=opt.k_power,
            weight_decay=opt.weight_decay,
        )
        for lid, w in model.factors.items()
    }
    dense = DenseUpdater(model.dense, variant, opt.beta, opt.weight_decay)
    probes = {lid: make_probes(model.factors[lid].shape[1], root.child("probe." + lid)) for lid in layers}
    ex, ey = eval_batch(data, cfg)
    result = RunResult(initial=initial)
    result.initial_eval = eval_loss(model, ex, ey)

    for step in range(cfg.steps):
        lr = lr_at(step, cfg)
        x, y = train_batch(data, cfg, step)
        loss, grads = loss_and_grads(model, x, y)
        result.losses.append((step, loss, lr))
        if not math.isfinite(loss):
            result.diverged = True
            log.warning("non-finite loss at step %d", step)
            break
        try:
            new_factors = {}
            for lid, w in model.factors.items():
                new_factors[lid], states[lid] = variant_step(
                    variant, w, grads[lid + ".A"], grads[lid + ".B"], states[lid], lr=lr, layer=lid
                )
            new_dense = dense.step(model.dense, grads, lr)
        except NonFiniteError as err:
            result.diverged = True
            log.warning("step %d: %s", step, err)
            break
        for lid in layers:
            result.telemetry.append(record(step, lid, model.factors[lid], new_factors[lid], probes[lid], eta=lr))
        model = replace(model, factors=new_factors, dense=new_dense)

    result.model = model
    if not result.diverged:
        result.final_eval = eval_loss(model, ex, ey)
        if not math.isfinite(result.final_eval):
            result.diverged = True
    return result
