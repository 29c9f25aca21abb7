"""Desk-scale factorized transformer, spectral initialization and the self-guided layer."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import RMS_EPS, Tape, backward
from .errors import ConfigError, ShapeError
from .matrix import Rng, svd_oracle
from .optim import FactorizedWeight, factor_rank


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 8
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    rank_ratio: float = 0.25
    seq_len: int = 16
    factorize_ffn_only: bool = False
    ff_mult: int = 2
    tie_head: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 < self.rank_ratio <= 1.0:
            raise ConfigError(f"rank_ratio must lie in (0, 1], got {self.rank_ratio}")
        for name in ("vocab", "d_model", "n_layers", "n_heads", "seq_len", "ff_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def d_ff(self):
        return self.ff_mult * self.d_model

    def to_dict(self):
        return asdict(self)


def layer_shapes(cfg):
    """Ordered ``{layer_id: (out_dim, in_dim)}`` for every hidden weight matrix."""
    d, f = cfg.d_model, cfg.d_ff
    shapes = {}
    for i in range(cfg.n_layers):
        for proj in ("q", "k", "v", "o"):
            shapes[f"block{i}.attn.{proj}"] = (d, d)
        shapes[f"block{i}.ffn.up"] = (f, d)
        shapes[f"block{i}.ffn.down"] = (d, f)
    return shapes


def is_factorized(cfg, layer_id):
    return not (cfg.factorize_ffn_only and ".attn." in layer_id)


def truncated_factors(w0, r, rank_ratio=0.25):
    """Balanced factors of the best rank-``r`` approximation of ``w0``."""
    u, s, v = svd_oracle(w0)
    root = np.sqrt(s[:r])
    return FactorizedWeight(u[:, :r] * root, v[:, :r] * root, rank_ratio)


def spectral_init(m, n, r, rng, rank_ratio=0.25):
    """Factor the best rank-``r`` approximation of a Gaussian ``m x n`` matrix.

    Entries have variance ``1/n``; each factor takes the square root of the
    singular values so both carry the same Frobenius mass.
    """
    if not 1 <= r <= min(m, n):
        raise ShapeError(f"spectral_init: rank {r} outside [1, {min(m, n)}]")
    return truncated_factors(rng.normal((m, n), scale=1.0 / math.sqrt(n)), r, rank_ratio)


@dataclass
class Model:
    config: ModelConfig
    factors: dict = field(default_factory=dict)
    dense: dict = field(default_factory=dict)

    @property
    def layer_ids(self):
        return list(layer_shapes(self.config))

    def weight(self, layer_id):
        if layer_id in self.factors:
            return self.factors[layer_id].materialize()
        return self.dense[layer_id]

    def parameters(self):
        """Flat ``{name: array}`` view; factors appear as ``<layer>.A`` / ``<layer>.B``."""
        params = {}
        for lid, w in self.factors.items():
            params[lid + ".A"] = w.A
            params[lid + ".B"] = w.B
        params.update(self.dense)
        return params

    def num_parameters(self):
        return sum(int(p.size) for p in self.parameters().values())


def init_model(cfg, seed):
    rng = Rng(seed).child("init")
    d = cfg.d_model
    factors, dense = {}, {}
    for lid, (m, n) in layer_shapes(cfg).items():
        site = rng.child(lid)
        if is_factorized(cfg, lid):
            factors[lid] = spectral_init(m, n, factor_rank(n, cfg.rank_ratio), site, cfg.rank_ratio)
        else:
            dense[lid] = site.normal((m, n), scale=1.0 / math.sqrt(n))
    dense["tok_emb"] = rng.child("tok_emb").normal((cfg.vocab, d))
    dense["pos_emb"] = rng.child("pos_emb").normal((cfg.seq_len, d))
    if not cfg.tie_head:
        dense["head"] = rng.child("head").normal((cfg.vocab, d), scale=1.0 / math.sqrt(d))
    return Model(cfg, factors, dense)


def dense_parameter_count(cfg):
    """Parameter count of the same architecture with every hidden matrix dense."""
    hidden = sum(m * n for m, n in layer_shapes(cfg).values())
    emb = cfg.vocab * cfg.d_model + cfg.seq_len * cfg.d_model
    head = 0 if cfg.tie_head else cfg.vocab * cfg.d_model
    return hidden + emb + head


def factorized_parameter_count(cfg):
    saved = 0
    for lid, (m, n) in layer_shapes(cfg).items():
        if is_factorized(cfg, lid):
            r = factor_rank(n, cfg.rank_ratio)
            saved += m * n - r * (m + n)
    return dense_parameter_count(cfg) - saved


def _check_tokens(cfg, tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError(f"token batch must be (batch, seq), got {tokens.shape}")
    if tokens.shape[1] > cfg.seq_len:
        raise ShapeError(f"sequence length {tokens.shape[1]} exceeds seq_len={cfg.seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ShapeError(f"token id outside [0, {cfg.vocab})")
    return tokens


def forward(model, tokens):
    """Record the forward pass on a fresh tape; returns ``(logits, tape)``.

    ``tape.output`` is the logits node, to be fed to ``tape.cross_entropy``.
    """
    cfg = model.config
    tokens = _check_tokens(cfg, tokens)
    bsz, t = tokens.shape
    h_dim = cfg.d_model // cfg.n_heads
    tape = Tape()
    leaves = {name: tape.leaf(value, name=name) for name, value in model.parameters().items()}

    def linear(x, lid):
        if lid in model.factors:
            a, b = leaves[lid + ".A"], leaves[lid + ".B"]
            return tape.matmul(tape.matmul(x, b), tape.transpose(a))
        return tape.matmul(x, tape.transpose(leaves[lid]))

    pos = tape.embedding(leaves["pos_emb"], np.arange(t))
    h = tape.add(tape.embedding(leaves["tok_emb"], tokens), pos)
    for i in range(cfg.n_layers):
        x = tape.rms_norm(h)
        heads = []
        for proj in ("q", "k", "v"):
            y = tape.reshape(linear(x, f"block{i}.attn.{proj}"), (bsz, t, cfg.n_heads, h_dim))
            heads.append(tape.transpose(y, (0, 2, 1, 3)))
        q, k, v = heads
        scores = tape.scale(tape.matmul(q, tape.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(h_dim))
        att = tape.matmul(tape.softmax(scores, causal=True), v)
        merged = tape.reshape(tape.transpose(att, (0, 2, 1, 3)), (bsz, t, cfg.d_model))
        h = tape.add(h, linear(merged, f"block{i}.attn.o"))
        x = tape.rms_norm(h)
        up = tape.gelu(linear(x, f"block{i}.ffn.up"))
        h = tape.add(h, linear(up, f"block{i}.ffn.down"))
    h = tape.rms_norm(h)
    head = leaves["tok_emb"] if cfg.tie_head else leaves["head"]
    logits = tape.matmul(h, tape.transpose(head))
    tape.output = logits
    return logits.value, tape


def loss_and_grads(model, inputs, targets, mask=None):
    _, tape = forward(model, inputs)
    loss = tape.cross_entropy(tape.output, targets, mask)
    return float(loss.value), backward(tape, loss)


def eval_loss(model, inputs, targets):
    _, tape = forward(model, inputs)
    return float(tape.cross_entropy(tape.output, targets).value)


def _rms(x):
    return x * (1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS))


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def reference_forward(model, tokens):
    """Straight-line numpy evaluation of the same network, no tape."""
    cfg = model.config
    tokens = _check_tokens(cfg, tokens)
    bsz, t = tokens.shape
    hd = cfg.d_model // cfg.n_heads
    h = model.dense["tok_emb"][tokens] + model.dense["pos_emb"][:t]
    causal = np.tril(np.ones((t, t), dtype=bool))

    def linear(x, lid):
        if lid in model.factors:
            return (x @ model.factors[lid].B) @ model.factors[lid].A.T
        return x @ model.dense[lid].T

    for i in range(cfg.n_layers):
        x = _rms(h)
        q, k, v = (
            linear(x, f"block{i}.attn.{p}").reshape(bsz, t, cfg.n_heads, hd).transpose(0, 2, 1, 3)
            for p in ("q", "k", "v")
        )
        s = np.where(causal, (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd)), -np.inf)
        p = np.exp(s - s.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        o = (p @ v).transpose(0, 2, 1, 3).reshape(bsz, t, cfg.d_model)
        h = h + linear(o, f"block{i}.attn.o")
        x = _rms(h)
        h = h + linear(_gelu(linear(x, f"block{i}.ffn.up")), f"block{i}.ffn.down")
    head = model.dense["tok_emb"] if cfg.tie_head else model.dense["head"]
    return _rms(h) @ head.T


class FactorizedLinear:
    """``y = A (B^T x)`` applied to row vectors, never forming ``A B^T``."""

    def __init__(self, weight, layer_id="linear"):
        self.weight = weight
        self.layer_id = layer_id

    def __call__(self, x):
        return (np.asarray(x) @ self.weight.B) @ self.weight.A.T


@dataclass
class SelfGuidedLinear:
    """Dense guide ``W`` trained alongside the factors, blended out over time."""

    W: np.ndarray
    weight: FactorizedWeight
    stochastic: bool = False

    @classmethod
    def from_factorized(cls, weight, stochastic=False):
        return cls(weight.materialize(), weight, stochastic)


def guidance_alpha(step, guided_steps):
    """Cosine decay of the dense-branch weight from 1 to 0 over ``guided_steps``."""
    if guided_steps <= 0:
        return 0.0
    frac = min(step / guided_steps, 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * frac))


def self_guided_forward(layer, x, alpha, rng=None):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    x = np.asarray(x, dtype=np.float64)
    low = (x @ layer.weight.B) @ layer.weight.A.T
    if layer.stochastic:
        if rng is None:
            raise ValueError("stochastic self-guided forward needs an rng")
        if not rng.uniform() < alpha:
            return low
    return alpha * (x @ layer.W.T) + (1.0 - alpha) * low
