"""Seeded order-2 Markov token corpus and its binary cache format."""

import math
import struct

import numpy as np

from .errors import ShapeError, SpectronError
from .matrix import Rng

TOKEN_MAGIC = b"SPTK"
TOKEN_VERSION = 1
ENTROPY_FRACTION = 0.6


def _softmax(logits, temperature):
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def stationary_pairs(table, iters=500):
    """Stationary distribution over (previous, current) pairs of the chain."""
    v = table.shape[0]
    pi = np.full((v, v), 1.0 / (v * v))
    for _ in range(iters):
        # pi'[b, c] = sum_a pi[a, b] * P[a, b, c]
        nxt = np.einsum("ab,abc->bc", pi, table)
        if np.max(np.abs(nxt - pi)) < 1e-14:
            return nxt
        pi = nxt
    return pi


def entropy_rate(table):
    pi = stationary_pairs(table)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.sum(np.where(table > 0, table * np.log(table), 0.0), axis=-1)
    return float(np.sum(pi * h))


def transition_table(seed, vocab, fraction=ENTROPY_FRACTION):
    """``P[a, b, c]`` = probability of ``c`` after ``a, b``, sharpened by temperature."""
    if vocab < 2:
        raise ShapeError("vocab must be at least 2")
    logits = Rng(seed).child("corpus.table").normal((vocab, vocab, vocab))
    target = fraction * math.log(vocab)
    lo, hi = 1e-3, 1e3
    for _ in range(80):
        mid = math.sqrt(lo * hi)
        if entropy_rate(_softmax(logits, mid)) > target:
            hi = mid
        else:
            lo = mid
    return _softmax(logits, math.sqrt(lo * hi))


def sample_chain(table, length, rng):
    vocab = table.shape[0]
    cum = np.cumsum(table, axis=-1)
    cum[..., -1] = 1.0
    draws = rng.uniform(length)
    out = np.empty(length, dtype=np.int64)
    a, b = (int(x) for x in rng.integers(0, vocab, 2))
    for i in range(length):
        c = int(np.searchsorted(cum[a, b], draws[i], side="right"))
        out[i] = c
        a, b = b, c
    return out


def synth_corpus(seed, vocab, length):
    """Deterministic token stream of ``length`` ids drawn from the seeded chain."""
    table = transition_table(seed, vocab)
    return sample_chain(table, length, Rng(seed).child("corpus.stream"))


def write_tokens(path, tokens, vocab):
    tokens = np.asarray(tokens)
    if vocab > 0xFFFF or (tokens.size and tokens.max() >= vocab):
        raise ShapeError("token ids must fit in 16 bits and lie below vocab")
    with open(path, "wb") as fh:
        fh.write(TOKEN_MAGIC + struct.pack("<HH", TOKEN_VERSION, vocab))
        fh.write(tokens.astype("<u2").tobytes())


def read_tokens(path):
    """Return ``(tokens, vocab)`` from a token cache file."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8 or head[:4] != TOKEN_MAGIC:
            raise SpectronError(f"{path}: not a token cache file")
        version, vocab = struct.unpack("<HH", head[4:])
        if version != TOKEN_VERSION:
            raise SpectronError(f"{path}: unsupported token cache version {version}")
        data = np.frombuffer(fh.read(), dtype="<u2").astype(np.int64)
    return data, vocab
