import math

import numpy as np
import pytest

from spectron.corpus import (
    ENTROPY_FRACTION,
    entropy_rate,
    read_tokens,
    stationary_pairs,
    synth_corpus,
    transition_table,
    write_tokens,
)
from spectron.errors import ShapeError, SpectronError


def test_same_seed_same_stream():
    assert np.array_equal(synth_corpus(3, 16, 10**5), synth_corpus(3, 16, 10**5))
    assert not np.array_equal(synth_corpus(3, 16, 1000), synth_corpus(4, 16, 1000))


@pytest.mark.parametrize("vocab", [2, 8, 64])
def test_entropy_rate_target(vocab):
    table = transition_table(0, vocab)
    assert np.allclose(table.sum(-1), 1.0)
    assert abs(entropy_rate(table) - ENTROPY_FRACTION * math.log(vocab)) <= 1e-6


def test_empirical_transitions_converge():
    vocab, n = 8, 10**6
    table = transition_table(1, vocab)
    stream = synth_corpus(1, vocab, n)
    counts = np.zeros((vocab,) * 3)
    np.add.at(counts, (stream[:-2], stream[1:-1], stream[2:]), 1.0)
    seen = counts.sum(-1)
    empirical = counts / np.maximum(seen, 1.0)[..., None]
    tv = 0.5 * np.abs(empirical - table).sum(-1)
    weights = stationary_pairs(table)
    assert float(np.sum(weights * tv)) <= 0.02
    # contexts seen often enough for a tight estimate are each within the bound
    assert np.all(tv[seen >= 5000] <= 0.02)


def test_order2_beats_order0():
    vocab = 8
    table = transition_table(2, vocab)
    stream = synth_corpus(2, vocab, 200_000)
    train, held = stream[:150_000], stream[150_000:]
    unigram = np.bincount(train, minlength=vocab) / len(train)
    ce0 = -np.mean(np.log(unigram[held[2:]]))
    ce2 = -np.mean(np.log(table[held[:-2], held[1:-1], held[2:]]))
    assert ce2 < ce0


def test_vocab_guard():
    with pytest.raises(ShapeError):
        transition_table(0, 1)


def test_token_file_round_trip(tmp_path):
    toks = synth_corpus(0, 16, 500)
    path = tmp_path / "c.sptk"
    write_tokens(path, toks, 16)
    raw = path.read_bytes()
    assert raw[:4] == b"SPTK" and len(raw) == 8 + 2 * 500
    back, vocab = read_tokens(path)
    assert vocab == 16 and np.array_equal(back, toks)


def test_token_file_rejects_garbage(tmp_path):
    path = tmp_path / "x.sptk"
    path.write_bytes(b"NOPE1234")
    with pytest.raises(SpectronError):
        read_tokens(path)
    with pytest.raises(ShapeError):
        write_tokens(path, [5], 4)
