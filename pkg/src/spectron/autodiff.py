"""A small reverse-mode tape over numpy arrays.

Only the primitives the desk transformer needs are provided. Every op appends
a node to the tape; ``backward`` walks the tape in reverse recording order,
which is a valid reverse topological order because inputs are always recorded
before the ops that consume them.
"""

import math

import numpy as np

from .errors import ShapeError, SpectronError

RMS_EPS = 1e-6


class Node:
    __slots__ = ("id", "op", "value", "parents", "backward_fn", "name")

    def __init__(self, node_id, op, value, parents=(), backward_fn=None, name=None):
        self.id = node_id
        self.op = op
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.id}, {self.op}, shape={self.value.shape})"


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    def __init__(self):
        self.nodes = []

    def _record(self, op, value, parents=(), backward_fn=None, name=None):
        node = Node(len(self.nodes), op, value, tuple(parents), backward_fn, name)
        self.nodes.append(node)
        return node

    def leaf(self, value, name=None):
        return self._record("leaf", np.asarray(value, dtype=np.float64), name=name)

    def matmul(self, a, b):
        if a.shape[-1] != b.shape[-2 if b.value.ndim > 1 else 0]:
            raise ShapeError(f"tape matmul: {a.shape} @ {b.shape}")
        out = a.value @ b.value

        def back(g):
            ga = g @ np.swapaxes(b.value, -1, -2)
            gb = np.swapaxes(a.value, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return self._record("matmul", out, (a, b), back)

    def add(self, a, b):
        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return self._record("add", a.value + b.value, (a, b), back)

    def scale(self, a, c):
        return self._record("scale", a.value * c, (a,), lambda g: (g * c,))

    def transpose(self, a, axes=None):
        axes = tuple(range(a.value.ndim))[::-1] if axes is None else tuple(axes)
        inverse = tuple(np.argsort(axes))
        return self._record("transpose", np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),))

    def reshape(self, a, shape):
        old = a.shape
        return self._record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))

    def gelu(self, a):
        x = a.value
        k = math.sqrt(2.0 / math.pi)
        inner = k * (x + 0.044715 * x**3)
        th = np.tanh(inner)
        out = 0.5 * x * (1.0 + th)

        def back(g):
            d_inner = k * (1.0 + 3 * 0.044715 * x**2)
            return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

        return self._record("gelu", out, (a,), back)

    def rms_norm(self, a):
        x = a.value
        d = x.shape[-1]
        inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
        out = x * inv

        def back(g):
            dot = np.sum(g * x, axis=-1, keepdims=True)
            return (inv * g - (inv**3) * x * dot / d,)

        return self._record("rms_norm", out, (a,), back)

    def softmax(self, a, causal=False):
        x = a.value
        if causal:
            t = x.shape[-1]
            mask = np.triu(np.ones((t, t), dtype=bool), k=1)
            x = np.where(mask, -np.inf, x)
        z = x - np.max(x, axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / np.sum(e, axis=-1, keepdims=True)

        def back(g):
            return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

        return self._record("softmax", p, (a,), back)

    def embedding(self, table, ids):
        ids = np.asarray(ids)
        vocab = table.shape[0]

        def back(g):
            gt = np.zeros_like(table.value)
            np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
            return (gt,)

        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise ShapeError(f"embedding: ids outside [0, {vocab})")
        return self._record("embedding", table.value[ids], (table,), back)

    def cross_entropy(self, logits, targets, mask=None):
        """Mean next-token cross-entropy in nats over unmasked positions."""
        x = logits.value
        targets = np.asarray(targets)
        flat = x.reshape(-1, x.shape[-1])
        tflat = targets.ravel()
        weight = np.ones(tflat.shape) if mask is None else np.asarray(mask, dtype=np.float64).ravel()
        count = weight.sum()
        if count == 0:
            raise ShapeError("cross_entropy: every position is masked")
        z = flat - flat.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1))
        nll = logsum - z[np.arange(tflat.size), tflat]
        loss = float(np.sum(weight * nll) / count)

        def back(g):
            p = np.exp(z - logsum[:, None])
            p[np.arange(tflat.size), tflat] -= 1.0
            return ((g * weight[:, None] / count * p).reshape(x.shape),)

        return self._record("cross_entropy", np.asarray(loss), (logits,), back)


def backward(tape, loss):
    """Gradients of the scalar ``loss`` for every named leaf, keyed by name."""
    if loss.id >= len(tape.nodes) or tape.nodes[loss.id] is not loss:
        raise SpectronError("backward: loss node was not recorded on this tape")
    grads = {loss.id: np.ones_like(loss.value)}
    for node in reversed(tape.nodes[: loss.id + 1]):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.backward_fn is None:
            grads[node.id] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    out = {}
    for node in tape.nodes:
        if node.op == "leaf" and node.name is not None:
            out[node.name] = grads.get(node.id, np.zeros_like(node.value))
    return out
