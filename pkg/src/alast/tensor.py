"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Operations executed inside a ``with Tape() as tape:`` block are recorded
together with their pullbacks, and every matrix product adds its
multiply-accumulate count to ``tape.macs``. Elementwise work (softmax,
layer norm, GELU, adds) goes to the separate ``tape.other_ops`` channel, so
``tape.macs`` can be compared one-to-one with the analytic cost model.

Outside a tape nothing is recorded, which is how evaluation runs.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, NumericError, UsageError

__all__ = [
    "Tensor", "Tape", "active_tape", "backward",
    "matmul", "add", "scale", "broadcast_to", "reshape", "transpose",
    "concat", "take_tokens", "select_token", "gelu", "softmax_rows",
    "layer_norm", "cross_entropy", "sum_all",
]

_GELU_C = math.sqrt(2.0 / math.pi)
_TAPES: list[Tape] = []


class Tensor:
    """A float64 array plus an optional gradient buffer.

    Leaf tensors with ``requires_grad=True`` are the trainable ones: after
    :func:`backward` their ``grad`` holds d(loss)/d(values). Leaves with
    ``requires_grad=False`` never get a gradient buffer.
    """

    __slots__ = ("values", "grad", "requires_grad", "name", "_node")

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def is_leaf(self):
        return self._node is None

    def item(self):
        return float(self.values.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "mask", "pullback")

    def __init__(self, out, inputs, mask, pullback):
        self.out = out
        self.inputs = inputs
        self.mask = mask
        self.pullback = pullback


class Tape:
    """Records primitive operations for one forward pass.

    A tape is meant to live for a single training step: build it during the
    forward pass, call :func:`backward` once (or several times, the result is
    identical) and drop it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.macs = 0
        self.other_ops = 0

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False


def active_tape():
    return _TAPES[-1] if _TAPES else None


def _emit(values, inputs, pullback, macs=0, other=0):
    out = Tensor(values)
    tape = active_tape()
    if tape is None:
        return out
    tape.macs += int(macs)
    tape.other_ops += int(other)
    mask = tuple(t.requires_grad for t in inputs)
    if any(mask):
        out.requires_grad = True
        out._node = _Node(out, tuple(inputs), mask, pullback)
        tape.nodes.append(out._node)
    return out


def backward(tape, loss):
    """Propagate d(loss) through ``tape`` and fill ``grad`` on trainable leaves.

    Returns the list of leaves that received a gradient, in first-seen order
    of the reverse sweep. The tape is not modified, so calling this twice
    gives bit-identical gradients.
    """
    if not tape.nodes:
        raise UsageError("backward called on an empty tape")
    if loss.size != 1:
        raise UsageError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._node is None or not any(n is loss._node for n in reversed(tape.nodes)):
        raise UsageError("loss was not produced by a trainable path on this tape")

    grads = {id(loss): np.ones_like(loss.values)}
    leaves = {}
    for node in reversed(tape.nodes):
        for t, m in zip(node.inputs, node.mask):
            if m and t._node is None:
                leaves.setdefault(id(t), t)
        g = grads.get(id(node.out))
        if g is None:
            continue
        for t, m, gi in zip(node.inputs, node.mask, node.pullback(g, node.mask)):
            if not m:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = np.zeros_like(t.values) if g is None else np.array(g, dtype=np.float64)
    return list(leaves.values())


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b):
    """``a @ b``. ``b`` is either 2-D (shared weight) or has the same batch dims as ``a``."""
    A, B = a.values, b.values
    ok = (A.ndim >= 2 and B.ndim >= 2 and A.shape[-1] == B.shape[-2]
          and (B.ndim == 2 or A.shape[:-2] == B.shape[:-2]))
    if not ok:
        raise DimensionError(f"matmul shape mismatch: {A.shape} @ {B.shape}")
    k, n = B.shape[-2], B.shape[-1]
    macs = math.prod(A.shape[:-1]) * k * n

    def pullback(g, mask):
        ga = g @ np.swapaxes(B, -1, -2) if mask[0] else None
        gb = None
        if mask[1]:
            if B.ndim == 2:
                gb = A.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _emit(A @ B, (a, b), pullback, macs=macs)


def add(a, b):
    """``a + b`` where ``b`` broadcasts to the shape of ``a`` (bias, positional table)."""
    A, B = a.values, b.values
    try:
        out = A + B
    except ValueError:
        raise DimensionError(f"add shape mismatch: {A.shape} + {B.shape}") from None
    if out.shape != A.shape:
        raise DimensionError(f"add: {B.shape} does not broadcast into {A.shape}")

    def pullback(g, mask):
        return g, _unbroadcast(g, B.shape) if mask[1] else None

    return _emit(out, (a, b), pullback, other=out.size)


def scale(a, c):
    c = float(c)
    return _emit(a.values * c, (a,), lambda g, mask: (g * c,), other=a.size)


def broadcast_to(a, shape):
    src = a.values.shape
    out = np.broadcast_to(a.values, shape).copy()
    return _emit(out, (a,), lambda g, mask: (_unbroadcast(g, src),))


def reshape(a, shape):
    src = a.values.shape
    return _emit(a.values.reshape(shape), (a,), lambda g, mask: (g.reshape(src),))


def transpose(a, axes):
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.values, axes), (a,),
                 lambda g, mask: (np.transpose(g, inverse),))


def concat(tensors, axis):
    arrays = [t.values for t in tensors]
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]

    def pullback(g, mask):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(np.concatenate(arrays, axis=axis), tuple(tensors), pullback)


def take_tokens(x, index):
    """Gather rows along the token axis: ``x[b, index[b, j], :]`` for ``x`` of shape B×n×E.

    ``index`` must not repeat a position within a batch row.
    """
    X = x.values
    index = np.asarray(index, dtype=np.intp)
    if X.ndim != 3 or index.ndim != 2 or index.shape[0] != X.shape[0]:
        raise DimensionError(f"take_tokens: index {index.shape} incompatible with {X.shape}")
    idx3 = index[:, :, None]

    def pullback(g, mask):
        gx = np.zeros_like(X)
        np.put_along_axis(gx, idx3, g, axis=1)
        return (gx,)

    return _emit(np.take_along_axis(X, idx3, axis=1), (x,), pullback)


def select_token(x, position):
    """``x[:, position, :]`` for a B×n×E tensor."""
    X = x.values

    def pullback(g, mask):
        gx = np.zeros_like(X)
        gx[:, position, :] = g
        return (gx,)

    return _emit(X[:, position, :].copy(), (x,), pullback)


def gelu(x):
    """Tanh-approximated GELU: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    X = x.values
    X2 = X * X
    t = np.tanh(_GELU_C * X * (1.0 + 0.044715 * X2))

    def pullback(g, mask):
        du = _GELU_C * (1.0 + 3 * 0.044715 * X2)
        return (g * (0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * du),)

    return _emit(0.5 * X * (1.0 + t), (x,), pullback, other=8 * X.size)


def _softmax(X):
    if not np.all(np.isfinite(X)):
        raise NumericError("softmax input contains NaN or infinite values")
    e = np.exp(X - X.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x):
    """Softmax over the last axis, with row-max subtraction."""
    y = _softmax(x.values)

    def pullback(g, mask):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), pullback, other=3 * y.size)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis (population variance), then scale and shift."""
    if not eps > 0:
        raise ValueError("layer_norm eps must be positive")
    X = x.values
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    G = gamma.values

    def pullback(g, mask):
        gx = None
        if mask[0]:
            d = g * G
            gx = inv * (d - d.mean(axis=-1, keepdims=True)
                        - xhat * (d * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, G.shape) if mask[1] else None
        gb = _unbroadcast(g, beta.values.shape) if mask[2] else None
        return gx, gg, gb

    return _emit(xhat * G + beta.values, (x, gamma, beta), pullback, other=7 * X.size)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    Z = logits.values
    labels = np.asarray(labels, dtype=np.intp)
    if Z.ndim != 2 or labels.shape != (Z.shape[0],):
        raise DimensionError(f"cross_entropy: logits {Z.shape} vs labels {labels.shape}")
    nb, nc = Z.shape
    if labels.size and (labels.min() < 0 or labels.max() >= nc):
        raise IndexError(f"label out of range [0, {nc})")
    p = _softmax(Z)
    rows = np.arange(nb)
    shifted = Z - Z.max(axis=1, keepdims=True)
    logp = shifted[rows, labels] - np.log(np.exp(shifted).sum(axis=1))
    loss = -logp.mean()

    def pullback(g, mask):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * (g / nb),)

    return _emit(np.array(loss), (logits,), pullback, other=4 * Z.size)


def sum_all(x):
    X = x.values
    return _emit(np.array(X.sum()), (x,), lambda g, mask: (np.full_like(X, g),), other=X.size)
