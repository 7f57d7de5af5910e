"""Reverse-mode gradients on a tape, checked against finite differences,
plus the multiply-accumulate counter that the cost model is validated with."""

import numpy as np

from alast import tensor as T
from alast.tensor import Tape, Tensor, backward

rng = np.random.default_rng(0)

# %% a two-layer MLP with a cross-entropy loss
x = Tensor(rng.normal(size=(5, 4)))
w1 = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
w2 = Tensor(rng.normal(size=(8, 3)), requires_grad=True)
labels = np.array([0, 2, 1, 1, 0])

with Tape() as tape:
    loss = T.cross_entropy(T.matmul(T.gelu(T.matmul(x, w1)), w2), labels)
backward(tape, loss)
print("loss", loss.item())
print("recorded nodes", len(tape), "| MACs", tape.macs, "(5*4*8 + 5*8*3 =", 5 * 4 * 8 + 5 * 8 * 3, ")")
print("other elementwise ops", tape.other_ops)

# %% central differences on w1
def value():
    return T.cross_entropy(T.matmul(T.gelu(T.matmul(x, Tensor(w1.values))), Tensor(w2.values)), labels).item()

numeric = np.zeros_like(w1.values)
for i in np.ndindex(w1.shape):
    old = w1.values[i]
    w1.values[i] = old + 1e-5
    up = value()
    w1.values[i] = old - 1e-5
    numeric[i] = (up - value()) / 2e-5
    w1.values[i] = old
print("max |analytic - numeric|", np.abs(w1.grad - numeric).max())

# %% frozen tensors are not recorded at all
with Tape() as frozen_tape:
    T.matmul(x, Tensor(w1.values))
print("nodes recorded with no trainable input:", len(frozen_tape), "| MACs still counted:", frozen_tape.macs)
