"""Reverse-mode autodiff on numpy arrays, checked against finite differences.

Run: python3 demos/01_autodiff.py
"""

import numpy as np

from landet import tensor as T
from landet.tensor import Tensor, backprop

rng = np.random.default_rng(0)

# A tiny convolutional classifier written directly with tensor ops.
# Leaves created with requires_grad=True receive gradients from backprop.
x = Tensor(rng.random((2, 6, 6)), dtype=np.float64)
kernels = Tensor(rng.normal(scale=0.5, size=(3, 2, 3, 3)), requires_grad=True, dtype=np.float64)
kbias = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
weight = Tensor(rng.normal(scale=0.5, size=(4, 12)), requires_grad=True, dtype=np.float64)
bias = Tensor(np.zeros(4), requires_grad=True, dtype=np.float64)


def loss_fn(kernels, kbias, weight, bias):
    h = T.conv2d_apply(x, kernels, kbias, 1, 0)      # 3 x 4 x 4
    h = T.maxpool_apply(T.relu_apply(h), 2)         # 3 x 2 x 2
    logits = T.affine_apply(T.reshape(h, (-1,)), weight, bias)
    return T.softmax_cross_entropy(logits, 2)


loss = loss_fn(kernels, kbias, weight, bias)
print("loss:", loss.item())

# The graph is recorded while the forward pass runs.
grads = backprop(loss, [kernels, kbias, weight, bias])
print("gradient shapes:", [g.shape for g in grads])

# Central differences on a few weight coordinates agree with backprop.
h = 1e-6
for idx in [(0, 0), (1, 5), (3, 11)]:
    w = weight.data.copy()
    w[idx] += h
    up = loss_fn(kernels, kbias, Tensor(w, dtype=np.float64), bias).item()
    w[idx] -= 2 * h
    down = loss_fn(kernels, kbias, Tensor(w, dtype=np.float64), bias).item()
    numeric = (up - down) / (2 * h)
    print(f"dL/dW{idx}: backprop {grads[2][idx]: .8f}  finite diff {numeric: .8f}")

# Single inputs and batches share the same ops: a leading axis is a batch.
batch = Tensor(rng.random((5, 2, 6, 6)))
print("batched conv output:", T.conv2d_apply(batch, Tensor(kernels.data.astype(np.float32)),
                                              Tensor(kbias.data.astype(np.float32)), 1, 1).shape)
