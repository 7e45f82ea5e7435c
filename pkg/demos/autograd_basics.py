"""Reverse-mode autodiff on numpy arrays, checked against finite differences.

Run: python demos/autograd_basics.py
"""

import numpy as np

from longseq import autograd as ag
from longseq.autograd import Tensor

rng = np.random.default_rng(0)
x = rng.normal(size=(4, 6))
w = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
labels = np.array([0, 2, 1, -100])  # the last row is ignored


def loss_of(t):
    loss, _ = ag.cross_entropy(ag.linear(ag.silu(t), w), labels)
    return loss


# the tape gradient
xt = Tensor(x, requires_grad=True)
loss = loss_of(xt)
loss.backward()
print(f"loss = {float(loss.data):.6f}")

# central differences agree to ~1e-10
fd = ag.finite_diff_grad(loss_of, x, 1e-5)
print(f"max |tape - finite difference| = {np.max(np.abs(xt.grad - fd)):.2e}")

# checkpointing drops the inner activations and recomputes them on backward
w.grad = None
xc = Tensor(x, requires_grad=True)
ag.checkpoint(loss_of, xc).backward()
print(f"checkpointed grad equals plain grad: {np.array_equal(xc.grad, xt.grad)}")
