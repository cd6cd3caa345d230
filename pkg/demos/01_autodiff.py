"""
Reverse-mode autodiff on a small conv block
===========================================

Operations record themselves on the active tape; ``backward`` walks the
records in reverse. ``grad_check`` compares the result with central
differences in float64.
"""

import numpy as np

from segxfer.tensor import Tape, Tensor, conv2d_same, dense, elu, flatten, grad_check, maxpool2, softmax_weighted_nll

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(1, 8, 8)), requires_grad=True)
k = Tensor(rng.normal(scale=0.5, size=(4, 1, 3, 3)), requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)
w = Tensor(rng.normal(scale=0.2, size=(2, 64)), requires_grad=True)
c = Tensor(np.zeros(2), requires_grad=True)


def net(x, k, b, w, c):
    h = maxpool2(elu(conv2d_same(x, k, b)))
    logits = dense(flatten(h), w, c)
    # class 1, with class weights 0.2 / 0.9
    return softmax_weighted_nll(logits, np.array(1), np.array([0.2, 0.9]), axis=0, batched=False)


with Tape() as tape:
    loss = net(x, k, b, w, c)
grads = tape.backward(loss)
print(f"loss {loss.item():.4f}, {len(tape.entries)} recorded ops")
print("kernel gradient norm", np.linalg.norm(grads[k]))

# every input, every element
print("max relative error vs finite differences:", grad_check(net, [x, k, b, w, c], eps=1e-6))
