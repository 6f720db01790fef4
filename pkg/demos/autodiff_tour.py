"""
A short tour of the tape
========================

Every model in the package is built from the small reverse-mode engine in
``manifold_ssl.diffcore``. This script differentiates a two-layer network by
hand and checks the result against finite differences.
"""

import numpy as np

from manifold_ssl import diffcore as dc

rng = np.random.default_rng(0)

# leaves are tensors that ask for gradients
w1 = dc.Tensor(rng.normal(size=(3, 5)), requires_grad=True, name="w1")
w2 = dc.Tensor(rng.normal(size=(5, 2)), requires_grad=True, name="w2")
x = rng.normal(size=(4, 3))


def loss():
    h = dc.leaky_relu(dc.matmul(dc.Tensor(x), w1), 0.1)
    p = dc.softmax_rows(dc.matmul(h, w2))
    return dc.mean(dc.log(p))


out = loss()
grads = dc.backward(out, wrt=[w1, w2])
print("loss", out.item())
print("d loss / d w2\n", grads[w2])

# central differences on every entry
report = dc.grad_check(loss, {"w1": w1, "w2": w2})
print("worst relative error", report.worst, "passed", report.passed)
