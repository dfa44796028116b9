"""
Reverse-mode gradients on a small graph
=======================================

Build a scalar from a few array operations, run backward, and compare the
result with finite differences.
"""

import numpy as np
from claimcast import autodiff as ad

rng = np.random.default_rng(0)
W = ad.parameter(rng.normal(size=(3, 2)))
x = ad.constant(rng.normal(size=(5, 3)))

# a tiny two-layer network with a softplus read-out
h = ad.tanh(x @ W)
loss = ad.sum(ad.softplus(h) * h)
ad.backward(loss)
print("loss", float(loss.value))
print("dloss/dW\n", W.grad)

# the same gradient from central differences
report = ad.grad_check(lambda: ad.sum(ad.softplus(ad.tanh(x @ W)) * ad.tanh(x @ W)), [W])
print("max relative error", report["max_error"])

# calling backward twice accumulates into leaves
ad.backward(loss)
print("after a second backward the gradient doubles:", np.allclose(W.grad, 2 * report["analytic"][0]))
