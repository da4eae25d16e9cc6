"""
Gradients with the tape
=======================

Every differentiable operation records itself on the active tape. Calling
``backward`` walks the tape in reverse and fills ``.grad`` on each leaf.
"""

import numpy as np

from hireformer.numerics import Tensor, grad_check, ops, precision, use_tape

# a small softmax regression
g = np.random.default_rng(0)
x = Tensor(g.normal(size=(5, 3)))
w = Tensor(g.normal(size=(3, 4)), requires_grad=True)

with use_tape() as tape:
    logits = ops.matmul(x, w)
    loss = ops.cross_entropy(logits, np.array([0, 1, 2, 3, 0]))
tape.backward(loss)
print("loss", float(loss.data))
print("dL/dw\n", w.grad)

# %%
# Checking against finite differences. The check runs in float64 so the
# difference quotient is accurate enough to compare.

with precision("float64"):
    err = grad_check(lambda t: ops.cross_entropy(ops.matmul(x, t), np.array([0, 1, 2, 3, 0])),
                     Tensor(w.data.astype(np.float64)))
print("max relative error", err)
