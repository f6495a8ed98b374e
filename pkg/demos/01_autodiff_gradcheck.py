"""
Reverse-mode gradients and finite differences
=============================================

"""

import numpy as np

from aga import autodiff as ad
from aga.autodiff import Tensor, finite_difference_check

rng = np.random.default_rng(0)

# leaves that want gradients
W = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)

# a small graph: project, normalise rows, softmax against itself
h = ad.l2_normalize(x @ W)
p = ad.row_softmax(h @ h.T / 0.5)
loss = -p.log()[np.arange(4), np.arange(4)].mean()
loss.backward()
print("loss", loss.item())
print("dL/dW\n", W.grad)

# the recorded graph, inputs before outputs
for entry in ad.trace(loss):
    print(entry.op, entry.inputs, "->", entry.output)

# central differences agree with the analytic gradient
err = finite_difference_check(lambda: -ad.row_softmax(ad.l2_normalize(x @ W) @ ad.l2_normalize(x @ W).T / 0.5)
                              .log()[np.arange(4), np.arange(4)].mean(), [W, x])
print("max relative error", err)

# backward rules live in a registry, so a broken one is easy to spot
rule = ad.BACKWARD_RULES["matmul"]
ad.BACKWARD_RULES["matmul"] = lambda g, out: tuple(-v for v in rule(g, out))
print("with a sign error in matmul:", finite_difference_check(lambda: (x @ W).sum(), [W]))
ad.BACKWARD_RULES["matmul"] = rule
