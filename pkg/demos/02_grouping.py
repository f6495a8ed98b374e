"""
Token and patch groups on a toy pair
====================================

"""

import numpy as np

from aga.autodiff import Tensor
from aga.grouping import GateState, compute_groups, gate_update

np.set_printoptions(precision=3, suppress=True)
rng = np.random.default_rng(1)

# three tokens, six patches; token 0 resembles patches 0-1, token 1 patches 2-3
patches = rng.normal(size=(6, 4)) * 0.1
patches[0:2] += [1, 0, 0, 0]
patches[2:4] += [0, 1, 0, 0]
tokens = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0.3, 0.3, 0.3, 0.3]])

for sigma in (0.0, 0.5, 0.9):
    state, groups = compute_groups(Tensor(tokens), Tensor(patches), sigma, sigma)
    print(f"sigma={sigma}")
    print(" normalised similarity\n", state.S_hat.data)
    print(" token->patch weights\n", state.alpha.data)

# higher thresholds give sparser, sharper groups; the row maximum always survives
state, groups = compute_groups(Tensor(tokens), Tensor(patches), 0.9, 0.9)
print("TGV for token 0", groups.tgv.data[0], "vs mean of patches 0-1", patches[:2].mean(0))

# the gate is an EMA of the batch-mean normalised similarity
g = GateState(sigma=0.0, gamma=0.99)
for step in range(500):
    gate_update(g, [state.S_hat.data])
print("gate after 500 steps", g.sigma, "target", state.S_hat.data.mean())
print("closed form", state.S_hat.data.mean() * (1 - 0.99**500))
