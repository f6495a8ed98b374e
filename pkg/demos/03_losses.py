"""
Contrastive terms and their closed forms
========================================

"""

import math

import numpy as np

from aga.autodiff import Tensor
from aga.losses import BcgaParams, LossWeights, bcga_attend, global_loss, iga_loss, total_loss

e = np.eye(3)

# one pair: the only candidate is the positive, nothing to contrast
print("b=1 global", global_loss(Tensor(e[:1]), Tensor(e[1:2]), 0.3).item())

# orthonormal matched pairs: log(1 + (L-1) exp(-1/tau))
print("b=2 global", global_loss(Tensor(e[:2]), Tensor(e[:2]), 0.3).item(), math.log1p(math.exp(-1 / 0.3)))
print("L=3 IGA   ", iga_loss(Tensor(e), Tensor(e), 0.3).item(), math.log1p(2 * math.exp(-1 / 0.3)))

# a mismatched assignment costs more
print("shuffled  ", iga_loss(Tensor(e), Tensor(e[[1, 2, 0]]), 0.3).item())

# cross-attention with identity projections and identical keys returns the key
z = np.array([0.2, -1.0, 0.5])
print("attention ", bcga_attend(Tensor(e), Tensor(np.tile(z, (4, 1))), BcgaParams.identity(3)).data[0])

# weighted sum of the five terms
parts = total_loss(1.0, [(2.0, 2.0, 4.0, 4.0)], LossWeights(0.5, 0.5, 0.5))
print("total", parts.l_total)
