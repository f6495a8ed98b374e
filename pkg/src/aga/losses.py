"""
Alignment objectives: global InfoNCE, the within-pair group alignment
losses, cross-attention between the two group sets, and their weighted sum.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import (
    Tensor, l2_normalize, log_softmax, row_softmax, matmul, transpose, scale, ShapeError,
)


@dataclass(frozen=True)
class Temperatures:
    tau1: float = 0.3
    tau2: float = 0.3
    tau3: float = 0.1

    def __post_init__(self):
        for name in ("tau1", "tau2", "tau3"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda3: float = 0.5

    def __post_init__(self):
        vals = (self.lambda1, self.lambda2, self.lambda3)
        if min(vals) < 0 or max(vals) == 0:
            raise ValueError(f"loss weights must be non-negative and not all zero, got {vals}")


class BcgaParams:
    """Query/key/value projections for one attention direction."""

    def __init__(self, Wq, Wk, Wv):
        self.Wq, self.Wk, self.Wv = Wq, Wk, Wv
        d = Wq.shape[0]
        for w in (Wq, Wk, Wv):
            if w.shape != (d, d):
                raise ShapeError(f"BCGA projections must all be square {d}x{d}, got {w.shape}")

    @classmethod
    def init(cls, rng, dim):
        def w():
            return Tensor(rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, dim)), requires_grad=True)
        return cls(w(), w(), w())

    @classmethod
    def identity(cls, dim):
        return cls(*(Tensor(np.eye(dim), requires_grad=True) for _ in range(3)))

    def parameters(self):
        return [self.Wq, self.Wk, self.Wv]

    def named_parameters(self):
        return [("Wq", self.Wq), ("Wk", self.Wk), ("Wv", self.Wv)]


@dataclass
class LossBreakdown:
    l_g: float
    l_tf: float
    l_vf: float
    l_gla: float
    l_gva: float
    l_total: float
    total: Tensor = None  # differentiable total, not serialised

    def record(self, step):
        d = {k: v for k, v in asdict(self).items() if k != "total"}
        return {"step": step, **d}

    def to_json(self, step):
        return json.dumps(self.record(step))


def cosine(a, b, eps=1e-8):
    return (l2_normalize(a, eps) * l2_normalize(b, eps)).sum()


def cosine_matrix(a, b, eps=1e-8):
    """``[A, B]`` matrix of cosine similarities between rows."""
    return matmul(l2_normalize(a, eps), transpose(l2_normalize(b, eps)))


def symmetric_infonce(anchors, candidates, tau):
    """
    Mean over rows of the two-way InfoNCE where row j of ``anchors`` pairs
    with row j of ``candidates``, divided by two:

        -(1/2L) sum_j [log softmax_k(phi(a_j, c_k)/tau)_j + log softmax_k(phi(c_j, a_k)/tau)_j]
    """
    n = anchors.shape[0]
    if candidates.shape[0] != n:
        raise ShapeError(f"row counts differ: {anchors.shape} vs {candidates.shape}")
    logits = scale(cosine_matrix(anchors, candidates), 1.0 / tau)
    diag = (np.arange(n), np.arange(n))
    forward = log_softmax(logits, axis=1)[diag]
    reverse = log_softmax(logits, axis=0)[diag]
    return scale((forward + reverse).sum(), -0.5 / n)


def global_loss(global_imgs, global_txts, tau1):
    """Batch-level symmetric InfoNCE on global embeddings."""
    return symmetric_infonce(global_imgs, global_txts, tau1)


def iga_loss(locals_, groups, tau2):
    """Within-pair alignment of local embeddings with their group embeddings."""
    return symmetric_infonce(groups, locals_, tau2)


def grouped_crossmodal_loss(groups, crossmodal, tau3):
    return symmetric_infonce(groups, crossmodal, tau3)


def bcga_attend(queries, keys_values, params: BcgaParams):
    """Single-head scaled dot-product cross-attention, rows attend over ``keys_values``."""
    d = params.Wq.shape[0]
    if queries.shape[-1] != d or keys_values.shape[-1] != d:
        raise ShapeError(
            f"attention dims: queries {queries.shape}, keys {keys_values.shape}, projections {d}")
    q = matmul(queries, transpose(params.Wq))
    k = matmul(keys_values, transpose(params.Wk))
    v = matmul(keys_values, transpose(params.Wv))
    beta = row_softmax(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d)))
    return matmul(beta, v)


def pair_losses(tokens, patches, groups, temps: Temperatures, bcga_lv=None, bcga_vl=None,
                normalize_groups=True):
    """
    Per-pair IGA and (optionally) cross-modal group losses.

    Returns ``(l_tf, l_vf, l_gla, l_gva)`` as tensors; the last two are
    ``None`` when no attention params are given.
    """
    l_tf = iga_loss(tokens, groups.tgv, temps.tau2)
    l_vf = iga_loss(patches, groups.pgl, temps.tau2)
    if bcga_lv is None:
        return l_tf, l_vf, None, None
    P, Q = groups.tgv, groups.pgl
    if normalize_groups:
        P, Q = l2_normalize(P), l2_normalize(Q)
    u = bcga_attend(P, Q, bcga_lv)
    w = bcga_attend(Q, P, bcga_vl)
    l_gla = grouped_crossmodal_loss(groups.tgv, u, temps.tau3)
    l_gva = grouped_crossmodal_loss(groups.pgl, w, temps.tau3)
    return l_tf, l_vf, l_gla, l_gva


def _mean(terms):
    terms = [_as_tensor_or_none(t) for t in terms if t is not None]
    if not terms:
        return None
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return scale(acc, 1.0 / len(terms))


def total_loss(l_g, per_pair, weights: LossWeights):
    """
    Combine the batch loss terms.

    ``per_pair`` is a list of ``(l_tf, l_vf, l_gla, l_gva)`` tuples (entries
    may be ``None``, or the list empty, for ablations).  Batch values are the
    plain means over pairs, which carries the 1/(2b) factor since each pair
    term is already halved.
    """
    cols = list(zip(*per_pair)) if per_pair else [(), (), (), ()]
    parts = [_as_tensor_or_none(l_g)] + [_mean(c) for c in cols]
    coeffs = [weights.lambda1, weights.lambda2 / 2, weights.lambda2 / 2,
              weights.lambda3 / 2, weights.lambda3 / 2]
    total = None
    for c, part in zip(coeffs, parts):
        if part is None or c == 0:
            continue
        term = scale(part, c)
        total = term if total is None else total + term
    if total is None:
        total = Tensor(0.0)
    vals = [0.0 if p is None else p.item() for p in parts]
    return LossBreakdown(*vals, l_total=total.item(), total=total)


def _as_tensor_or_none(x):
    if x is None or isinstance(x, Tensor):
        return x
    return Tensor(x)
