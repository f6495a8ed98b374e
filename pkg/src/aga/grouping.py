"""
Sparse similarity grouping and the EMA threshold gates.

For one image/report pair the raw token-patch similarity matrix is min-max
normalised per row, entries below the gate threshold are dropped, and the
survivors are renormalised into alignment weights.  Weighting patch
embeddings by the token rows gives one token-grouped visual embedding (TGV)
per token; running the same steps on the transposed raw matrix gives one
patch-grouped language embedding (PGL) per patch.

The keep/drop mask is a constant of the backward pass, and the gates are
plain bookkeeping outside the graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, matmul, transpose, where_const, ShapeError


@dataclass
class GateState:
    """One EMA threshold gate (language- or vision-grouped)."""

    sigma: float = 0.0
    gamma: float = 0.99
    step_count: int = 0
    trajectory: list = field(default_factory=list)
    frozen: bool = False

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError(f"sigma must lie in [0, 1], got {self.sigma}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")

    def copy(self):
        return GateState(self.sigma, self.gamma, self.step_count, list(self.trajectory), self.frozen)


@dataclass
class AlignmentState:
    S: Tensor  # [M, N] raw similarities
    S_hat: Tensor
    S_tilde: Tensor
    alpha: Tensor  # token -> patch weights
    S_hat_v: Tensor  # [N, M] patch rows
    S_tilde_v: Tensor
    alpha_v: Tensor  # patch -> token weights


@dataclass
class GroupEmbeddings:
    tgv: Tensor  # [M, d]
    pgl: Tensor  # [N, d]


def similarity_matrix(token_embeds, patch_embeds):
    """Raw inner products, rows are tokens and columns are patches."""
    if token_embeds.shape[-1] != patch_embeds.shape[-1]:
        raise ShapeError(
            f"embedding dims differ: tokens {token_embeds.shape}, patches {patch_embeds.shape}")
    return matmul(token_embeds, transpose(patch_embeds))


def minmax_rows(S):
    """(s - row min) / (row max - row min); constant rows become all ones."""
    S = as_tensor(S)
    lo = S.min(axis=-1, keepdims=True)
    hi = S.max(axis=-1, keepdims=True)
    spread = hi - lo
    flat = spread.data <= 0.0
    if not flat.any():
        return (S - lo) / spread
    # constant rows: numerator and denominator are both exactly zero
    out = (S - lo) / (spread + Tensor(flat.astype(np.float64)))
    return out + Tensor(np.broadcast_to(flat, S.shape).astype(np.float64))


def keep_mask(S_hat, sigma):
    data = S_hat.data if isinstance(S_hat, Tensor) else np.asarray(S_hat)
    return data >= sigma


def sparsify(S_hat, sigma):
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"sparsify threshold must lie in [0, 1], got {sigma}")
    S_hat = as_tensor(S_hat)
    return where_const(keep_mask(S_hat, sigma), S_hat)


def alignment_weights(S_tilde):
    """Row-normalise the sparsified matrix into convex weights."""
    S_tilde = as_tensor(S_tilde)
    totals = S_tilde.sum(axis=-1, keepdims=True)
    if (totals.data <= 0.0).any():
        raise ValueError("alignment_weights: a row has no positive surviving entry")
    return S_tilde / totals


def group_embed(alpha, source_embeds):
    if alpha.shape[-1] != source_embeds.shape[0]:
        raise ShapeError(f"alpha {alpha.shape} does not match source rows {source_embeds.shape}")
    return matmul(alpha, source_embeds)


def batch_mean(S_hat_batch):
    if len(S_hat_batch) == 0:
        raise ValueError("gate_update needs at least one matrix")
    total = sum(float(np.sum(_raw(s))) for s in S_hat_batch)
    count = sum(_raw(s).size for s in S_hat_batch)
    return total / count


def _raw(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def gate_update(g: GateState, S_hat_batch):
    """
    One EMA step toward the mean normalised similarity of the batch.

    ``g`` is updated in place and returned.  Frozen gates (fixed-threshold
    runs) keep their sigma but still log it, so trajectories stay aligned.
    """
    mean = batch_mean(S_hat_batch)
    if not g.frozen:
        g.sigma = g.gamma * g.sigma + (1.0 - g.gamma) * mean
    g.step_count += 1
    g.trajectory.append((g.step_count, g.sigma))
    return g


def group_direction(S, source_embeds, sigma):
    S_hat = minmax_rows(S)
    S_tilde = sparsify(S_hat, sigma)
    alpha = alignment_weights(S_tilde)
    return S_hat, S_tilde, alpha, group_embed(alpha, source_embeds)


def compute_groups(token_embeds, patch_embeds, sigma_tg, sigma_vg):
    """
    Both grouping directions for one pair.

    ``token_embeds`` holds only the real tokens.  Thresholds are plain
    floats (gate snapshots); updating the gates is the caller's job so that a
    whole batch is grouped under the same thresholds.
    """
    if isinstance(sigma_tg, GateState):
        sigma_tg = sigma_tg.sigma
    if isinstance(sigma_vg, GateState):
        sigma_vg = sigma_vg.sigma
    S = similarity_matrix(token_embeds, patch_embeds)
    S_hat, S_tilde, alpha, tgv = group_direction(S, patch_embeds, sigma_tg)
    S_hat_v, S_tilde_v, alpha_v, pgl = group_direction(transpose(S), token_embeds, sigma_vg)
    state = AlignmentState(S, S_hat, S_tilde, alpha, S_hat_v, S_tilde_v, alpha_v)
    return state, GroupEmbeddings(tgv, pgl)


def compute_groups_and_update(token_embeds, patch_embeds, gate_tg: GateState, gate_vg: GateState):
    """Single-pair convenience: group under the current thresholds, then step both gates."""
    state, groups = compute_groups(token_embeds, patch_embeds, gate_tg.sigma, gate_vg.sigma)
    gate_update(gate_tg, [state.S_hat])
    gate_update(gate_vg, [state.S_hat_v])
    return state, groups


def gate_trajectory_csv(gate_tg: GateState, gate_vg: GateState):
    """``step,sigma_tg,sigma_vg`` lines for the steps both gates recorded."""
    lines = ["step,sigma_tg,sigma_vg"]
    vg = dict(gate_vg.trajectory)
    for step, s_tg in gate_tg.trajectory:
        if step in vg:
            lines.append(f"{step},{s_tg!r},{vg[step]!r}")
    return "\n".join(lines) + "\n"
