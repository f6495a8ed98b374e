"""
Toy image and text encoders.

The image side is a one-hidden-layer patch projector (tanh) with mean
pooling for the global embedding.  The text side looks tokens up in a table,
averages each token with its neighbours inside a small reflective window, and
projects.  Both produce the shapes the grouping code expects: local
embeddings ``[N, d]`` / ``[M_max, d]`` and a global ``[d]`` vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, tanh, gather_rows, where_const


@dataclass
class ImageSample:
    patches: np.ndarray  # [N, C]

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.patches.ndim != 2 or min(self.patches.shape) < 1:
            raise ValueError(f"patches must be a non-empty [N, C] array, got {self.patches.shape}")


@dataclass
class TextSample:
    token_ids: np.ndarray  # [M_max] int
    mask: np.ndarray  # [M_max] bool, true for real tokens

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.token_ids.shape != self.mask.shape:
            raise ValueError("token_ids and mask must have the same length")

    @property
    def length(self):
        return int(self.mask.sum())


PARAM_NAMES = (
    "patch_proj", "patch_proj_b", "patch_head", "patch_head_b",
    "token_table", "token_head", "token_head_b",
    "global_img_head", "global_img_head_b", "global_txt_head", "global_txt_head_b",
)


class EncoderParams:
    """Learnable encoder weights, all ``Tensor`` with ``requires_grad``."""

    def __init__(self, tensors: dict, mix_window=3):
        if mix_window < 1 or mix_window % 2 == 0:
            raise ValueError(f"mix_window must be a positive odd integer, got {mix_window}")
        missing = set(PARAM_NAMES) - set(tensors)
        if missing:
            raise ValueError(f"missing encoder parameters: {sorted(missing)}")
        self.tensors = {k: tensors[k] for k in PARAM_NAMES}
        self.mix_window = int(mix_window)
        for name, t in self.tensors.items():
            if not np.isfinite(t.data).all():
                raise ValueError(f"encoder parameter {name} is not finite")

    @classmethod
    def init(cls, rng, channels, hidden, dim, vocab, mix_window=3):
        def w(fan_in, fan_out):
            return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)), requires_grad=True)

        def b(n):
            return Tensor(np.zeros(n), requires_grad=True)

        t = {
            "patch_proj": w(channels, hidden), "patch_proj_b": b(hidden),
            "patch_head": w(hidden, dim), "patch_head_b": b(dim),
            "token_table": Tensor(rng.normal(0.0, 1.0, (vocab, hidden)), requires_grad=True),
            "token_head": w(hidden, dim), "token_head_b": b(dim),
            "global_img_head": w(hidden, dim), "global_img_head_b": b(dim),
            "global_txt_head": w(hidden, dim), "global_txt_head_b": b(dim),
        }
        return cls(t, mix_window)

    def __getattr__(self, name):
        try:
            return self.__dict__["tensors"][name]
        except KeyError:
            raise AttributeError(name) from None

    def parameters(self):
        return list(self.tensors.values())

    def named_parameters(self):
        return list(self.tensors.items())

    @property
    def dim(self):
        return self.tensors["patch_head"].shape[1]

    @property
    def hidden(self):
        return self.tensors["patch_proj"].shape[1]

    @property
    def channels(self):
        return self.tensors["patch_proj"].shape[0]

    @property
    def vocab(self):
        return self.tensors["token_table"].shape[0]


def encode_image(img: ImageSample, p: EncoderParams):
    """Returns ``(patch_embeds [N, d], global_embed [d])``."""
    x = img.patches
    if not np.isfinite(x).all():
        raise ValueError("image patches contain non-finite values")
    if x.shape[1] != p.channels:
        raise ValueError(f"image has {x.shape[1]} channels, encoder expects {p.channels}")
    hidden = tanh(Tensor(x) @ p.patch_proj + p.patch_proj_b)
    patch_embeds = hidden @ p.patch_head + p.patch_head_b
    pooled = hidden.mean(axis=0, keepdims=True)
    global_embed = (pooled @ p.global_img_head + p.global_img_head_b).reshape(-1)
    return patch_embeds, global_embed


def mixing_matrix(length, m_max, window):
    """
    ``[m_max, m_max]`` averaging matrix over a reflective window.

    Only the leading ``length`` rows/columns are non-zero, so padded slots
    neither produce nor receive anything.
    """
    mix = np.zeros((m_max, m_max))
    half = window // 2
    for j in range(length):
        for off in range(-half, half + 1):
            k = j + off
            if k < 0:
                k = -k
            elif k >= length:
                k = 2 * (length - 1) - k
            k = min(max(k, 0), length - 1)
            mix[j, k] += 1.0 / window
    return mix


def encode_text(txt: TextSample, p: EncoderParams):
    """Returns ``(token_embeds [M_max, d], global_embed [d])``; padded rows are zero."""
    m_max = txt.mask.shape[0]
    length = txt.length
    if length < 1:
        raise ValueError("text sample has an empty mask")
    if not txt.mask[:length].all():
        raise ValueError("text mask must mark a contiguous prefix of real tokens")
    # pad ids never reach the table
    ids = np.where(txt.mask, txt.token_ids, 0)
    if ids.min() < 0 or ids.max() >= p.vocab:
        raise ValueError(f"token id outside vocabulary of size {p.vocab}")
    looked_up = gather_rows(p.token_table, ids)
    hidden = Tensor(mixing_matrix(length, m_max, p.mix_window)) @ looked_up
    tokens = hidden @ p.token_head + p.token_head_b
    token_embeds = where_const(txt.mask[:, None], tokens)
    weights = Tensor(txt.mask[None, :] / length)
    pooled = weights @ hidden
    global_embed = (pooled @ p.global_txt_head + p.global_txt_head_b).reshape(-1)
    return token_embeds, global_embed
