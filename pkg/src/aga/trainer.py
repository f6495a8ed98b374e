"""
Pretraining loop: encoders -> grouping -> losses -> AdamW -> gate EMA.

Within a step every pair is grouped with the thresholds as they stood
before the step; both gates move once, after the parameter update, using
that step's normalised similarity matrices.  This keeps each step's loss a
pure function of (parameters, gate state), which is what makes resuming
from a checkpoint bitwise-identical.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import binio
from .autodiff import Tensor, backward, concat
from .encoders import EncoderParams, encode_image, encode_text
from .grouping import GateState, compute_groups, gate_update, gate_trajectory_csv
from .losses import (
    BcgaParams, LossWeights, Temperatures, global_loss, pair_losses, total_loss,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AGAK"
CHECKPOINT_VERSION = 1

_INIT, _SHUFFLE = 10, 11

VARIANTS = ("full", "global_only", "no_bcga", "fixed")
FIXED_THRESHOLDS = (1 / 361, 1 / 97)


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    tau1: float = 0.3
    tau2: float = 0.3
    tau3: float = 0.1
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda3: float = 0.5
    gamma_tg: float = 0.99
    gamma_vg: float = 0.99
    sigma0: float = 0.0
    variant: str = "full"
    fixed_sigma_tg: float = FIXED_THRESHOLDS[0]
    fixed_sigma_vg: float = FIXED_THRESHOLDS[1]
    seed: int = 0
    d: int = 16
    hidden: int = 32
    mix_window: int = 3
    checkpoint_every: int = 0

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("fixed_sigma_tg", "fixed_sigma_vg", "sigma0"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("gamma_tg", "gamma_vg"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        self.temperatures()
        self.loss_weights()
        return self

    def temperatures(self):
        return Temperatures(self.tau1, self.tau2, self.tau3)

    def loss_weights(self):
        l2 = 0.0 if self.variant == "global_only" else self.lambda2
        l3 = 0.0 if self.variant in ("global_only", "no_bcga") else self.lambda3
        return LossWeights(self.lambda1, l2, l3)


def parse_variant(text):
    """
    ``full``, ``global-only``, ``no-bcga``, ``fixed`` or ``fixed:TG,VG``.

    Returns a dict of TrainConfig overrides.
    """
    t = text.strip().lower().replace("-", "_")
    if t in ("full", "global_only", "no_bcga"):
        return {"variant": t}
    if t == "fixed":
        return {"variant": "fixed"}
    if t.startswith("fixed:"):
        try:
            tg, vg = (float(x) for x in t[len("fixed:"):].split(","))
        except ValueError:
            raise ValueError(f"variant: expected fixed:SIGMA_TG,SIGMA_VG, got {text!r}") from None
        return {"variant": "fixed", "fixed_sigma_tg": tg, "fixed_sigma_vg": vg}
    raise ValueError(f"variant: unknown variant {text!r}")


class AGAModel:
    def __init__(self, encoder: EncoderParams, bcga_lv: BcgaParams, bcga_vl: BcgaParams):
        self.encoder = encoder
        self.bcga_lv = bcga_lv
        self.bcga_vl = bcga_vl

    @classmethod
    def init(cls, rng, channels, vocab, d=16, hidden=32, mix_window=3):
        enc = EncoderParams.init(rng, channels, hidden, d, vocab, mix_window)
        return cls(enc, BcgaParams.init(rng, d), BcgaParams.init(rng, d))

    def named_parameters(self):
        out = [(f"enc.{k}", t) for k, t in self.encoder.named_parameters()]
        out += [(f"bcga_lv.{k}", t) for k, t in self.bcga_lv.named_parameters()]
        out += [(f"bcga_vl.{k}", t) for k, t in self.bcga_vl.named_parameters()]
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class AdamW:
    """Adam with decoupled weight decay; parameters without a gradient are left alone."""

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params:
            if not p.has_grad:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data *= 1.0 - self.lr * self.wd
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainState:
    config: TrainConfig
    model: AGAModel
    optimizer: AdamW
    gate_tg: GateState
    gate_vg: GateState
    step: int = 0
    records: list = field(default_factory=list)

    @classmethod
    def fresh(cls, config: TrainConfig, channels, vocab):
        config.validate()
        rng = np.random.default_rng([config.seed, _INIT])
        model = AGAModel.init(rng, channels, vocab, config.d, config.hidden, config.mix_window)
        opt = AdamW(model.named_parameters(), config.lr, config.beta1, config.beta2,
                    config.adam_eps, config.weight_decay)
        if config.variant == "fixed":
            g_tg = GateState(config.fixed_sigma_tg, config.gamma_tg, frozen=True)
            g_vg = GateState(config.fixed_sigma_vg, config.gamma_vg, frozen=True)
        else:
            g_tg = GateState(config.sigma0, config.gamma_tg)
            g_vg = GateState(config.sigma0, config.gamma_vg)
        return cls(config, model, opt, g_tg, g_vg)


# -- forward ------------------------------------------------------------------

@dataclass
class PairForward:
    patches: Tensor
    tokens: Tensor
    global_img: Tensor
    global_txt: Tensor
    alignment: object = None
    groups: object = None
    losses: tuple = (None, None, None, None)


def forward_pair(model: AGAModel, pair, sigma_tg, sigma_vg, temps, variant="full"):
    patches, g_img = encode_image(pair.image, model.encoder)
    token_embeds, g_txt = encode_text(pair.text, model.encoder)
    tokens = token_embeds[:pair.text.length]
    for name, t in (("patch", patches), ("token", tokens), ("global", g_img), ("global", g_txt)):
        if not np.isfinite(t.data).all():
            raise NumericError(f"non-finite {name} embeddings")
    out = PairForward(patches, tokens, g_img, g_txt)
    if variant == "global_only":
        return out
    out.alignment, out.groups = compute_groups(tokens, patches, sigma_tg, sigma_vg)
    if variant == "no_bcga":
        out.losses = pair_losses(tokens, patches, out.groups, temps)
    else:
        out.losses = pair_losses(tokens, patches, out.groups, temps, model.bcga_lv, model.bcga_vl)
    return out


def batch_loss(model: AGAModel, batch, sigma_tg, sigma_vg, config: TrainConfig):
    """Returns ``(LossBreakdown, [PairForward])`` for one batch under fixed thresholds."""
    temps = config.temperatures()
    fwd = []
    for i, p in enumerate(batch):
        try:
            fwd.append(forward_pair(model, p, sigma_tg, sigma_vg, temps, config.variant))
        except NumericError as exc:
            raise NumericError(f"{exc} at pair index {i} of the batch") from None
    for i, f in enumerate(fwd):
        bad = [k for k, l in zip(("l_tf", "l_vf", "l_gla", "l_gva"), f.losses)
               if l is not None and not np.isfinite(l.data)]
        if bad:
            raise NumericError(f"non-finite {', '.join(bad)} at pair index {i} of the batch")
    imgs = concat([f.global_img.reshape(1, -1) for f in fwd], axis=0)
    txts = concat([f.global_txt.reshape(1, -1) for f in fwd], axis=0)
    l_g = global_loss(imgs, txts, config.tau1)
    per_pair = [] if config.variant == "global_only" else [f.losses for f in fwd]
    parts = total_loss(l_g, per_pair, config.loss_weights())
    if not math.isfinite(parts.l_total):
        raise NumericError(f"non-finite total loss (global term {parts.l_g})")
    return parts, fwd


def train_step(state: TrainState, batch):
    if not batch:
        raise ValueError("train_step needs a non-empty batch")
    cfg = state.config
    state.model.zero_grad()
    parts, fwd = batch_loss(state.model, batch, state.gate_tg.sigma, state.gate_vg.sigma, cfg)
    backward(parts.total)
    state.optimizer.step()
    if cfg.variant == "global_only":
        s_tg = s_vg = None
    else:
        s_tg = [f.alignment.S_hat.data for f in fwd]
        s_vg = [f.alignment.S_hat_v.data for f in fwd]
    _step_gate(state.gate_tg, s_tg)
    _step_gate(state.gate_vg, s_vg)
    state.step += 1
    state.records.append(parts.record(state.step))
    return parts


def _step_gate(gate, mats):
    if mats is None:
        # no grouping this step; log the unchanged threshold
        gate.step_count += 1
        gate.trajectory.append((gate.step_count, gate.sigma))
    else:
        gate_update(gate, mats)


# -- epoch loop -----------------------------------------------------------------

def steps_per_epoch(n, batch_size):
    return -(-n // batch_size)


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, _SHUFFLE, epoch]).permutation(n)


def fit(config: TrainConfig, train_pairs, out_dir=None, state: TrainState | None = None,
        max_steps=None, channels=None, vocab=None):
    """
    Train for ``config.epochs`` epochs (or until ``max_steps`` total steps).

    Pass ``state`` to resume; otherwise a fresh state is built, which needs
    ``channels`` and ``vocab`` (taken from the corpus world config).
    """
    if not train_pairs:
        raise ValueError("fit needs a non-empty training set")
    if state is None:
        if channels is None:
            channels = train_pairs[0].image.patches.shape[1]
        if vocab is None:
            raise ValueError("fit: vocab is required for a fresh state")
        state = TrainState.fresh(config, channels, vocab)
    n = len(train_pairs)
    spe = steps_per_epoch(n, config.batch_size)
    total = config.epochs * spe if max_steps is None else min(max_steps, config.epochs * spe)
    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "a" if state.step else "w")
    try:
        while state.step < total:
            epoch, offset = divmod(state.step, spe)
            order = epoch_order(config.seed, epoch, n)
            idx = order[offset * config.batch_size:(offset + 1) * config.batch_size]
            parts = train_step(state, [train_pairs[i] for i in idx])
            if metrics_fh:
                metrics_fh.write(parts.to_json(state.step) + "\n")
            if offset == spe - 1:
                log.info("epoch %d done: l_total=%.5f sigma_tg=%.4f sigma_vg=%.4f",
                         epoch + 1, parts.l_total, state.gate_tg.sigma, state.gate_vg.sigma)
            if out_dir and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, f"checkpoint_{state.step:06d}.agak"), state)
    finally:
        if metrics_fh:
            metrics_fh.close()
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "checkpoint.agak"), state)
        with open(os.path.join(out_dir, "gates.csv"), "w") as fh:
            fh.write(gate_trajectory_csv(state.gate_tg, state.gate_vg))
    return state


# -- checkpoints ------------------------------------------------------------------

def _gate_arrays(prefix, g: GateState):
    traj = np.array(g.trajectory, dtype=np.float64).reshape(-1, 2)
    return {
        f"{prefix}.sigma": np.float64(g.sigma),
        f"{prefix}.gamma": np.float64(g.gamma),
        f"{prefix}.step_count": np.float64(g.step_count),
        f"{prefix}.frozen": np.float64(g.frozen),
        f"{prefix}.trajectory": traj,
    }


def _gate_from(prefix, a):
    traj = [(int(s), float(v)) for s, v in a[f"{prefix}.trajectory"]]
    return GateState(float(a[f"{prefix}.sigma"]), float(a[f"{prefix}.gamma"]),
                     int(a[f"{prefix}.step_count"]), traj, bool(a[f"{prefix}.frozen"]))


def dumps_checkpoint(state: TrainState) -> bytes:
    arrays = {
        "step": np.float64(state.step),
        "rng.seed": np.float64(state.config.seed),
        "enc.mix_window": np.float64(state.model.encoder.mix_window),
        "adam.t": np.float64(state.optimizer.t),
        "config.json": binio.json_array(asdict(state.config)),
    }
    for name, p in state.model.named_parameters():
        arrays[name] = p.data
    for name, _ in state.model.named_parameters():
        arrays[f"adam.m.{name}"] = state.optimizer.m[name]
        arrays[f"adam.v.{name}"] = state.optimizer.v[name]
    arrays.update(_gate_arrays("gate_tg", state.gate_tg))
    arrays.update(_gate_arrays("gate_vg", state.gate_vg))
    return binio.dumps(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, arrays)


def loads_checkpoint(buf: bytes, config: TrainConfig | None = None) -> TrainState:
    """
    Rebuild a training state.  Without ``config`` a default config with the
    checkpoint's dimensions is used (enough for evaluation).
    """
    version, a = binio.loads(buf, CHECKPOINT_MAGIC)
    if version != CHECKPOINT_VERSION:
        raise binio.FormatError(f"unsupported checkpoint version {version}")
    enc = EncoderParams(
        {k[len("enc."):]: Tensor(v, requires_grad=True) for k, v in a.items()
         if k.startswith("enc.") and k != "enc.mix_window"},
        int(a["enc.mix_window"]),
    )
    bc = {}
    for side in ("bcga_lv", "bcga_vl"):
        bc[side] = BcgaParams(*(Tensor(a[f"{side}.{w}"], requires_grad=True) for w in ("Wq", "Wk", "Wv")))
    model = AGAModel(enc, bc["bcga_lv"], bc["bcga_vl"])
    if config is None:
        config = TrainConfig(**binio.array_json(a["config.json"]))
    elif config.d != enc.dim or config.hidden != enc.hidden:
        raise ValueError(f"checkpoint dims d={enc.dim}, hidden={enc.hidden} do not match config "
                         f"d={config.d}, hidden={config.hidden}")
    opt = AdamW(model.named_parameters(), config.lr, config.beta1, config.beta2,
                config.adam_eps, config.weight_decay)
    opt.t = int(a["adam.t"])
    for name, _ in model.named_parameters():
        opt.m[name] = a[f"adam.m.{name}"].copy()
        opt.v[name] = a[f"adam.v.{name}"].copy()
    return TrainState(config, model, opt, _gate_from("gate_tg", a), _gate_from("gate_vg", a),
                      int(a["step"]))


def save_checkpoint(path, state):
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(state))


def load_checkpoint(path, config=None):
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read(), config)
