"""
Verification battery: gradient checks, scalar-oracle equivalences and
invariant sweeps.  ``run`` executes every registered check (optionally
filtered by group) and returns the results; ``main`` prints a table and
returns a process exit code.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import oracles
from .autodiff import Tensor, finite_difference_check
from .corpus import LabeledPair
from .encoders import ImageSample, TextSample, encode_image, encode_text
from .evaluation import retrieval_precision, roc_auc
from .grouping import GateState, compute_groups, gate_update, minmax_rows, sparsify, alignment_weights
from .losses import BcgaParams, bcga_attend, global_loss, iga_loss, grouped_crossmodal_loss
from .trainer import AGAModel, TrainConfig, batch_loss

CHECKS = []


@dataclass
class CheckResult:
    group: str
    name: str
    ok: bool
    detail: str
    seconds: float


def check(group):
    def register(fn):
        CHECKS.append((group, fn.__name__.removeprefix("check_"), fn))
        return fn
    return register


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _within(err, tol):
    return err <= tol, f"max rel err {err:.2e} (tol {tol:g})"


# -- substrate -------------------------------------------------------------------

@check("substrate")
def check_matmul_gradient():
    rng = np.random.default_rng(1)
    a, b = _param(rng, 4, 5), _param(rng, 5, 3)
    w = rng.normal(size=(4, 3))
    err = finite_difference_check(lambda: ((a @ b) * w).sum(), [a, b])
    return _within(err, 1e-6)


@check("substrate")
def check_row_softmax():
    rng = np.random.default_rng(2)
    x = _param(rng, 3, 4)
    y = ad.row_softmax(x).data
    ref = np.array([oracles.softmax(list(r)) for r in x.data])
    if np.abs(y - ref).max() > 1e-12:
        return False, "forward differs from scalar oracle"
    w = rng.normal(size=(3, 4))
    err = finite_difference_check(lambda: (ad.row_softmax(x) * w).sum(), [x])
    return _within(err, 1e-6)


@check("substrate")
def check_softmax_cross_entropy():
    rng = np.random.default_rng(3)
    x = _param(rng, 5, 6)
    target = (np.arange(5), rng.integers(0, 6, 5))
    err = finite_difference_check(lambda: -ad.row_softmax(x).log()[target].sum(), [x])
    return _within(err, 1e-6)


@check("substrate")
def check_l2_normalize():
    rng = np.random.default_rng(4)
    x = _param(rng, 5, 8)
    n = np.linalg.norm(ad.l2_normalize(x).data, axis=1)
    if not ((n >= 1 - 1e-9) & (n <= 1 + 2**-52)).all():
        return False, f"norms off: {n - 1}"
    w = rng.normal(size=(5, 8))
    err = finite_difference_check(lambda: (ad.l2_normalize(x) * w).sum(), [x])
    return _within(err, 1e-6)


def _elementwise_cases(rng):
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    row = _param(rng, 4)
    w = rng.normal(size=(3, 4))
    mask = rng.random((3, 4)) < 0.3
    return {
        "add_broadcast": (lambda: ((a + row) * w).sum(), [a, row]),
        "sub": (lambda: ((a - b) * w).sum(), [a, b]),
        "mul": (lambda: (a * b * w).sum(), [a, b]),
        "div": (lambda: (a / pos * w).sum(), [a, pos]),
        "pow": (lambda: ((pos ** 1.7) * w).sum(), [pos]),
        "exp": (lambda: (a.exp() * w).sum(), [a]),
        "log": (lambda: (pos.log() * w).sum(), [pos]),
        "tanh": (lambda: (a.tanh() * w).sum(), [a]),
        "sum_axis": (lambda: (a.sum(axis=0) * row).sum(), [a, row]),
        "mean_axis": (lambda: (a.mean(axis=1, keepdims=True) * a).sum(), [a]),
        "max_row": (lambda: (a.max(axis=1) ** 2).sum(), [a]),
        "min_row": (lambda: (a.min(axis=1) ** 2).sum(), [a]),
        "transpose": (lambda: (a.T @ b).sum(), [a, b]),
        "gather_rows": (lambda: (ad.gather_rows(a, [2, 0, 2]) * w[:3]).sum(), [a]),
        "concat": (lambda: (ad.concat([a, b], axis=1) ** 2).sum(), [a, b]),
        "masked_fill": (lambda: (ad.masked_fill(a, mask, 0.0) * w).sum(), [a]),
        "log_softmax": (lambda: (ad.log_softmax(a, axis=0) * w).sum(), [a]),
    }


@check("substrate")
def check_elementwise_gradients():
    rng = np.random.default_rng(5)
    worst, where = 0.0, None
    for name, (f, params) in _elementwise_cases(rng).items():
        err = finite_difference_check(f, params)
        if err > worst:
            worst, where = err, name
    ok, msg = _within(worst, 1e-6)
    return ok, f"{msg}, worst op {where}"


@check("substrate")
def check_backward_linearity():
    rng = np.random.default_rng(6)
    x = _param(rng, 4, 3)
    w = Tensor(rng.normal(size=(3, 2)))

    def f():
        return (x @ w).tanh().sum()

    def g():
        return ad.l2_normalize(x).exp().sum()

    grads = []
    for loss in (f, g, lambda: f() * 2.5 + g() * -0.75):
        x.zero_grad()
        loss().backward()
        grads.append(x.grad.copy())
    diff = np.abs(grads[2] - (2.5 * grads[0] - 0.75 * grads[1])).max()
    return diff <= 1e-12, f"max deviation {diff:.1e}"


# -- encoders -------------------------------------------------------------------

def _tiny_encoder(rng, channels=3, hidden=5, dim=4, vocab=10):
    model = AGAModel.init(rng, channels, vocab, dim, hidden)
    return model


@check("encoders")
def check_encoder_gradients():
    rng = np.random.default_rng(7)
    model = _tiny_encoder(rng)
    img = ImageSample(rng.normal(size=(6, 3)))
    txt = TextSample([3, 1, 4, 1, 0], [True, True, True, True, False])
    wi, wg = rng.normal(size=(6, 4)), rng.normal(size=4)
    wt = rng.normal(size=(5, 4))
    params = model.encoder.parameters()

    def f():
        p, g = encode_image(img, model.encoder)
        t, gt = encode_text(txt, model.encoder)
        return (p * wi).sum() + (g * wg).sum() + (t * wt).sum() + (gt * wg).sum()

    return _within(finite_difference_check(f, params), 1e-6)


@check("encoders")
def check_pad_invariance():
    rng = np.random.default_rng(8)
    model = _tiny_encoder(rng)
    mask = [True, True, True, False, False]
    t1, g1 = encode_text(TextSample([2, 5, 7, 0, 0], mask), model.encoder)
    t2, g2 = encode_text(TextSample([2, 5, 7, 9, 4], mask), model.encoder)
    same = np.array_equal(t1.data, t2.data) and np.array_equal(g1.data, g2.data)
    zero_pad = not t1.data[3:].any()
    return same and zero_pad, f"bitwise equal={same}, padded rows zero={zero_pad}"


# -- grouping -------------------------------------------------------------------

def grouping_oracle_error(rng, trials=100, max_m=8, max_n=12, d=4):
    worst = 0.0
    for _ in range(trials):
        m, n = int(rng.integers(1, max_m + 1)), int(rng.integers(1, max_n + 1))
        t, v = rng.normal(size=(m, d)), rng.normal(size=(n, d))
        s_tg, s_vg = float(rng.uniform()), float(rng.uniform())
        state, groups = compute_groups(Tensor(t), Tensor(v), s_tg, s_vg)
        ref = oracles.grouping_pipeline(t.tolist(), v.tolist(), s_tg, s_vg)
        got = {"S": state.S, "S_hat": state.S_hat, "alpha": state.alpha, "tgv": groups.tgv,
               "S_hat_v": state.S_hat_v, "alpha_v": state.alpha_v, "pgl": groups.pgl}
        for k, tensor in got.items():
            worst = max(worst, float(np.abs(tensor.data - np.array(ref[k])).max()))
    return worst


@check("grouping")
def check_grouping_oracle():
    err = grouping_oracle_error(np.random.default_rng(9))
    return err <= 1e-10, f"max abs deviation {err:.1e} over 100 pairs"


def nonempty_group_violations(rng, trials=1000, sigmas=(0.0, 0.25, 0.5, 0.75, 1.0)):
    bad, worst_sum = 0, 0.0
    for _ in range(trials):
        m, k = int(rng.integers(1, 9)), int(rng.integers(1, 13))
        S = rng.normal(size=(m, k))
        if rng.random() < 0.05:
            S[0] = S[0, 0]  # exercise constant rows
        S_hat = minmax_rows(Tensor(S))
        top = np.argmax(S_hat.data, axis=1)
        for sigma in sigmas:
            alpha = alignment_weights(sparsify(S_hat, sigma)).data
            bad += int((alpha[np.arange(m), top] <= 0).sum())
            bad += int((alpha < 0).sum())
            worst_sum = max(worst_sum, float(np.abs(alpha.sum(axis=1) - 1).max()))
    return bad, worst_sum


@check("grouping")
def check_nonempty_groups():
    bad, dev = nonempty_group_violations(np.random.default_rng(10))
    return bad == 0 and dev <= 1e-9, f"{bad} violations, max |row sum - 1| = {dev:.1e}"


def gate_closed_form_error(gamma, m=0.3, sigma0=0.0, T=200):
    g = GateState(sigma0, gamma)
    batch = [np.full((3, 4), m)]
    for _ in range(T):
        gate_update(g, batch)
    return abs(abs(g.sigma - m) - gamma**T * abs(sigma0 - m))


@check("grouping")
def check_gate_closed_form():
    errs = [gate_closed_form_error(g) for g in (0.99, 0.999)]
    return max(errs) <= 1e-10, f"errors {errs[0]:.1e}, {errs[1]:.1e}"


# -- losses ---------------------------------------------------------------------

def closed_form_losses(tau1=0.3, tau2=0.3):
    e = np.eye(4)
    b1 = global_loss(Tensor(e[:1]), Tensor(e[1:2]), tau1).item()
    l1 = iga_loss(Tensor(e[:1]), Tensor(e[2:3]), tau2).item()
    two = global_loss(Tensor(e[:2]), Tensor(e[:2]), tau1).item()
    return b1, l1, two, math.log1p(math.exp(-1 / tau1))


@check("losses")
def check_closed_forms():
    b1, l1, two, expected = closed_form_losses()
    ok = abs(b1) <= 1e-10 and abs(l1) <= 1e-10 and abs(two - expected) <= 1e-10
    return ok, f"b=1: {b1:.1e}, L=1: {l1:.1e}, orthonormal b=2: {two - expected:.1e} from closed form"


@check("losses")
def check_infonce_oracle():
    rng = np.random.default_rng(11)
    worst = 0.0
    for L in (2, 3, 5):
        a, c = rng.normal(size=(L, 4)), rng.normal(size=(L, 4))
        got = iga_loss(Tensor(c), Tensor(a), 0.3).item()
        worst = max(worst, abs(got - oracles.symmetric_infonce(a.tolist(), c.tolist(), 0.3)))
    return worst <= 1e-12, f"max deviation {worst:.1e}"


@check("losses")
def check_attention():
    rng = np.random.default_rng(12)
    q, kv = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    params = BcgaParams.init(rng, 4)
    got = bcga_attend(Tensor(q), Tensor(kv), params).data
    ref = np.array(oracles.attention(q, kv, params.Wq.data, params.Wk.data, params.Wv.data))
    dev = np.abs(got - ref).max()
    Q = _param(rng, 3, 4)
    KV = _param(rng, 5, 4)
    w = rng.normal(size=(3, 4))
    err = finite_difference_check(lambda: (bcga_attend(Q, KV, params) * w).sum(),
                                  [Q, KV] + params.parameters())
    return dev <= 1e-10 and err <= 1e-4, f"oracle deviation {dev:.1e}, gradient rel err {err:.1e}"


@check("losses")
def check_loss_gradients():
    rng = np.random.default_rng(13)
    a, b = _param(rng, 5, 4), _param(rng, 5, 4)
    worst = 0.0
    for f in (lambda: global_loss(a, b, 0.3), lambda: iga_loss(a, b, 0.3),
              lambda: grouped_crossmodal_loss(a, b, 0.1)):
        worst = max(worst, finite_difference_check(f, [a, b]))
    return _within(worst, 1e-4)


# -- full system ------------------------------------------------------------------

MICRO = dict(channels=3, hidden=5, d=4, vocab=10, n_patches=6, lengths=(3, 4))


def micro_batch(seed, sigma_tg=0.2, sigma_vg=0.3, margin=1e-3):
    """
    A b=2 batch (token counts 3 and 4, N=6, d=4) plus a freshly initialised
    model.  Draws whose normalised similarities sit within ``margin`` of a
    threshold are redrawn, since the keep/drop mask is piecewise constant.
    """
    rng = np.random.default_rng([seed, 777])
    while True:
        model = AGAModel.init(rng, MICRO["channels"], MICRO["vocab"], MICRO["d"], MICRO["hidden"])
        pairs = []
        for i, length in enumerate(MICRO["lengths"]):
            mask = np.arange(4) < length
            ids = rng.integers(1, MICRO["vocab"], 4)
            pairs.append(LabeledPair(ImageSample(rng.normal(size=(MICRO["n_patches"], MICRO["channels"]))),
                                     TextSample(ids, mask), i))
        if _clear_of_thresholds(model, pairs, sigma_tg, sigma_vg, margin):
            return model, pairs


def _clear_of_thresholds(model, pairs, s_tg, s_vg, margin):
    for p in pairs:
        patches, _ = encode_image(p.image, model.encoder)
        tokens, _ = encode_text(p.text, model.encoder)
        state, _ = compute_groups(tokens[:p.text.length], patches, s_tg, s_vg)
        for mat, s in ((state.S_hat.data, s_tg), (state.S_hat_v.data, s_vg)):
            interior = (mat > 0) & (mat < 1)
            if (np.abs(mat[interior] - s) < margin).any():
                return False
    return True


def micro_batch_gradient_error(seed, sigma_tg=0.2, sigma_vg=0.3, h=1e-5):
    model, pairs = micro_batch(seed, sigma_tg, sigma_vg)
    cfg = TrainConfig(d=MICRO["d"], hidden=MICRO["hidden"])
    return finite_difference_check(
        lambda: batch_loss(model, pairs, sigma_tg, sigma_vg, cfg)[0].total,
        model.parameters(), h)


@check("system")
def check_total_loss_gradient():
    err = micro_batch_gradient_error(0)
    return _within(err, 1e-4)


# -- evaluation -------------------------------------------------------------------

@check("evaluation")
def check_auc_oracle():
    rng = np.random.default_rng(14)
    worst = 0.0
    for _ in range(20):
        scores = np.round(rng.normal(size=15), 1)  # forces ties
        pos = rng.random(15) < 0.4
        pos[0], pos[1] = True, False
        worst = max(worst, abs(roc_auc(scores, pos) - oracles.roc_auc_pairs(scores, pos)))
    return worst <= 1e-12, f"max deviation {worst:.1e}"


@check("evaluation")
def check_retrieval_monotone_invariance():
    rng = np.random.default_rng(15)
    img, txt = rng.normal(size=(12, 4)), rng.normal(size=(12, 4))
    cats = rng.integers(0, 3, 12)
    a = retrieval_precision(img, txt, cats, (1, 5, 10))
    b = retrieval_precision(img * 3.0, txt * 0.5, cats, (1, 5, 10))
    same = a.precision == b.precision and np.array_equal(a.rankings, b.rankings)
    return same, "rankings and Prec@K unchanged under positive rescaling"


# -- runner ---------------------------------------------------------------------------

def run(filter=None):
    results = []
    for group, name, fn in CHECKS:
        if filter and filter not in (group, name):
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(group, name, bool(ok), detail, time.perf_counter() - t0))
    return results


def format_table(results):
    lines = [f"{'group':<11} {'check':<32} {'result':<6} {'secs':>6}  detail"]
    for r in results:
        lines.append(f"{r.group:<11} {r.name:<32} {'PASS' if r.ok else 'FAIL':<6} "
                     f"{r.seconds:6.2f}  {r.detail}")
    return "\n".join(lines)


def main(filter=None, out=print):
    results = run(filter)
    if not results:
        out(f"no checks match filter {filter!r}")
        return 2
    out(format_table(results))
    failed = [r for r in results if not r.ok]
    if failed:
        out("FAILED: " + ", ".join(f"{r.group}/{r.name}" for r in failed))
        return 1
    out(f"all {len(results)} checks passed")
    return 0
