"""
Downstream checks on frozen embeddings: image-to-text retrieval
Precision@K, zero-shot prompt classification, a linear probe at several
label fractions, grouping fidelity against the planted alignments, and
heatmap export.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax as _np_log_softmax
from scipy.stats import rankdata

from .encoders import encode_image, encode_text
from .grouping import compute_groups


# -- embeddings -------------------------------------------------------------------

def embed_pairs(model, pairs):
    """Global image and text embeddings ``([n, d], [n, d])`` as plain arrays."""
    imgs = np.stack([encode_image(p.image, model.encoder)[1].data for p in pairs])
    txts = np.stack([encode_text(p.text, model.encoder)[1].data for p in pairs])
    return imgs, txts


def embed_texts(model, texts):
    return np.stack([encode_text(t, model.encoder)[1].data for t in texts])


def _unit(x, eps=1e-8):
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)


def cosine_scores(queries, candidates):
    return _unit(queries) @ _unit(candidates).T


# -- retrieval ----------------------------------------------------------------------

@dataclass
class RetrievalResult:
    rankings: np.ndarray  # [Q, P] candidate indices, best first
    precision: dict  # K -> mean Prec@K
    per_query: dict  # K -> [Q] array
    categories: np.ndarray


def rank_candidates(scores):
    """Descending by score, ties broken by lower candidate index."""
    return np.argsort(-scores, axis=1, kind="stable")


def retrieval_precision(image_embeds, text_embeds, categories, Ks=(5, 10), query_categories=None):
    categories = np.asarray(categories)
    P = len(text_embeds)
    if P == 0:
        raise ValueError("retrieval pool is empty")
    for k in Ks:
        if not 1 <= k <= P:
            raise ValueError(f"K={k} is outside 1..{P} (pool size)")
    if query_categories is None:
        if len(image_embeds) != P:
            raise ValueError("query categories are required when queries and pool differ in size")
        query_categories = categories
    ranks = rank_candidates(cosine_scores(image_embeds, text_embeds))
    hits = categories[ranks] == np.asarray(query_categories)[:, None]
    per_query = {k: hits[:, :k].mean(axis=1) for k in Ks}
    return RetrievalResult(ranks, {k: float(v.mean()) for k, v in per_query.items()},
                           per_query, categories)


# -- classification metrics ----------------------------------------------------------

def roc_auc(scores, positive):
    """Mann-Whitney AUC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = positive.sum(), (~positive).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs at least one positive and one negative")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def macro_roc_auc(score_matrix, labels):
    """One-vs-rest AUC averaged over classes present in ``labels``."""
    labels = np.asarray(labels)
    aucs = []
    for c in range(score_matrix.shape[1]):
        pos = labels == c
        if pos.any() and (~pos).any():
            aucs.append(roc_auc(score_matrix[:, c], pos))
    return float(np.mean(aucs))


def macro_f1(pred, labels, n_classes):
    pred, labels = np.asarray(pred), np.asarray(labels)
    f1s = []
    for c in range(n_classes):
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


# -- zero-shot ----------------------------------------------------------------------

@dataclass
class ZeroShotResult:
    prompt_embeds: np.ndarray
    scores: np.ndarray  # [Q, classes]
    predictions: np.ndarray
    acc: float = None
    f1: float = None
    roc: float = None


def zero_shot_from_embeddings(image_embeds, prompt_embeds, labels=None):
    if len(prompt_embeds) < 2:
        raise ValueError("zero-shot classification needs at least two classes")
    scores = cosine_scores(image_embeds, prompt_embeds)
    pred = np.argmax(scores, axis=1)
    res = ZeroShotResult(np.asarray(prompt_embeds), scores, pred)
    if labels is not None:
        labels = np.asarray(labels)
        res.acc = float(np.mean(pred == labels))
        res.f1 = macro_f1(pred, labels, len(prompt_embeds))
        res.roc = macro_roc_auc(scores, labels)
    return res


def zero_shot_classify(image_embeds, class_prompts, model, labels=None):
    """Encode one prompt per class and predict the class of the most similar prompt."""
    if len(class_prompts) < 2:
        raise ValueError("zero-shot classification needs at least two classes")
    return zero_shot_from_embeddings(image_embeds, embed_texts(model, class_prompts), labels)


# -- linear probe --------------------------------------------------------------------

def stratified_subset(labels, fraction, rng):
    labels = np.asarray(labels)
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n = int(round(fraction * len(idx)))
        if n < 1:
            raise ValueError(f"fraction {fraction} leaves class {c} without training samples")
        keep.extend(rng.permutation(idx)[:n])
    return np.sort(np.array(keep))


def fit_softmax_regression(x, y, n_classes, steps=500, lr=0.5, l2=1e-3):
    """Multinomial logistic regression by full-batch gradient descent."""
    n, d = x.shape
    W = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for _ in range(steps):
        logp = _np_log_softmax(x @ W + b, axis=1)
        err = (np.exp(logp) - onehot) / n
        W -= lr * (x.T @ err + l2 * W)
        b -= lr * err.sum(axis=0)
    return W, b


def linear_probe(train_x, train_y, test_x, test_y, fractions=(0.1, 0.5, 1.0), seed=0,
                 n_classes=None, steps=500):
    """Macro one-vs-rest test AUC for a linear classifier per label fraction."""
    train_x, test_x = np.asarray(train_x), np.asarray(test_x)
    train_y, test_y = np.asarray(train_y), np.asarray(test_y)
    n_classes = n_classes or int(max(train_y.max(), test_y.max()) + 1)
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0) + 1e-8
    xtr, xte = (train_x - mu) / sd, (test_x - mu) / sd
    out = {}
    for frac in fractions:
        rng = np.random.default_rng([seed, int(round(frac * 1e6))])
        idx = stratified_subset(train_y, frac, rng)
        W, b = fit_softmax_regression(xtr[idx], train_y[idx], n_classes, steps=steps)
        out[frac] = macro_roc_auc(xte @ W + b, test_y)
    return out


# -- grouping fidelity ------------------------------------------------------------------

@dataclass
class GroupingFidelity:
    per_pair: np.ndarray
    mean: float
    histogram: tuple = field(default=None)


def token_alphas(model, pair, sigma_tg, sigma_vg=0.0):
    """Token-to-patch weights ``[M_i, N]`` for one pair under the given thresholds."""
    patches, _ = encode_image(pair.image, model.encoder)
    tokens, _ = encode_text(pair.text, model.encoder)
    state, _ = compute_groups(tokens[:pair.text.length], patches, sigma_tg, sigma_vg)
    return state.alpha.data


def fidelity_from_alphas(alphas, pairs):
    per_pair = []
    for alpha, pair in zip(alphas, pairs):
        if not pair.planted:
            continue
        masses = [alpha[pos, sorted(cells)].sum() for pos, cells in pair.planted]
        per_pair.append(float(np.mean(masses)))
    per_pair = np.array(per_pair)
    if per_pair.size == 0:
        raise ValueError("no pair carries planted alignments")
    hist = np.histogram(per_pair, bins=10, range=(0.0, 1.0))
    return GroupingFidelity(per_pair, float(per_pair.mean()), hist)


def grouping_fidelity(model, pairs, sigma_tg):
    """Mean alpha mass each concept token puts on its planted patches."""
    alphas = [token_alphas(model, p, sigma_tg) for p in pairs]
    return fidelity_from_alphas(alphas, pairs)


# -- heatmaps -------------------------------------------------------------------------

def heatmap_grid(alpha_row, rows, cols):
    alpha_row = np.asarray(alpha_row, dtype=np.float64)
    if alpha_row.shape != (rows * cols,):
        raise ValueError(f"alpha row has {alpha_row.size} entries, grid is {rows}x{cols}")
    return alpha_row.reshape(rows, cols)


def heatmap_pgm(alpha_row, rows, cols, token_text="", maxval=255):
    """Plain (P2) graymap on an absolute scale: weight 1 is white, 0 is black."""
    grid = heatmap_grid(alpha_row, rows, cols)
    levels = np.rint(np.clip(grid, 0.0, 1.0) * maxval).astype(int)
    lines = ["P2", f"# token: {token_text}", f"{cols} {rows}", str(maxval)]
    lines += [" ".join(str(v) for v in row) for row in levels]
    return "\n".join(lines) + "\n"


def heatmap_csv(alpha_row, rows, cols):
    grid = heatmap_grid(alpha_row, rows, cols)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in grid:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def read_heatmap_csv(text):
    rows = [[float(v) for v in r] for r in csv.reader(io.StringIO(text)) if r]
    return np.array(rows).reshape(-1)


def export_heatmap(alpha_row, rows, cols, token_text, out_prefix):
    """Write ``<out_prefix>.pgm`` and ``<out_prefix>.csv``; returns both paths."""
    pgm = heatmap_pgm(alpha_row, rows, cols, token_text)
    table = heatmap_csv(alpha_row, rows, cols)
    os.makedirs(os.path.dirname(os.path.abspath(out_prefix)), exist_ok=True)
    with open(out_prefix + ".pgm", "w") as fh:
        fh.write(pgm)
    with open(out_prefix + ".csv", "w") as fh:
        fh.write(table)
    return out_prefix + ".pgm", out_prefix + ".csv"


# -- full report ------------------------------------------------------------------------

def evaluate(state, world, train_pairs, test_pairs, fractions=(0.1, 0.5, 1.0), Ks=(1, 5, 10)):
    """Results dict matching the documented JSON schema."""
    model = state.model
    img, txt = embed_pairs(model, test_pairs)
    labels = np.array([p.label for p in test_pairs])
    ret = retrieval_precision(img, txt, labels, Ks)
    zs = zero_shot_classify(img, world.prompts(), model, labels)
    tr_img, _ = embed_pairs(model, train_pairs)
    tr_labels = np.array([p.label for p in train_pairs])
    probe = linear_probe(tr_img, tr_labels, img, labels, fractions, seed=state.config.seed,
                         n_classes=world.config.num_classes)
    fid = grouping_fidelity(model, test_pairs, state.gate_tg.sigma)
    out = {"variant": state.config.variant, "seed": state.config.seed, "step": state.step}
    for k in Ks:
        out[f"prec@{k}"] = ret.precision[k]
    out["zero_shot"] = {"acc": zs.acc, "f1": zs.f1, "roc": zs.roc}
    out["probe"] = {f"{f:g}": v for f, v in probe.items()}
    out["fidelity"] = fid.mean
    out["sigma_tg"] = state.gate_tg.sigma
    out["sigma_vg"] = state.gate_vg.sigma
    return out


RESULTS_SCHEMA = {
    "type": "object",
    "required": ["variant", "seed", "prec@5", "prec@10", "zero_shot", "probe", "fidelity"],
    "properties": {
        "variant": {"type": "string"},
        "seed": {"type": "integer"},
        "prec@5": {"type": "number", "minimum": 0, "maximum": 1},
        "prec@10": {"type": "number", "minimum": 0, "maximum": 1},
        "zero_shot": {
            "type": "object",
            "required": ["acc", "f1", "roc"],
            "properties": {k: {"type": "number", "minimum": 0, "maximum": 1}
                           for k in ("acc", "f1", "roc")},
        },
        "probe": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        "fidelity": {"type": "number", "minimum": 0, "maximum": 1},
    },
}
