"""
Pure-Python reference implementations used as independent oracles.

Everything here works on nested lists of floats with explicit loops and the
``math`` module only, so it shares no code path with the tensor engine.
"""

from __future__ import annotations

import math


def _rows(m):
    return [[float(v) for v in row] for row in m]


def dot(a, b):
    s = 0.0
    for x, y in zip(a, b):
        s += x * y
    return s


def matmul(a, b):
    a, b = _rows(a), _rows(b)
    n, k, m = len(a), len(b), len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return out


def transpose(a):
    a = _rows(a)
    return [[a[i][j] for i in range(len(a))] for j in range(len(a[0]))]


def similarity(tokens, patches):
    tokens, patches = _rows(tokens), _rows(patches)
    return [[dot(t, v) for v in patches] for t in tokens]


def minmax(S):
    out = []
    for row in _rows(S):
        lo, hi = min(row), max(row)
        if hi - lo <= 0:
            out.append([1.0] * len(row))
        else:
            out.append([(x - lo) / (hi - lo) for x in row])
    return out


def sparsify(S_hat, sigma):
    return [[x if x >= sigma else 0.0 for x in row] for row in _rows(S_hat)]


def alignment(S_tilde):
    out = []
    for row in _rows(S_tilde):
        total = 0.0
        for x in row:
            total += x
        out.append([x / total for x in row])
    return out


def group(alpha, source):
    alpha, source = _rows(alpha), _rows(source)
    d = len(source[0])
    out = []
    for row in alpha:
        acc = [0.0] * d
        for k, w in enumerate(row):
            for c in range(d):
                acc[c] += w * source[k][c]
        out.append(acc)
    return out


def grouping_pipeline(tokens, patches, sigma_tg, sigma_vg):
    """Both grouping directions: returns dict of every intermediate."""
    S = similarity(tokens, patches)
    S_hat = minmax(S)
    alpha = alignment(sparsify(S_hat, sigma_tg))
    tgv = group(alpha, patches)
    S_hat_v = minmax(transpose(S))
    alpha_v = alignment(sparsify(S_hat_v, sigma_vg))
    pgl = group(alpha_v, tokens)
    return {"S": S, "S_hat": S_hat, "alpha": alpha, "tgv": tgv,
            "S_hat_v": S_hat_v, "alpha_v": alpha_v, "pgl": pgl}


def softmax(row):
    m = max(row)
    e = [math.exp(x - m) for x in row]
    s = sum(e)
    return [x / s for x in e]


def norm(v):
    return math.sqrt(dot(v, v))


def cosine(a, b, eps=1e-8):
    return dot(a, b) / (max(norm(a), eps) * max(norm(b), eps))


def symmetric_infonce(anchors, candidates, tau):
    """-(1/2L) sum_j [log p(c_j | a_j) + log p(a_j | c_j)] with cosine logits."""
    anchors, candidates = _rows(anchors), _rows(candidates)
    L = len(anchors)
    total = 0.0
    for j in range(L):
        fwd = [cosine(anchors[j], candidates[k]) / tau for k in range(L)]
        rev = [cosine(candidates[j], anchors[k]) / tau for k in range(L)]
        total += fwd[j] - math.log(sum(math.exp(x) for x in fwd))
        total += rev[j] - math.log(sum(math.exp(x) for x in rev))
    return -total / (2 * L)


def attention(queries, keys_values, Wq, Wk, Wv):
    queries, kv = _rows(queries), _rows(keys_values)
    Wq, Wk, Wv = _rows(Wq), _rows(Wk), _rows(Wv)
    d = len(Wq)

    def apply(W, x):
        return [dot(W[r], x) for r in range(d)]

    keys = [apply(Wk, k) for k in kv]
    vals = [apply(Wv, k) for k in kv]
    out = []
    for q in queries:
        qq = apply(Wq, q)
        beta = softmax([dot(qq, k) / math.sqrt(d) for k in keys])
        row = [0.0] * d
        for b, v in zip(beta, vals):
            for c in range(d):
                row[c] += b * v[c]
        out.append(row)
    return out


def roc_auc_pairs(scores, positive):
    """AUC by counting every positive/negative pair, ties count one half."""
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))
