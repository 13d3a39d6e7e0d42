"""Slow scalar reference implementations used by selftest and the test suite.

Each one is written with explicit Python loops over plain floats so it shares
no code path with the vectorized library.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


def layer_norm_ref(row: Sequence[float], eps: float = 1e-5) -> list:
    n = len(row)
    mu = math.fsum(row) / n
    var = math.fsum((v - mu) ** 2 for v in row) / n
    return [(v - mu) / math.sqrt(var + eps) for v in row]


def _matvec_cols(vec, w, cols):
    return [math.fsum(vec[r] * w[r][c] for r in range(len(vec))) for c in cols]


def attention_ref(q_src, kv_src, wq, wk, wv, wo, heads: int, f: str = "softmax",
                  scale: bool = True, kv_mask=None) -> np.ndarray:
    """Per example, per head, per query row: f(q.k) weights then the weighted value sum."""
    q_src, kv_src = np.asarray(q_src, float), np.asarray(kv_src, float)
    wq, wk, wv, wo = (np.asarray(w, float).tolist() for w in (wq, wk, wv, wo))
    n, lq, d = q_src.shape
    lk = kv_src.shape[1]
    dk = d // heads
    out = np.zeros((n, lq, d))
    for b in range(n):
        keys = range(lk) if kv_mask is None else [j for j in range(lk) if kv_mask[b][j]]
        for i in range(lq):
            concat = []
            for h in range(heads):
                cols = range(h * dk, (h + 1) * dk)
                q = _matvec_cols(q_src[b, i].tolist(), wq, cols)
                scores = {}
                for j in keys:
                    k = _matvec_cols(kv_src[b, j].tolist(), wk, cols)
                    s = math.fsum(a * c for a, c in zip(q, k))
                    scores[j] = s / math.sqrt(dk) if scale else s
                if f == "softmax":
                    m = max(scores.values())
                    ex = {j: math.exp(s - m) for j, s in scores.items()}
                    z = math.fsum(ex.values())
                    weights = {j: e / z for j, e in ex.items()}
                else:
                    weights = scores
                head_out = [0.0] * dk
                for j, w in weights.items():
                    v = _matvec_cols(kv_src[b, j].tolist(), wv, cols)
                    head_out = [a + w * c for a, c in zip(head_out, v)]
                concat.extend(head_out)
            out[b, i] = _matvec_cols(concat, wo, range(d))
    return out


def pool_ref(groups: Sequence[Sequence[Sequence[float]]], rp: bool) -> list:
    """Unit-norm pooled vector from a list of token groups (each a list of vectors)."""
    d = len(groups[0][0])
    if rp:
        means = [[math.fsum(t[c] for t in g) / len(g) for c in range(d)] for g in groups]
        pooled = [math.fsum(m[c] for m in means) / len(means) for c in range(d)]
    else:
        tokens = [t for g in groups for t in g]
        pooled = [math.fsum(t[c] for t in tokens) / len(tokens) for c in range(d)]
    norm = math.sqrt(math.fsum(v * v for v in pooled))
    return [v / norm for v in pooled]


def batch_loss_ref(q, t) -> float:
    q, t = np.asarray(q, float).tolist(), np.asarray(t, float).tolist()
    n = len(q)
    total = []
    for i in range(n):
        logits = [math.fsum(a * b for a, b in zip(q[i], t[j])) for j in range(n)]
        m = max(logits)
        lse = m + math.log(math.fsum(math.exp(v - m) for v in logits))
        total.append(lse - logits[i])
    return math.fsum(total) / n


def ranks_ref(query_embs, target_ids, catalog_embs) -> list:
    """Rank of each target by full sort on (-cosine, id)."""
    out = []
    for q, tid in zip(np.asarray(query_embs, float).tolist(), target_ids):
        qn = math.sqrt(math.fsum(v * v for v in q))
        sims = []
        for cid, c in enumerate(np.asarray(catalog_embs, float).tolist()):
            cn = math.sqrt(math.fsum(v * v for v in c))
            sims.append((-(math.fsum(a * b for a, b in zip(q, c)) / (qn * cn)), cid))
        order = [cid for _, cid in sorted(sims)]
        out.append(order.index(int(tid)))
    return out


def _sig(v: float) -> float:
    return 1.0 / (1.0 + math.exp(-v))


def lstm_ref(xs, w_input, w_hidden, bias) -> list:
    """Gate order (i, f, g, o); zero initial state; returns the hidden state per step."""
    w_input, w_hidden, bias = (np.asarray(a, float).tolist() for a in (w_input, w_hidden, bias))
    d = len(bias) // 4
    h, c = [0.0] * d, [0.0] * d
    outs = []
    for x in np.asarray(xs, float).tolist():
        z = [bias[k] + math.fsum(x[r] * w_input[r][k] for r in range(len(x)))
             + math.fsum(h[r] * w_hidden[r][k] for r in range(d)) for k in range(4 * d)]
        i = [_sig(v) for v in z[:d]]
        f = [_sig(v) for v in z[d:2 * d]]
        g = [math.tanh(v) for v in z[2 * d:3 * d]]
        o = [_sig(v) for v in z[3 * d:]]
        c = [f[k] * c[k] + i[k] * g[k] for k in range(d)]
        h = [o[k] * math.tanh(c[k]) for k in range(d)]
        outs.append(list(h))
    return outs


def bilinear_ref(grid, height: int, width: int) -> list:
    """Half-pixel-centre bilinear sampling with clamped source coordinates."""
    grid = np.asarray(grid, float).tolist()
    gh, gw = len(grid), len(grid[0])
    out = []
    for y in range(height):
        sy = min(max((y + 0.5) * gh / height - 0.5, 0.0), gh - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, gh - 1)
        fy = sy - y0
        row = []
        for x in range(width):
            sx = min(max((x + 0.5) * gw / width - 0.5, 0.0), gw - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, gw - 1)
            fx = sx - x0
            top = grid[y0][x0] * (1 - fx) + grid[y0][x1] * fx
            bot = grid[y1][x0] * (1 - fx) + grid[y1][x1] * fx
            row.append(top * (1 - fy) + bot * fy)
        out.append(row)
    return out


def _exp_scores(a, b, wq, wk):
    """exp(a W_Q W_K^T b^T) entrywise (single head, no scaling)."""
    return np.exp((a @ wq) @ (b @ wk).T)


def one_stream_terms(x, y, wq, wk, wv):
    """Image-token output of single-head softmax self-attention on [x; y] split into
    residual, f(xx)x and f(xy)y parts, both sharing the joint normalizer A."""
    exx = _exp_scores(x, x, wq, wk)
    exy = _exp_scores(x, y, wq, wk)
    a = exx.sum(axis=1, keepdims=True) + exy.sum(axis=1, keepdims=True)
    return x, exx @ (x @ wv) / a, exy @ (y @ wv) / a


def two_stream_terms(x, y, p0, p1):
    """Image self-attention then cross-attention to text, each with its own normalizer (B, C).

    ``p0``/``p1`` are (W_Q, W_K, W_V) for the two sub-operations.
    """
    exx = _exp_scores(x, x, p0[0], p0[1])
    self_term = exx @ (x @ p0[2]) / exx.sum(axis=1, keepdims=True)
    x1 = x + self_term
    exy = _exp_scores(x1, y, p1[0], p1[1])
    cross_term = exy @ (y @ p1[2]) / exy.sum(axis=1, keepdims=True)
    return x, self_term, cross_term


def recall_binomial_bound(n_queries: int, catalog_size: int, sigmas: float = 5.0) -> tuple:
    p = 1.0 / catalog_size
    sd = math.sqrt(p * (1 - p) / n_queries)
    return max(0.0, p - sigmas * sd), p + sigmas * sd

