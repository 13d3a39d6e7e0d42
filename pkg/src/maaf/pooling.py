"""Token pooling into normalized, scaled embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .tokens import IMAGE_GROUPS, TEXT, TokenSequence


@dataclass
class PoolingConfig:
    rp: bool = True   # resolution-wise: mean within each group, then mean of group means
    ita: bool = True  # catalog images go through the attention blocks with a null caption
    it: bool = True   # text-token outputs take part in pooling


def _included_groups(seq: TokenSequence, include_text: bool) -> list:
    groups = [s for s in seq.segments if s.group in IMAGE_GROUPS]
    if include_text:
        groups += [s for s in seq.segments if s.group == TEXT]
    return groups


def pool_tokens(seq: TokenSequence, rp: bool, include_text: bool) -> Tensor:
    """Unnormalized pooled vector, (N, d)."""
    segs = _included_groups(seq, include_text)
    valid = seq.valid()
    n, _, d = seq.values.shape
    counts = np.stack([valid[:, s.start:s.stop].sum(axis=1) for s in segs], axis=1) if segs else np.zeros((n, 0))
    if counts.size == 0 or np.any(counts.sum(axis=1) == 0):
        raise ValueError("pooling over zero tokens")
    dtype = seq.values.dtype

    def masked_sum(s):
        vals = seq.values[:, s.start:s.stop, :]
        if seq.mask is not None and not valid[:, s.start:s.stop].all():
            vals = F.mul(vals, valid[:, s.start:s.stop, None].astype(dtype))
        return F.sorted_sum(vals, axis=1)

    if not rp:
        total = masked_sum(segs[0])
        for s in segs[1:]:
            total = F.add(total, masked_sum(s))
        return F.div(total, counts.sum(axis=1, keepdims=True).astype(dtype))

    present = counts > 0
    weight = present / present.sum(axis=1, keepdims=True)  # average of the present group means
    pooled = None
    for j, s in enumerate(segs):
        coef = (weight[:, j] / np.maximum(counts[:, j], 1))[:, None].astype(dtype)
        term = F.mul(masked_sum(s), coef)
        pooled = term if pooled is None else F.add(pooled, term)
    return pooled


def normalize_and_scale(pooled: Tensor, scale: Tensor) -> Tensor:
    return F.mul(F.l2_normalize(pooled, axis=-1), scale)


def pool(seq: TokenSequence, cfg: PoolingConfig, scale: Tensor) -> Tensor:
    return normalize_and_scale(pool_tokens(seq, cfg.rp, cfg.it), scale)


def similarity(a, b) -> np.ndarray:
    """Cosine similarity between rows of ``a`` and rows of ``b``."""
    a = np.atleast_2d(a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64))
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine similarity of a zero vector")
    return (a / na) @ (b / nb).T
