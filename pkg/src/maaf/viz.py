"""Attention-map extraction, keyword aggregation and image emission."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .fusion import sinusoid_table
from .netpbm import write_pnm
from .synthetic_css import COLORS, POSITIONS, cell_of
from .text_encoder import TokenizedCaption, tokenize
from .tokens import IMAGE_GROUPS, TEXT, Segment, concat_sequences


@dataclass
class AttentionRecord:
    """Per-block, per-head f(QK^T) for one query, cropped to its valid tokens."""

    weights: list  # one (heads, L, L) array per block
    segments: tuple
    words: list
    caption: str = ""

    @property
    def n_image_tokens(self) -> int:
        return sum(s.length for s in self.segments if s.group in IMAGE_GROUPS)

    def segment(self, group: str) -> Segment:
        for s in self.segments:
            if s.group == group:
                return s
        raise KeyError(f"group {group!r} not in record")


def capture_records(model, images, captions: Sequence[TokenizedCaption]) -> list:
    """Run queries through the model and keep the one-stream attention weights."""
    if model.fusion_config.variant != "maaf_self":
        raise ValueError("attention records are defined for the one-stream model")
    buf: list = []
    with no_grad():
        seq = model.fuse_query(images, list(captions), record=buf)
    n_img = sum(s.length for s in seq.segments if s.group in IMAGE_GROUPS)
    records = []
    for i, cap in enumerate(captions):
        keep = n_img + len(cap.words)
        segs = tuple(s for s in seq.segments if s.group in IMAGE_GROUPS) + (Segment(TEXT, n_img, len(cap.words)),)
        weights = [np.array(w[i, :, :keep, :keep], dtype=np.float64) for w in buf]
        records.append(AttentionRecord(weights, segs, list(cap.words), cap.text))
    return records


def extract_word_map(rec: AttentionRecord, word_index: int, target_group: str, block: int = -1) -> np.ndarray:
    """Head-averaged attention row of a word token over one image-token group, as an (H, W) grid."""
    if not 0 <= word_index < len(rec.words):
        raise IndexError(f"word index {word_index} out of range for {len(rec.words)} words")
    if not -len(rec.weights) <= block < len(rec.weights):
        raise IndexError(f"block {block} out of range")
    seg = rec.segment(target_group)
    w = rec.weights[block].mean(axis=0)
    row = w[rec.n_image_tokens + word_index]
    return row[seg.start:seg.stop].reshape(seg.grid)


def recompute_block_weights(model, images, captions: Sequence[TokenizedCaption], block: int = 0) -> np.ndarray:
    """Recompute f(QK^T) of one block from stored parameters with plain numpy.

    Independent of the autodiff attention path: the block input is rebuilt
    by running the preceding blocks, then scores are formed head by head.
    """
    fusion = model.fusion
    with no_grad():
        img = model.image_tokens(images)
        txt = model.text_tokens(list(captions))
        phi = concat_sequences([img, txt])
        x = phi.values.data
        if fusion.config.positional_encoding:
            x = x + sinusoid_table(x.shape[1], x.shape[2]).astype(x.dtype)
        x = x.astype(np.float64)
        for b in range(block):
            step_in = phi.with_values(Tensor(x.astype(phi.values.dtype)))
            x = fusion.blocks[b](step_in).values.data.astype(np.float64)
    blk = fusion.blocks[block].attn
    cfg = fusion.config
    h, d = cfg.heads, cfg.d
    dk = d // h
    mask = phi.valid()
    wq, wk = blk.w_q.data.astype(np.float64), blk.w_k.data.astype(np.float64)
    n, l, _ = x.shape
    out = np.zeros((n, h, l, l))
    for i in range(n):
        for head in range(h):
            cols = slice(head * dk, (head + 1) * dk)
            q = x[i] @ wq[:, cols]
            k = x[i] @ wk[:, cols]
            s = q @ k.T
            if cfg.scale_scores:
                s = s / np.sqrt(dk)
            valid = mask[i]
            if cfg.f == "softmax":
                s = np.where(valid[None, :], s, -np.inf)
                e = np.exp(s - s.max(axis=1, keepdims=True))
                out[i, head] = e / e.sum(axis=1, keepdims=True)
            else:
                out[i, head] = np.where(valid[None, :], s, 0.0)
    return out


# ---------------------------------------------------------------------------
# aggregation

def aggregate_maps(maps: Sequence[np.ndarray], mode: str = "mean", images: Optional[Sequence[np.ndarray]] = None,
                   overall_mean: Optional[np.ndarray] = None) -> np.ndarray:
    """``mean``: elementwise mean of the grids.

    ``one_minus_mean_modulated``: mean over examples of the image multiplied
    by (1 - attention) upsampled to image size, minus ``overall_mean``.
    """
    if len(maps) == 0:
        raise ValueError("cannot aggregate an empty group")
    if mode == "mean":
        return np.mean(np.stack(maps), axis=0)
    if mode != "one_minus_mean_modulated":
        raise ValueError(f"unknown aggregation mode {mode!r}")
    if images is None or len(images) != len(maps):
        raise ValueError("modulated aggregation needs one image per map")
    acc = None
    for grid, img in zip(maps, images):
        up = bilinear_upsample(1.0 - np.asarray(grid, dtype=np.float64), img.shape[0], img.shape[1])
        term = img * up[:, :, None]
        acc = term if acc is None else acc + term
    out = acc / len(maps)
    if overall_mean is not None:
        out = out - overall_mean
    return out


def bilinear_upsample(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centre bilinear resampling with edge clamping."""
    grid = np.asarray(grid, dtype=np.float64)
    gh, gw = grid.shape

    def axis_weights(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis_weights(height, gh)
    x0, x1, fx = axis_weights(width, gw)
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bot = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def to_uint8(arr: np.ndarray) -> np.ndarray:
    """Min-max normalize to 0..255; a constant array maps to 128."""
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot write non-finite values")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.full(arr.shape, 128, dtype=np.uint8)
    return np.rint((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_image(arr: np.ndarray, path, size: Optional[int] = None) -> Path:
    """Grayscale grids as PGM (P5), colour images as PPM (P6)."""
    arr = np.asarray(arr, dtype=np.float64)
    if size is not None and arr.ndim == 2:
        arr = bilinear_upsample(arr, size, size)
    path = Path(path)
    write_pnm(path, to_uint8(arr))
    return path


# ---------------------------------------------------------------------------
# keyword studies on the synthetic benchmark

POSITION_TOKENS = {tokenize(p).words[0]: p for p in POSITIONS}


@dataclass
class KeywordMaps:
    maps: dict = field(default_factory=dict)      # keyword -> aggregated grid
    counts: dict = field(default_factory=dict)    # keyword -> number of examples


def collect_records(model, dataset, vocab, limit: Optional[int] = None, chunk: int = 128) -> list:
    records = dataset.records[:limit] if limit else dataset.records
    out = []
    for i in range(0, len(records), chunk):
        part = records[i:i + chunk]
        imgs = dataset.images([r.query for r in part])
        caps = [tokenize(r.caption, vocab) for r in part]
        out.extend(zip(part, capture_records(model, imgs, caps)))
    return out


def position_word_maps(pairs, group: str = "coarse", block: int = -1) -> KeywordMaps:
    """Mean attention grid of each position word over the examples that mention it."""
    buckets: dict = {}
    for _, rec in pairs:
        for j, w in enumerate(rec.words):
            if w in POSITION_TOKENS:
                buckets.setdefault(POSITION_TOKENS[w], []).append(extract_word_map(rec, j, group, block))
    km = KeywordMaps()
    for word in POSITIONS:
        if word in buckets:
            km.maps[word] = aggregate_maps(buckets[word])
            km.counts[word] = len(buckets[word])
    return km


def word_maps(pairs, word: str, group: str = "coarse", block: int = -1, exclude_verb: Optional[str] = None):
    """(grids, records) for every occurrence of ``word``."""
    token = tokenize(word).words[0]
    grids, recs = [], []
    for trip, rec in pairs:
        if exclude_verb and trip.category == exclude_verb:
            continue
        for j, w in enumerate(rec.words):
            if w == token:
                grids.append(extract_word_map(rec, j, group, block))
                recs.append(trip)
    return grids, recs


def color_word_images(pairs, dataset, group: str = "coarse", block: int = -1) -> KeywordMaps:
    """(1 - attention)-modulated mean query image per colour word, minus the overall mean image.

    Examples where the coloured object is being added are excluded.
    """
    all_imgs = dataset.images(sorted({t.query for t, _ in pairs}))
    overall = all_imgs.mean(axis=0)
    km = KeywordMaps()
    for color in COLORS:
        grids, trips = word_maps(pairs, color, group, block, exclude_verb="add")
        if grids:
            imgs = [dataset.image(t.query) for t in trips]
            km.maps[color] = aggregate_maps(grids, "one_minus_mean_modulated", imgs, overall)
            km.counts[color] = len(grids)
    return km


def referenced_region(position: str, grid_shape: tuple) -> np.ndarray:
    """Boolean mask of grid cells whose centres fall inside the named scene cell."""
    r, c = cell_of(position)
    h, w = grid_shape
    rows = ((np.arange(h) + 0.5) * 3 / h).astype(int) == r
    cols = ((np.arange(w) + 0.5) * 3 / w).astype(int) == c
    return rows[:, None] & cols[None, :]


def position_sign_test(km: KeywordMaps) -> dict:
    """Per position word: is the referenced cell's mean weight below the grid mean?"""
    out = {}
    for word, grid in km.maps.items():
        region = referenced_region(word, grid.shape)
        ref, overall = float(grid[region].mean()), float(grid.mean())
        out[word] = {"referenced": ref, "grid_mean": overall, "below_mean": ref < overall,
                     "examples": km.counts.get(word, 0)}
    return out
