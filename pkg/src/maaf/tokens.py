"""Token sequences: image grid cells and caption words as d-dimensional vectors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F

COARSE, FINE, TEXT = "coarse", "fine", "text"
IMAGE_GROUPS = (COARSE, FINE)


@dataclass(frozen=True)
class Segment:
    group: str
    start: int
    length: int
    grid: Optional[tuple] = None  # (H, W) for image groups

    @property
    def stop(self) -> int:
        return self.start + self.length

    def position(self, flat_index: int) -> tuple:
        """(row, col) of a token given its index inside this segment."""
        if self.grid is None:
            raise ValueError(f"group {self.group!r} has no spatial layout")
        return divmod(flat_index, self.grid[1])


@dataclass
class TokenSequence:
    """A batch of token sequences sharing one group layout.

    ``values`` has shape (N, L, d). ``mask`` is an (N, L) boolean array of
    valid positions, or None when every position is valid (text captions of
    unequal length are right-padded).
    """

    values: Tensor
    segments: tuple
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        total = sum(s.length for s in self.segments)
        if total != self.values.shape[1]:
            raise ValueError(f"segments cover {total} tokens, values have {self.values.shape[1]}")

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def valid(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.values.shape[:2], dtype=bool)
        return self.mask

    def groups(self) -> list:
        """Group tag of every position, in order."""
        tags = []
        for s in self.segments:
            tags.extend([s.group] * s.length)
        return tags

    def segment(self, group: str) -> Optional[Segment]:
        for s in self.segments:
            if s.group == group:
                return s
        return None

    def select(self, group: str) -> Optional["TokenSequence"]:
        seg = self.segment(group)
        if seg is None:
            return None
        vals = self.values[:, seg.start:seg.stop, :]
        mask = None if self.mask is None else self.mask[:, seg.start:seg.stop]
        return TokenSequence(vals, (Segment(seg.group, 0, seg.length, seg.grid),), mask)

    def with_values(self, values: Tensor) -> "TokenSequence":
        return TokenSequence(values, self.segments, self.mask)


def concat_sequences(seqs: Sequence[TokenSequence]) -> TokenSequence:
    seqs = [s for s in seqs if s is not None and s.length > 0]
    if not seqs:
        raise ValueError("nothing to concatenate")
    if len(seqs) == 1:
        return seqs[0]
    segments, start = [], 0
    for s in seqs:
        for seg in s.segments:
            segments.append(Segment(seg.group, start + seg.start, seg.length, seg.grid))
        start += s.length
    if all(s.mask is None for s in seqs):
        mask = None
    else:
        mask = np.concatenate([s.valid() for s in seqs], axis=1)
    return TokenSequence(F.concat([s.values for s in seqs], axis=1), tuple(segments), mask)


@dataclass
class FeatureMapPair:
    """Projected feature maps, (N, H, W, d) each; fine is twice the coarse resolution."""

    coarse: Tensor
    fine: Tensor

    def __post_init__(self):
        c, f = self.coarse.shape, self.fine.shape
        if f[1] != 2 * c[1] or f[2] != 2 * c[2] or f[3] != c[3]:
            raise ValueError(f"fine map {f} is not twice coarse map {c}")

    @property
    def token_count(self) -> int:
        return self.coarse.shape[1] * self.coarse.shape[2] + self.fine.shape[1] * self.fine.shape[2]


def flatten_tokens(fm: FeatureMapPair, groups: Sequence[str] = IMAGE_GROUPS) -> TokenSequence:
    """Row-major flatten, coarse tokens first then fine."""
    parts, segments, start = [], [], 0
    for g in IMAGE_GROUPS:
        if g not in groups:
            continue
        m = fm.coarse if g == COARSE else fm.fine
        n, h, w, d = m.shape
        parts.append(m.reshape(n, h * w, d))
        segments.append(Segment(g, start, h * w, (h, w)))
        start += h * w
    values = parts[0] if len(parts) == 1 else F.concat(parts, axis=1)
    return TokenSequence(values, tuple(segments))


def unflatten_tokens(seq: TokenSequence) -> FeatureMapPair:
    maps = {}
    for seg in seq.segments:
        if seg.group in IMAGE_GROUPS:
            h, w = seg.grid
            maps[seg.group] = seq.values[:, seg.start:seg.stop, :].reshape(seq.batch, h, w, seq.dim)
    return FeatureMapPair(maps[COARSE], maps[FINE])


def text_sequence(values: Tensor, lengths: Sequence[int]) -> TokenSequence:
    """Wrap padded per-word vectors (N, T, d) as a text-group sequence."""
    n, t = values.shape[:2]
    lengths = np.asarray(lengths)
    mask = np.arange(t)[None, :] < lengths[:, None]
    return TokenSequence(values, (Segment(TEXT, 0, t),), None if mask.all() else mask)
