"""Attention fusion of image and text tokens.

The one-stream block runs self-attention over the concatenation of image and
text tokens with a single shared set of projections. The two-stream blocks
keep the modalities apart and link them with cross-attention; each
sub-operation owns its projections and its softmax normalizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .nn import LayerNorm, Linear, Module, glorot
from .tokens import IMAGE_GROUPS, TEXT, Segment, TokenSequence, concat_sequences

ATTENTION_TRANSFORMS = ("softmax", "identity")
NORM_PLACEMENTS = ("post", "pre", "none")

# Each composition is a list of stages applied in order; the operations inside
# one stage run in parallel on the stage input. (q, kv) names the query
# stream and the key/value stream: "x" image, "t" text.
COMPOSITIONS = {
    "cross_xt": [[("x", "t")]],
    "self_then_cross": [[("x", "x")], [("x", "t")]],
    "parallel_cross": [[("x", "t"), ("t", "x")]],
    "table4_row4": [[("x", "x"), ("t", "t")], [("x", "t")], [("t", "x")]],
    "table4_row5": [[("x", "x"), ("t", "t")], [("t", "x")], [("x", "t")]],
    "table4_row6": [[("x", "x"), ("t", "t")], [("x", "t"), ("t", "x")]],
}
VARIANTS = ("maaf_self",) + tuple(COMPOSITIONS)

_MASK_FILL = -1e9


@dataclass
class FusionConfig:
    variant: str = "maaf_self"
    f: str = "softmax"
    num_blocks: int = 2
    heads: int = 8
    d: int = 64
    ffn_width: int = 256
    positional_encoding: bool = False
    dropout: float = 0.1
    scale_scores: bool = True
    norm: str = "post"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown fusion variant {self.variant!r}; expected one of {VARIANTS}")
        if self.f not in ATTENTION_TRANSFORMS:
            raise ValueError(f"unknown attention transform {self.f!r}")
        if self.norm not in NORM_PLACEMENTS:
            raise ValueError(f"unknown norm placement {self.norm!r}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.num_blocks < 1:
            raise ValueError("need at least one attention block")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


class AttentionParams(Module):
    """W_Q, W_K, W_V (d x d; head h owns columns h*d/H:(h+1)*d/H) and output projection."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        dk = d // heads
        self.w_q = glorot(rng, (d, d), d, dk)
        self.w_k = glorot(rng, (d, d), d, dk)
        self.w_v = glorot(rng, (d, d), d, dk)
        self.w_o = glorot(rng, (d, d), d, d)
        self._heads = heads

    @property
    def heads(self) -> int:
        return self._heads


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, l, d = x.shape
    return F.transpose(F.reshape(x, (n, l, heads, d // heads)), (0, 2, 1, 3))


def multi_head_attention(
    q_src: Tensor,
    kv_src: Tensor,
    params: AttentionParams,
    f: str = "softmax",
    kv_mask: Optional[np.ndarray] = None,
    scale_scores: bool = True,
    record: Optional[list] = None,
) -> Tensor:
    """f(Q K^T) V per head, heads concatenated and projected; (N, Lq, d) out.

    The per-head weight tensor f(QK^T), shaped (N, heads, Lq, Lk), is
    appended to ``record`` when given.
    """
    if f not in ATTENTION_TRANSFORMS:
        raise ValueError(f"unknown attention transform {f!r}")
    n, lq, d = q_src.shape
    lk = kv_src.shape[1]
    if lk == 0 or (kv_mask is not None and not kv_mask.any(axis=1).all()):
        raise ValueError("attention over empty key set")
    if kv_src.shape[2] != d or kv_src.shape[0] != n:
        raise F.ShapeError("attention", q_src.shape, kv_src.shape)
    h = params.heads
    q = _split_heads(F.matmul(q_src, params.w_q), h)
    k = F.transpose(F.reshape(F.matmul(kv_src, params.w_k), (n, lk, h, d // h)), (0, 2, 3, 1))
    v = _split_heads(F.matmul(kv_src, params.w_v), h)
    scores = F.matmul(q, k)
    if scale_scores:
        scores = F.scale(scores, 1.0 / np.sqrt(d // h))
    if kv_mask is not None and not kv_mask.all():
        keep = kv_mask[:, None, None, :].astype(scores.dtype)
        if f == "softmax":
            scores = F.add(scores, (1.0 - keep) * _MASK_FILL)
        else:
            scores = F.mul(scores, keep)
    weights = F.softmax(scores, axis=-1) if f == "softmax" else F.identity(scores)
    if record is not None:
        record.append(weights.data)
    out = F.matmul(weights, v)
    out = F.reshape(F.transpose(out, (0, 2, 1, 3)), (n, lq, d))
    return F.matmul(out, params.w_o)


def attention(f: str, q_seq: TokenSequence, kv_seq: TokenSequence, params: AttentionParams,
              scale_scores: bool = True, record: Optional[list] = None) -> TokenSequence:
    out = multi_head_attention(q_seq.values, kv_seq.values, params, f=f,
                               kv_mask=kv_seq.mask, scale_scores=scale_scores, record=record)
    return q_seq.with_values(out)


def positional_encoding(seq: TokenSequence, enabled: bool = True) -> TokenSequence:
    """Add sinusoids by flat sequence position (sin on even channels, cos on odd)."""
    if not enabled:
        return seq
    return seq.with_values(F.add(seq.values, sinusoid_table(seq.length, seq.dim).astype(seq.values.dtype)))


def sinusoid_table(length: int, d: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    rate = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[: d // 2])
    return table


class FeedForward(Module):
    def __init__(self, d: int, width: int, rng: np.random.Generator):
        self.hidden = Linear(d, width, rng)
        self.out = Linear(width, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(F.relu(self.hidden(x)))


def _residual(x: Tensor, sublayer, norm: LayerNorm, placement: str, dropout: float, rng) -> Tensor:
    if placement == "pre":
        return F.add(x, F.dropout(sublayer(norm(x)), dropout, rng))
    y = F.add(x, F.dropout(sublayer(x), dropout, rng))
    return norm(y) if placement == "post" else y


class MAAFBlock(Module):
    """Self-attention over the whole sequence, then a position-wise feed-forward layer."""

    def __init__(self, d: int, heads: int = 8, ffn_width: int = 256, f: str = "softmax",
                 dropout: float = 0.1, scale_scores: bool = True, norm: str = "post",
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.attn = AttentionParams(d, heads, rng)
        self.norm1 = LayerNorm(d)
        self.ffn = FeedForward(d, ffn_width, rng)
        self.norm2 = LayerNorm(d)
        self._f, self._dropout, self._scale, self._norm = f, dropout, scale_scores, norm

    def __call__(self, seq: TokenSequence, rng=None, record: Optional[list] = None) -> TokenSequence:
        mask = seq.mask

        def attend(x):
            return multi_head_attention(x, x, self.attn, f=self._f, kv_mask=mask,
                                        scale_scores=self._scale, record=record)

        x = _residual(seq.values, attend, self.norm1, self._norm, self._dropout, rng)
        x = _residual(x, self.ffn, self.norm2, self._norm, self._dropout, rng)
        return seq.with_values(x)


def maaf_block(phi: TokenSequence, block: MAAFBlock, rng=None, record=None) -> TokenSequence:
    return block(phi, rng=rng, record=record)


class SubLayer(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.attn = AttentionParams(d, heads, rng)
        self.norm = LayerNorm(d)


class TwoStreamBlock(Module):
    """Cross-attention composition over separate image and text streams."""

    def __init__(self, d: int, composition: str, heads: int = 8, ffn_width: int = 256,
                 f: str = "softmax", dropout: float = 0.1, scale_scores: bool = True,
                 norm: str = "post", rng: Optional[np.random.Generator] = None):
        if composition not in COMPOSITIONS:
            raise ValueError(f"unknown two-stream composition {composition!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self._stages = COMPOSITIONS[composition]
        self.sublayers = [SubLayer(d, heads, rng) for stage in self._stages for _ in stage]
        self.ffn = FeedForward(d, ffn_width, rng)
        self.norm_ffn = LayerNorm(d)
        self._f, self._dropout, self._scale, self._norm = f, dropout, scale_scores, norm
        self.composition = composition

    def __call__(self, x: TokenSequence, y: Optional[TokenSequence], rng=None,
                 record: Optional[list] = None, skip_missing_text: bool = False):
        """Returns the updated (image, text) streams.

        With no text stream, operations touching it raise unless
        ``skip_missing_text`` is set (the null-caption catalog path).
        """
        streams = {"x": x, "t": y}
        k = 0
        for stage in self._stages:
            updates = {}
            for q_name, kv_name in stage:
                sub = self.sublayers[k]
                k += 1
                q_seq, kv_seq = streams[q_name], streams[kv_name]
                if q_seq is None or kv_seq is None or kv_seq.length == 0 or q_seq.length == 0:
                    if skip_missing_text:
                        continue
                    raise ValueError("attention over empty key set")
                kv_mask = kv_seq.mask

                def attend(v, sub=sub, kv_seq=kv_seq, kv_mask=kv_mask, self_op=(q_name == kv_name)):
                    kv = v if self_op else kv_seq.values
                    return multi_head_attention(v, kv, sub.attn, f=self._f, kv_mask=kv_mask,
                                                scale_scores=self._scale, record=record)

                updates[q_name] = q_seq.with_values(
                    _residual(q_seq.values, attend, sub.norm, self._norm, self._dropout, rng))
            streams.update(updates)
        x, y = streams["x"], streams["t"]
        joint = concat_sequences([x, y])
        out = _residual(joint.values, self.ffn, self.norm_ffn, self._norm, self._dropout, rng)
        nx = x.length
        x_out = x.with_values(out[:, :nx, :])
        y_out = y.with_values(out[:, nx:, :]) if y is not None and y.length else y
        return x_out, y_out


def two_stream_block(x, y, composition_block: TwoStreamBlock, rng=None, record=None):
    return composition_block(x, y, rng=rng, record=record)


class Fusion(Module):
    """Stack of attention blocks for a given FusionConfig."""

    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        cfg.validate()
        self._cfg = cfg
        kw = dict(heads=cfg.heads, ffn_width=cfg.ffn_width, f=cfg.f, dropout=cfg.dropout,
                  scale_scores=cfg.scale_scores, norm=cfg.norm)
        if cfg.variant == "maaf_self":
            self.blocks = [MAAFBlock(cfg.d, rng=rng, **kw) for _ in range(cfg.num_blocks)]
        else:
            self.blocks = [TwoStreamBlock(cfg.d, cfg.variant, rng=rng, **kw) for _ in range(cfg.num_blocks)]

    @property
    def config(self) -> FusionConfig:
        return self._cfg

    def __call__(self, image: TokenSequence, text: Optional[TokenSequence] = None, rng=None,
                 record: Optional[list] = None) -> TokenSequence:
        """Fuse image tokens with (optional) text tokens.

        The output keeps the input layout: image segments first, then text.
        ``record`` collects one weight tensor per attention operation.
        """
        phi = concat_sequences([image, text])
        phi = positional_encoding(phi, self._cfg.positional_encoding)
        if self._cfg.variant == "maaf_self":
            for block in self.blocks:
                phi = block(phi, rng=rng, record=record)
            return phi
        nx = image.length
        x = TokenSequence(phi.values[:, :nx, :], image.segments, image.mask)
        y = None
        if text is not None and text.length:
            y = TokenSequence(phi.values[:, nx:, :], text.segments, text.mask)
        for block in self.blocks:
            x, y = block(x, y, rng=rng, record=record, skip_missing_text=y is None)
        return concat_sequences([x, y])
