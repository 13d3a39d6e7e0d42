"""The assembled retrieval model: encoders, fusion, pooling, learned scale."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .fusion import Fusion, FusionConfig
from .image_encoder import DEFAULT_CHANNELS, ImageEncoder
from .nn import Module
from .pooling import PoolingConfig, normalize_and_scale, pool, pool_tokens
from .text_encoder import TextEncoder, TokenizedCaption, pad_captions
from .tokens import COARSE, FINE, IMAGE_GROUPS, TokenSequence, flatten_tokens


@dataclass
class ModelConfig:
    resolutions: list = field(default_factory=lambda: [COARSE, FINE])
    text_variant: str = "lstm"
    channels: list = field(default_factory=lambda: list(DEFAULT_CHANNELS))
    init_scale: float = 4.0
    learn_scale: bool = True
    image_only: bool = False  # baseline: queries ignore their caption

    def validate(self) -> None:
        if not self.resolutions or any(r not in IMAGE_GROUPS for r in self.resolutions):
            raise ValueError(f"resolutions must be a non-empty subset of {IMAGE_GROUPS}")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be positive")


class MAAFModel(Module):
    def __init__(self, fusion_cfg: FusionConfig, pooling_cfg: PoolingConfig, model_cfg: ModelConfig,
                 vocab_size: int, seed: int = 0):
        model_cfg.validate()
        fusion_cfg.validate()
        rng = np.random.default_rng(seed)
        self.image = ImageEncoder(fusion_cfg.d, rng, model_cfg.channels)
        self.text = TextEncoder(vocab_size, fusion_cfg.d, model_cfg.text_variant, rng, block_kwargs=dict(
            heads=fusion_cfg.heads, ffn_width=fusion_cfg.ffn_width, f=fusion_cfg.f,
            dropout=fusion_cfg.dropout, scale_scores=fusion_cfg.scale_scores, norm=fusion_cfg.norm))
        self.fusion = Fusion(fusion_cfg, rng)
        self.scale = Tensor(np.array([model_cfg.init_scale]), requires_grad=model_cfg.learn_scale)
        self._fusion_cfg = fusion_cfg
        self._pooling_cfg = pooling_cfg
        self._model_cfg = model_cfg

    @property
    def fusion_config(self) -> FusionConfig:
        return self._fusion_cfg

    @property
    def pooling_config(self) -> PoolingConfig:
        return self._pooling_cfg

    @property
    def model_config(self) -> ModelConfig:
        return self._model_cfg

    def state_tensors(self) -> dict:
        """Every persistent tensor, including a frozen scale."""
        out = dict(self.named_parameters())
        out.setdefault("scale", self.scale)
        return out

    # -- pipeline stages ----------------------------------------------------
    def image_tokens(self, images) -> TokenSequence:
        return flatten_tokens(self.image(images), self._model_cfg.resolutions)

    def text_tokens(self, captions: Sequence[TokenizedCaption], rng=None) -> TokenSequence:
        ids, lengths = pad_captions(captions)
        return self.text(ids, lengths, rng=rng)

    def fuse_query(self, images, captions, rng=None, record: Optional[list] = None) -> TokenSequence:
        return self.fusion(self.image_tokens(images), self.text_tokens(captions, rng), rng=rng, record=record)

    def embed_query(self, images, captions: Sequence[TokenizedCaption], rng=None,
                    record: Optional[list] = None) -> Tensor:
        """Image + caption -> scaled embedding, (N, d)."""
        if self._model_cfg.image_only:
            return self.embed_catalog(images, rng=rng, record=record)
        return pool(self.fuse_query(images, captions, rng, record), self._pooling_cfg, self.scale)

    def embed_catalog(self, images, rng=None, record: Optional[list] = None) -> Tensor:
        """Catalog image -> scaled embedding; through attention with a null caption when ITA is on."""
        tokens = self.image_tokens(images)
        if self._pooling_cfg.ita:
            tokens = self.fusion(tokens, None, rng=rng, record=record)
        return normalize_and_scale(pool_tokens(tokens, self._pooling_cfg.rp, include_text=False), self.scale)


def embed_query(img, caption, model: MAAFModel, rng=None) -> Tensor:
    return model.embed_query(img, [caption], rng=rng)


def embed_catalog(img, model: MAAFModel, rng=None) -> Tensor:
    return model.embed_catalog(img, rng=rng)
