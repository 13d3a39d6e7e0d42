"""Small strided convolutional backbone tapped at two resolutions."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .nn import Conv2d, Linear, Module
from .tokens import FeatureMapPair

DEFAULT_CHANNELS = (16, 32, 64, 128)


class ImageEncoder(Module):
    """Four stride-2 conv stages; fine tap after stage 3, coarse after stage 4.

    Each tap gets its own linear projection to the model dimension. For an
    H x W input the fine grid is H/8 x W/8 and the coarse grid H/16 x W/16.
    """

    def __init__(self, d: int, rng: np.random.Generator, channels: Sequence[int] = DEFAULT_CHANNELS):
        if len(channels) != 4:
            raise ValueError("backbone needs exactly four stage widths")
        widths = (3,) + tuple(channels)
        self.backbone = [Conv2d(widths[i], widths[i + 1], rng) for i in range(4)]
        self.proj_fine = Linear(channels[2], d, rng)
        self.proj_coarse = Linear(channels[3], d, rng)

    def __call__(self, images) -> FeatureMapPair:
        x = as_image_batch(images)
        h = Tensor(x)
        for i, conv in enumerate(self.backbone):
            h = F.relu(conv(h))
            if i == 2:
                fine = h
        return FeatureMapPair(coarse=self.proj_coarse(h), fine=self.proj_fine(fine))


def as_image_batch(images) -> np.ndarray:
    """Validate an (N, H, W, 3) or (H, W, 3) float image array."""
    x = images.data if isinstance(images, Tensor) else np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected images shaped (N, H, W, 3), got {x.shape}")
    if x.shape[1] % 16 or x.shape[2] % 16:
        raise ValueError(f"image height and width must be multiples of 16, got {x.shape[1]}x{x.shape[2]}")
    return x


def encode_image(img, encoder: ImageEncoder) -> FeatureMapPair:
    return encoder(img)
