"""Pixel-wise adaptive fusion of the spatial and frequency feature maps."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import functional as F
from .errors import DimensionError
from .layers import Conv2d, ParamStore
from .tensor import Tensor, concat


class FusionHead:
    """Three same-padded 3x3 convs (2C -> hidden -> hidden -> 2) with LeakyReLU between."""

    def __init__(self, store: ParamStore, channels: int, hidden: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None, prefix: str = "fusion",
                 slope: float = F.LEAKY_SLOPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = hidden or channels
        self.channels = channels
        self.slope = slope
        self.conv1 = Conv2d(store, f"{prefix}.conv1", 2 * channels, hidden, (3, 3), rng)
        self.conv2 = Conv2d(store, f"{prefix}.conv2", hidden, hidden, (3, 3), rng)
        self.conv3 = Conv2d(store, f"{prefix}.conv3", hidden, 2, (3, 3), rng)

    def scores(self, stacked: Tensor) -> Tensor:
        h = F.leaky_relu(self.conv1(stacked), self.slope)
        h = F.leaky_relu(self.conv2(h), self.slope)
        return self.conv3(h)


def fuse(spatial: Tensor, frequency: Tensor, head: FusionHead) -> tuple:
    """Return ``(fused, w_spatial, w_frequency)``.

    Weights come from a softmax over the two score channels and are shared
    by every feature channel at a pixel.
    """
    if spatial.shape != frequency.shape:
        raise DimensionError(f"branch shapes differ: {spatial.shape} vs {frequency.shape}")
    squeeze = spatial.ndim == 3
    if squeeze:
        spatial = spatial.reshape((1,) + spatial.shape)
        frequency = frequency.reshape((1,) + frequency.shape)
    weights = F.softmax(head.scores(concat([spatial, frequency], axis=1)), axis=1)
    b, _, h, w = weights.shape
    w_s = weights[:, 0:1]
    w_f = weights[:, 1:2]
    fused = w_s * spatial + w_f * frequency
    w_s, w_f = w_s.reshape((b, h, w)), w_f.reshape((b, h, w))
    if squeeze:
        return fused.reshape(fused.shape[1:]), w_s.reshape((h, w)), w_f.reshape((h, w))
    return fused, w_s, w_f
