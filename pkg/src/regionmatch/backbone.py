"""Convolutional feature extractor producing C x h x w spatial feature maps.

Each block is conv(3x3, pad 1) -> batch norm -> relu -> max pool(2). The
default stack of four blocks halves the spatial size per block, so 84x84
inputs come out at 5x5 and 32x32 inputs at 2x2. An optional adaptive
average pooling stage shrinks the map to a requested spatial target; the
exact pooling/padding layout is a documented choice, not claimed canonical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .modules import BatchNorm2d, Conv2d, Module, ModuleList
from .tensor import ShapeError, Tensor, adaptive_avg_pool2d, as_tensor, max_pool2d, relu

PRESETS = {
    "conv4-64": {"blocks": 4, "channels": 64},
    "conv4-32": {"blocks": 4, "channels": 32},
}


@dataclass
class BackboneConfig:
    """Backbone hyperparameters.

    ``spatial_target`` of None keeps the natural output size (5x5 for the
    84x84 preset); an explicit smaller target is reached by adaptive
    average pooling, mirroring the feature-map-size ablation.
    """

    blocks: int = 4
    channels: int = 64
    in_channels: int = 3
    input_hw: tuple[int, int] = (32, 32)
    spatial_target: Optional[tuple[int, int]] = None

    def natural_output_hw(self) -> tuple[int, int]:
        h, w = self.input_hw
        for _ in range(self.blocks):
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ShapeError(
                f"input {self.input_hw} collapses below 1x1 after {self.blocks} blocks"
            )
        return h, w

    def output_hw(self) -> tuple[int, int]:
        natural = self.natural_output_hw()
        if self.spatial_target is None:
            return natural
        th, tw = self.spatial_target
        if th > natural[0] or tw > natural[1]:
            raise ShapeError(
                f"spatial target {self.spatial_target} exceeds natural output {natural}"
            )
        if th < 1 or tw < 1:
            raise ShapeError(f"spatial target must be >= 1, got {self.spatial_target}")
        return th, tw


def preset_config(name: str, input_hw=(32, 32), spatial_target=None) -> BackboneConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS)}")
    return BackboneConfig(
        input_hw=tuple(input_hw), spatial_target=spatial_target, **PRESETS[name]
    )


@dataclass
class FeatureMap:
    """A C x h x w embedding of one image; the unit all matching operates on."""

    values: Tensor
    sample_id: Optional[int] = None

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


class ConvBackbone(Module):
    def __init__(self, config: BackboneConfig, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng()
        self.config = config
        blocks = []
        c_in = config.in_channels
        for _ in range(config.blocks):
            blocks.append(_ConvBlock(c_in, config.channels, rng=rng, dtype=dtype))
            c_in = config.channels
        self.blocks = ModuleList(blocks)

    def forward(self, x):
        """Embed a (N,3,H,W) batch (or a single (3,H,W) image) to feature maps."""
        x = as_tensor(x)
        for block in self.blocks:
            x = block(x)
        target = self.config.output_hw()
        if target != self.config.natural_output_hw():
            x = adaptive_avg_pool2d(x, target)
        return x

    def extract(self, image, sample_id: Optional[int] = None) -> FeatureMap:
        """Embed one validated image; the public single-sample entry point."""
        image = as_tensor(image)
        if image.ndim != 3:
            raise ShapeError(f"extract expects a (C,H,W) image, got {image.shape}")
        c, h, w = image.shape
        if c != self.config.in_channels:
            raise ShapeError(
                f"image has {c} channels, backbone configured for {self.config.in_channels}"
            )
        if (h, w) != tuple(self.config.input_hw):
            raise ShapeError(
                f"image is {h}x{w}, backbone configured for "
                f"{self.config.input_hw[0]}x{self.config.input_hw[1]}"
            )
        lo, hi = float(image.data.min()), float(image.data.max())
        if lo < -1e-6 or hi > 1 + 1e-6:
            raise ValueError(f"image values must lie in [0,1], got range [{lo:.4g}, {hi:.4g}]")
        values = self.forward(image.reshape((1, c, h, w))).reshape(
            (self.config.channels,) + self.config.output_hw()
        )
        return FeatureMap(values=values, sample_id=sample_id)


class _ConvBlock(Module):
    def __init__(self, c_in, c_out, rng, dtype):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, padding=1, rng=rng, dtype=dtype)
        self.norm = BatchNorm2d(c_out, dtype=dtype)
        self.pool = 2

    def forward(self, x):
        return max_pool2d(relu(self.norm(self.conv(x))), self.pool)


def resize_spatial(fm: FeatureMap, target) -> FeatureMap:
    """Shrink a feature map to ``target`` (h', w') by adaptive average pooling.

    The identity target returns an equal map; upsizing is rejected.
    """
    if isinstance(target, int):
        target = (target, target)
    th, tw = target
    h, w = fm.spatial
    if th > h or tw > w:
        raise ShapeError(f"cannot resize {h}x{w} feature map up to {th}x{tw}")
    if th < 1 or tw < 1:
        raise ShapeError(f"resize target must be >= 1, got {target}")
    if (th, tw) == (h, w):
        return FeatureMap(values=fm.values, sample_id=fm.sample_id)
    return FeatureMap(values=adaptive_avg_pool2d(fm.values, (th, tw)), sample_id=fm.sample_id)
