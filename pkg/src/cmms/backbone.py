"""Two-stream five-level feature pyramid and per-level channel halving.

Each stream (RGB, depth) owns an independent copy of the same topology:
``convs_per_level`` 3x3 conv+ReLU layers per level with 2x2 max pooling
between levels, so level L lives at extent S / 2^(L-1). A separate 3x3
conv+ReLU per level halves the channel count before the fusion blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .layers import Conv2d, ParamStore
from .tensor import Graph, Tensor, max_pool2

LEVELS = 5


@dataclass
class BackboneConfig:
    """Pyramid geometry. ``input_size`` must be divisible by 16 and the
    per-level widths must be even (channel halving) and non-decreasing."""

    input_size: int = 64
    channels_per_level: list[int] = field(
        default_factory=lambda: [8, 16, 32, 32, 32]
    )
    convs_per_level: int = 2

    def __post_init__(self):
        if self.input_size % 16 != 0:
            raise ValueError(
                f"input_size {self.input_size} is not divisible by 16"
            )
        if len(self.channels_per_level) != LEVELS:
            raise ValueError(
                f"expected {LEVELS} channel counts, got {len(self.channels_per_level)}"
            )
        for i, c in enumerate(self.channels_per_level):
            if c <= 0:
                raise ValueError(f"channels_per_level[{i}] = {c} must be positive")
            if c % 2 != 0:
                raise ValueError(f"channels_per_level[{i}] = {c} must be even")
            if i and c < self.channels_per_level[i - 1]:
                raise ValueError("channels_per_level must be non-decreasing")
        if self.convs_per_level < 1:
            raise ValueError("convs_per_level must be positive")

    def level_extent(self, level: int) -> int:
        return self.input_size >> (level - 1)

    def stream_width(self, level: int) -> int:
        """Channel count of one fusion stream after halving."""
        return self.channels_per_level[level - 1] // 2


@dataclass
class Pyramid:
    """Five per-level feature tensors, extents halving level to level."""

    levels: list[Tensor]

    def __post_init__(self):
        if len(self.levels) != LEVELS:
            raise ValueError(f"pyramid needs {LEVELS} levels, got {len(self.levels)}")
        for i in range(1, LEVELS):
            prev = self.levels[i - 1].shape
            cur = self.levels[i].shape
            if (prev[2] != 2 * cur[2]) or (prev[3] != 2 * cur[3]):
                raise ValueError(
                    f"level {i + 1} extent {cur[2:]} is not half of {prev[2:]}"
                )


class Backbone:
    """One stream's feature extractor."""

    def __init__(self, store: ParamStore, name: str, cin: int, config: BackboneConfig):
        self.config = config
        self.cin = cin
        self.levels: list[list[Conv2d]] = []
        prev = cin
        for lvl in range(1, LEVELS + 1):
            ch = config.channels_per_level[lvl - 1]
            convs = []
            for i in range(config.convs_per_level):
                convs.append(
                    Conv2d(store, f"{name}.l{lvl}.conv{i}", prev if i == 0 else ch, ch)
                )
            prev = ch
            self.levels.append(convs)

    def extract_pyramid(self, g: Graph, image: Tensor) -> Pyramid:
        s = self.config.input_size
        if image.shape != (1, self.cin, s, s):
            raise ValueError(
                f"backbone expects (1,{self.cin},{s},{s}), got {image.shape}"
            )
        feats = []
        x = image
        for lvl, convs in enumerate(self.levels, start=1):
            if lvl > 1:
                x = max_pool2(g, x)
            for conv in convs:
                x = conv(g, x)
            feats.append(x)
        return Pyramid(feats)


class ChannelHalver:
    """3x3 conv+ReLU emitting half the input channel count."""

    def __init__(self, store: ParamStore, name: str, cin: int):
        if cin % 2 != 0:
            raise ValueError(f"channel count {cin} must be even to halve")
        self.conv = Conv2d(store, name, cin, cin // 2)

    def __call__(self, g: Graph, features: Tensor) -> Tensor:
        return self.conv(g, features)
