"""Cross-modality feature modulation.

Depth features condition two parallel conv stacks (kernel ladder
7, 5, 3, 3, all spatial-size-preserving) that emit a pixel-wise scale
and shift. RGB features are then modulated as rgb * gamma + beta.
Intermediate layers are ReLU-activated; the final layer of each branch
is linear so the scale and shift can take any real value.
"""

from __future__ import annotations

from dataclasses import dataclass

from .layers import Conv2d, ParamStore
from .tensor import Graph, Tensor, add, mul

KERNEL_LADDER = (7, 5, 3, 3)


@dataclass
class AffineParams:
    """Pixel-wise scale and shift, shaped like the features they modulate."""

    gamma: Tensor
    beta: Tensor

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape:
            raise ValueError(
                f"gamma shape {self.gamma.shape} != beta shape {self.beta.shape}"
            )


class Modulator:
    """Two parallel 4-conv branches estimating (gamma, beta) from depth."""

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.channels = channels
        self.gamma_branch = self._branch(store, f"{name}.gamma", channels)
        self.beta_branch = self._branch(store, f"{name}.beta", channels)

    @staticmethod
    def _branch(store: ParamStore, name: str, c: int) -> list[Conv2d]:
        layers = []
        for i, k in enumerate(KERNEL_LADDER):
            act = "relu" if i < len(KERNEL_LADDER) - 1 else None
            layers.append(Conv2d(store, f"{name}.conv{i}", c, c, k=k, act=act))
        return layers

    def estimate_affine(self, g: Graph, depth_features: Tensor) -> AffineParams:
        if depth_features.data.ndim != 4 or depth_features.shape[1] != self.channels:
            raise ValueError(
                f"modulator expects (1,{self.channels},H,W), got {depth_features.shape}"
            )
        outs = []
        for branch in (self.gamma_branch, self.beta_branch):
            x = depth_features
            for layer in branch:
                x = layer(g, x)
            outs.append(x)
        return AffineParams(gamma=outs[0], beta=outs[1])


def modulate(g: Graph, rgb_features: Tensor, affine: AffineParams) -> Tensor:
    """Pixel-wise scaling and shifting of the RGB features."""
    if rgb_features.shape != affine.gamma.shape:
        raise ValueError(
            f"rgb features {rgb_features.shape} differ from affine {affine.gamma.shape}"
        )
    return add(g, mul(g, rgb_features, affine.gamma), affine.beta)
