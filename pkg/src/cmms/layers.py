"""Parameter registry and the two learned layer wrappers.

Weights start from a zero-mean Gaussian with std sqrt(2/fan_in);
biases start at a constant 0. Parameters are registered in creation
order under hierarchical names, which fixes both the checkpoint layout
and the optimizer buffer order.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Graph, Tensor, conv2d, fully_connected, relu, sigmoid


class ParamStore:
    """Ordered name -> parameter tensor registry with seeded init."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def gaussian(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        std = math.sqrt(2.0 / fan_in)
        return self.register(name, self.rng.normal(0.0, std, shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.register(name, np.zeros(shape))

    def register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()


_ACTS = {"relu": relu, "sigmoid": sigmoid, None: None}


class Conv2d:
    """3x3-by-default conv layer with an optional pointwise activation."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        cin: int,
        cout: int,
        k: int = 3,
        act: str | None = "relu",
    ):
        if act not in _ACTS:
            raise ValueError(f"unknown activation {act!r}")
        self.w = store.gaussian(f"{name}.w", (cout, cin, k, k), fan_in=cin * k * k)
        self.b = store.zeros(f"{name}.b", (cout,))
        self.act = act

    def __call__(self, g: Graph, x: Tensor) -> Tensor:
        out = conv2d(g, x, self.w, self.b)
        fn = _ACTS[self.act]
        return fn(g, out) if fn else out


class Linear:
    """Fully-connected layer with an optional activation."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        nin: int,
        nout: int,
        act: str | None = None,
    ):
        if act not in _ACTS:
            raise ValueError(f"unknown activation {act!r}")
        self.w = store.gaussian(f"{name}.w", (nout, nin), fan_in=nin)
        self.b = store.zeros(f"{name}.b", (nout,))
        self.act = act

    def __call__(self, g: Graph, x: Tensor) -> Tensor:
        out = fully_connected(g, x, self.w, self.b)
        fn = _ACTS[self.act]
        return fn(g, out) if fn else out
