"""Dense tensors, differentiable primitives, reverse-mode backprop, Adam.

All arithmetic is double precision. Feature maps use the layout
(1, C, H, W); vectors are rank 1, matrices rank 2, losses rank 0.
The batch dimension is fixed to 1 inside a graph; batching happens by
accumulating gradients across per-sample graphs.

Ops are free functions taking the recording ``Graph`` as first
argument. A graph records one closure per op; ``Graph.backward``
replays them in exact reverse order. Parameter gradients accumulate
into ``Tensor.grad`` and are never cleared by backward itself.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "AdamState",
    "adam_step",
    "conv2d",
    "max_pool2",
    "global_avg_pool",
    "upsample_bilinear2x",
    "add",
    "mul",
    "relu",
    "sigmoid",
    "fully_connected",
    "concat_channels",
    "slice_channels",
    "mul_channel_vec",
    "mul_spatial_map",
    "scale",
    "mean_all",
    "bce_mean",
]


class Tensor:
    """Rank <= 4 dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "needs_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        if self.data.ndim > 4:
            raise ValueError(f"tensor rank {self.data.ndim} exceeds 4")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        # True when a gradient must be propagated through this tensor
        # (it is a parameter, or was computed from one).
        self.needs_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the value buffer."""
        return self.data.reshape(-1)

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        nm = f" {self.name!r}" if self.name else ""
        return f"Tensor{nm}(shape={self.shape}, requires_grad={self.requires_grad})"


class Graph:
    """Ordered tape of op records; backward replays it in reverse.

    A graph instance is single-threaded during forward/backward.
    Build with ``record=False`` for inference: ops then keep no
    closures or cached intermediates.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._records: list[tuple[str, object]] = []
        self._consumed = False

    def push(self, kind: str, fn) -> None:
        if self.record:
            self._records.append((kind, fn))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(tensor) to every participating tensor.

        Gradients add into existing ``grad`` buffers, so repeated
        backward calls over separate graphs accumulate (used for
        batch accumulation). Non-participating tensors are untouched;
        callers that need explicit zeros call ``zero_grad`` first.
        """
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not self.record:
            raise ValueError("graph was built with record=False; cannot backprop")
        if self._consumed:
            raise ValueError("graph already backpropagated")
        self._consumed = True
        loss.ensure_grad()
        loss.grad += 1.0
        for _, fn in reversed(self._records):
            fn()


def _out(g: Graph, data, *inputs: Tensor) -> Tensor:
    t = Tensor(data)
    t.needs_grad = g.record and any(x.needs_grad for x in inputs)
    return t


# ---------------------------------------------------------------------------
# Convolution kernel: stride 1, 'same' padding, odd square kernels.
#
# The padded input is flattened per channel so that every kernel tap
# (di, dj) selects a *contiguous* slice of the buffer; one GEMM over
# the stacked tap slices computes all output pixels on a width-padded
# grid whose surplus columns are discarded. Blocks of output rows keep
# the patch matrix bounded for large images.
# ---------------------------------------------------------------------------

_PATCH_BLOCK = 1 << 24  # max patch-matrix elements (128 MB of float64)


def _pad_flat(x: np.ndarray, p: int) -> tuple[np.ndarray, int]:
    """Zero-pad (C,H,W) and flatten rows; trailing slack covers the last tap shift."""
    c, h, w = x.shape
    w2 = w + 2 * p
    h2 = h + 2 * p
    xf = np.zeros((c, h2 * w2 + 2 * p))
    xf[:, : h2 * w2].reshape(c, h2, w2)[:, p : p + h, p : p + w] = x
    return xf, w2


def _conv_raw(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Correlate (Cin,H,W) with (Cout,Cin,k,k); output (Cout,H,W)."""
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    xf, w2 = _pad_flat(x, p)
    wm = w.transpose(2, 3, 1, 0).reshape(k * k * cin, cout)
    taps = k * k
    rblock = max(1, _PATCH_BLOCK // max(1, taps * cin * w2))
    out = np.empty((cout, h, w2))
    for r0 in range(0, h, rblock):
        r1 = min(h, r0 + rblock)
        n = (r1 - r0) * w2
        patch = np.empty((taps * cin, n))
        base = r0 * w2
        t = 0
        for di in range(k):
            for dj in range(k):
                s = base + di * w2 + dj
                patch[t * cin : (t + 1) * cin] = xf[:, s : s + n]
                t += 1
        out[:, r0:r1, :].reshape(cout, n)[...] = wm.T @ patch
    return np.ascontiguousarray(out[:, :, :wd])


def _conv_dw(x: np.ndarray, dout: np.ndarray, k: int) -> np.ndarray:
    """Gradient w.r.t. the kernel of _conv_raw."""
    cin, h, wd = x.shape
    cout = dout.shape[0]
    p = k // 2
    xf, w2 = _pad_flat(x, p)
    dw_wide = np.zeros((cout, h, w2))
    dw_wide[:, :, :wd] = dout
    taps = k * k
    rblock = max(1, _PATCH_BLOCK // max(1, taps * cin * w2))
    dwm = np.zeros((cout, taps * cin))
    for r0 in range(0, h, rblock):
        r1 = min(h, r0 + rblock)
        n = (r1 - r0) * w2
        patch = np.empty((taps * cin, n))
        base = r0 * w2
        t = 0
        for di in range(k):
            for dj in range(k):
                s = base + di * w2 + dj
                patch[t * cin : (t + 1) * cin] = xf[:, s : s + n]
                t += 1
        dwm += dw_wide[:, r0:r1, :].reshape(cout, n) @ patch.T
    return np.ascontiguousarray(dwm.reshape(cout, k, k, cin).transpose(0, 3, 1, 2))


def conv2d(g: Graph, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """2-D convolution, stride 1, spatial-size-preserving padding.

    x: (1, Cin, H, W); w: (Cout, Cin, k, k) with k odd; b: (Cout,).
    """
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"conv2d: input must be (1,C,H,W), got {x.shape}")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d: weight must be rank 4, got {w.shape}")
    cout, cin, k, k2 = w.shape
    if k != k2:
        raise ValueError(f"conv2d: kernel must be square, got {k}x{k2}")
    if k % 2 != 1:
        raise ValueError(f"conv2d: kernel size {k} must be odd")
    if x.shape[1] != cin:
        raise ValueError(
            f"conv2d: input channels {x.shape[1]} do not match weight input channels {cin}"
        )
    if b.data.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {b.shape} must be ({cout},)")
    res = _conv_raw(x.data[0], w.data)
    res += b.data[:, None, None]
    out = _out(g, res[None], x, w, b)
    if out.needs_grad:
        def bwd():
            if out.grad is None:
                return
            go = out.grad[0]
            if b.needs_grad:
                b.ensure_grad()
                b.grad += go.sum(axis=(1, 2))
            if w.needs_grad:
                w.ensure_grad()
                w.grad += _conv_dw(x.data[0], go, k)
            if x.needs_grad:
                wf = np.ascontiguousarray(
                    w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
                )
                x.ensure_grad()
                x.grad += _conv_raw(go, wf)[None]
        g.push("conv2d", bwd)
    return out


def max_pool2(g: Graph, x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first
    element in row-major window order."""
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"max_pool2: input must be (1,C,H,W), got {x.shape}")
    _, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2: extents ({h},{w}) must be even")
    win = (
        x.data[0]
        .reshape(c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, h // 2, w // 2, 4)
    )
    idx = win.argmax(axis=-1)
    res = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = _out(g, res[None], x)
    if out.needs_grad:
        def bwd():
            if out.grad is None:
                return
            scat = np.zeros((c, h // 2, w // 2, 4))
            np.put_along_axis(scat, idx[..., None], out.grad[0][..., None], axis=-1)
            x.ensure_grad()
            x.grad += (
                scat.reshape(c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 3, 2, 4)
                .reshape(1, c, h, w)
            )
        g.push("max_pool2", bwd)
    return out


def global_avg_pool(g: Graph, x: Tensor) -> Tensor:
    """Per-channel spatial mean: (1,N,H,W) -> (N,)."""
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"global_avg_pool: input must be (1,C,H,W), got {x.shape}")
    _, n, h, w = x.shape
    out = _out(g, x.data[0].mean(axis=(1, 2)), x)
    if out.needs_grad:
        def bwd():
            if out.grad is None:
                return
            x.ensure_grad()
            x.grad += out.grad[None, :, None, None] / (h * w)
        g.push("global_avg_pool", bwd)
    return out


def _up2_coords(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = np.clip((np.arange(2 * n) + 0.5) / 2.0 - 0.5, 0.0, n - 1.0)
    i0 = np.floor(src).astype(np.intp)
    frac = src - i0
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, frac


def upsample_bilinear2x(g: Graph, x: Tensor) -> Tensor:
    """2x bilinear upsampling with half-pixel centers and border clamping."""
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"upsample_bilinear2x: input must be (1,C,H,W), got {x.shape}")
    _, c, h, w = x.shape
    r0, r1, rf = _up2_coords(h)
    c0, c1, cf = _up2_coords(w)
    v = x.data[0]
    rows = v[:, r0, :] * (1.0 - rf)[None, :, None] + v[:, r1, :] * rf[None, :, None]
    res = rows[:, :, c0] * (1.0 - cf)[None, None, :] + rows[:, :, c1] * cf[None, None, :]
    out = _out(g, res[None], x)
    if out.needs_grad:
        def bwd():
            if out.grad is None:
                return
            go = out.grad[0]
            # undo the column then the row interpolation, scattering
            # each contribution back to its two source samples
            drows = np.zeros((c, 2 * h, w))
            dcols = drows.transpose(2, 0, 1)  # (w, c, 2h) view
            np.add.at(dcols, c0, (go * (1.0 - cf)[None, None, :]).transpose(2, 0, 1))
            np.add.at(dcols, c1, (go * cf[None, None, :]).transpose(2, 0, 1))
            dx = np.zeros((c, h, w))
            dxr = dx.transpose(1, 0, 2)  # (h, c, w) view
            np.add.at(dxr, r0, (drows * (1.0 - rf)[None, :, None]).transpose(1, 0, 2))
            np.add.at(dxr, r1, (drows * rf[None, :, None]).transpose(1, 0, 2))
            x.ensure_grad()
            x.grad += dx[None]
        g.push("upsample_bilinear2x", bwd)
    return out


def add(g: Graph, a: Tensor, b: Tensor) -> Tensor:
    """Element-wise addition of identically shaped tensors."""
    if a.shape != b.shape:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} differ")
    out = _out(g, a.data + b.data, a, b)
    if out.needs_grad:
        def bwd():
            if out.grad is None:
                return
            for t in (a, b):
                if t.needs_grad:
                    t.ensure_grad()
                    t.grad += out.grad
        g.push("add", bwd)
    return out


def mul(g: Graph, a: Tensor, b: Tensor) -> Tensor:
    """Element-wise multiplication of identically shaped tensors."""
    if a.shape != b.shape:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = _out(g, a.data * b.data, a, b)
    if out.needs_grad:
        def bwd():
            if out.grad is None:
                return
            if a.needs_grad:
                a.ensure_grad()
                a.grad += out.grad * b.data
            if b.needs_grad:
                b.ensure_grad()
                b.grad += out.grad * a.data
        g.push("mul", bwd)
    return out


def relu(g: Graph, x: Tensor) -> Tensor:
    out = _out(g, np.maximum(x.data, 0.0), x)
    if out.needs_grad:
        mask = x.data > 0.0
        def bwd():
            if out.grad is None:
                return
            x.ensure_grad()
            x.grad += out.grad * mask
        g.push("relu", bwd)
    return out


def sigmoid(g: Graph, x: Tensor) -> Tensor:
    v = x.data
    res = np.empty_like(v)
    pos = v >= 0
    res[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    res[~pos] = ev / (1.0 + ev)
    out = _out(g, res, x)
    if out.needs_grad:
        def bwd():
            if out.grad is None:
                return
            x.ensure_grad()
            x.grad += out.grad * out.data * (1.0 - out.data)
        g.push("sigmoid", bwd)
    return out


def fully_connected(g: Graph, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: (N,) x (M,N) + (M,) -> (M,)."""
    if x.data.ndim != 1:
        raise ValueError(f"fully_connected: input must be a vector, got {x.shape}")
    if w.data.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ValueError(
            f"fully_connected: weight {w.shape} incompatible with input {x.shape}"
        )
    if b.data.shape != (w.shape[0],):
        raise ValueError(f"fully_connected: bias shape {b.shape} must be ({w.shape[0]},)")
    out = _out(g, w.data @ x.data + b.data, x, w, b)
    if out.needs_grad:
        def bwd():
            if out.grad is None:
                return
            if x.needs_grad:
                x.ensure_grad()
                x.grad += w.data.T @ out.grad
            if w.needs_grad:
                w.ensure_grad()
                w.grad += np.outer(out.grad, x.data)
            if b.needs_grad:
                b.ensure_grad()
                b.grad += out.grad
        g.push("fully_connected", bwd)
    return out


def concat_channels(g: Graph, xs: list[Tensor]) -> Tensor:
    """Concatenate (1,Ci,H,W) tensors along the channel axis, argument order."""
    if not xs:
        raise ValueError("concat_channels: empty input list")
    hw = xs[0].shape[2:]
    for t in xs:
        if t.data.ndim != 4 or t.shape[0] != 1:
            raise ValueError(f"concat_channels: input must be (1,C,H,W), got {t.shape}")
        if t.shape[2:] != hw:
            raise ValueError(
                f"concat_channels: spatial size {t.shape[2:]} differs from {hw}"
            )
    out = _out(g, np.concatenate([t.data for t in xs], axis=1), *xs)
    if out.needs_grad:
        def bwd():
            if out.grad is None:
                return
            at = 0
            for t in xs:
                c = t.shape[1]
                if t.needs_grad:
                    t.ensure_grad()
                    t.grad += out.grad[:, at : at + c]
                at += c
        g.push("concat_channels", bwd)
    return out


def slice_channels(g: Graph, x: Tensor, start: int, stop: int) -> Tensor:
    """Channel slice [start, stop) of a (1,C,H,W) tensor."""
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"slice_channels: input must be (1,C,H,W), got {x.shape}")
    if not (0 <= start < stop <= x.shape[1]):
        raise ValueError(
            f"slice_channels: range [{start},{stop}) invalid for {x.shape[1]} channels"
        )
    out = _out(g, x.data[:, start:stop].copy(), x)
    if out.needs_grad:
        def bwd():
            if out.grad is None:
                return
            x.ensure_grad()
            x.grad[:, start:stop] += out.grad
        g.push("slice_channels", bwd)
    return out


def mul_channel_vec(g: Graph, x: Tensor, s: Tensor) -> Tensor:
    """Scale each channel of (1,N,H,W) by the matching entry of s (N,)."""
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"mul_channel_vec: input must be (1,C,H,W), got {x.shape}")
    if s.data.shape != (x.shape[1],):
        raise ValueError(
            f"mul_channel_vec: scale shape {s.shape} must be ({x.shape[1]},)"
        )
    out = _out(g, x.data * s.data[None, :, None, None], x, s)
    if out.needs_grad:
        def bwd():
            if out.grad is None:
                return
            if x.needs_grad:
                x.ensure_grad()
                x.grad += out.grad * s.data[None, :, None, None]
            if s.needs_grad:
                s.ensure_grad()
                s.grad += (out.grad * x.data).sum(axis=(0, 2, 3))
        g.push("mul_channel_vec", bwd)
    return out


def mul_spatial_map(g: Graph, x: Tensor, m: Tensor) -> Tensor:
    """Multiply every channel of (1,C,H,W) by the single-channel map m (1,1,H,W)."""
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"mul_spatial_map: input must be (1,C,H,W), got {x.shape}")
    if m.data.shape != (1, 1) + x.shape[2:]:
        raise ValueError(
            f"mul_spatial_map: map shape {m.shape} must be (1,1,{x.shape[2]},{x.shape[3]})"
        )
    out = _out(g, x.data * m.data, x, m)
    if out.needs_grad:
        def bwd():
            if out.grad is None:
                return
            if x.needs_grad:
                x.ensure_grad()
                x.grad += out.grad * m.data
            if m.needs_grad:
                m.ensure_grad()
                m.grad += (out.grad * x.data).sum(axis=1, keepdims=True)
        g.push("mul_spatial_map", bwd)
    return out


def scale(g: Graph, x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    out = _out(g, x.data * c, x)
    if out.needs_grad:
        def bwd():
            if out.grad is None:
                return
            x.ensure_grad()
            x.grad += out.grad * c
        g.push("scale", bwd)
    return out


def mean_all(g: Graph, x: Tensor) -> Tensor:
    """Mean over all entries; returns a scalar tensor."""
    out = _out(g, np.asarray(x.data.mean()), x)
    if out.needs_grad:
        n = x.data.size
        def bwd():
            if out.grad is None:
                return
            x.ensure_grad()
            x.grad += out.grad / n
        g.push("mean_all", bwd)
    return out


def bce_mean(g: Graph, pred: Tensor, target: np.ndarray, clip: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy against a fixed target array.

    Predictions are clamped to [clip, 1-clip] before the logs; the
    gradient is zero in the clamped region.
    """
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ValueError(f"bce_mean: target shape {t.shape} != prediction {pred.shape}")
    p = np.clip(pred.data, clip, 1.0 - clip)
    val = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean()
    out = _out(g, np.asarray(val), pred)
    if out.needs_grad:
        n = p.size
        inside = (pred.data > clip) & (pred.data < 1.0 - clip)
        def bwd():
            if out.grad is None:
                return
            pred.ensure_grad()
            dp = np.where(inside, (p - t) / (p * (1.0 - p) * n), 0.0)
            pred.grad += out.grad * dp
        g.push("bce_mean", bwd)
    return out


class AdamState:
    """Adam moments aligned with a parameter list."""

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: list[Tensor], state: AdamState) -> None:
    """One Adam update with bias correction, in place on param data.

    Missing gradients count as zero. Raises on buffer misalignment.
    """
    if len(params) != len(state.m):
        raise ValueError(
            f"adam_step: {len(params)} params vs state for {len(state.m)}"
        )
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.data.shape:
            raise ValueError(
                f"adam_step: moment shape {m.shape} != param shape {p.data.shape}"
            )
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
