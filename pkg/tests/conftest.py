"""Shared finite-difference gradient checking helpers."""

from __future__ import annotations

import numpy as np

from cmms.tensor import Graph, Tensor, mean_all, mul


def fd_check(build_loss, tensors, step=1e-3, floor=1e-6):
    """Max relative error between analytic and central-difference grads.

    ``build_loss`` maps a fresh Graph to a scalar Tensor; ``tensors``
    are the leaves to differentiate. Relative error uses
    |analytic - numeric| / max(|analytic|, floor).
    """
    g = Graph()
    loss = build_loss(g)
    for t in tensors:
        t.zero_grad()
    g.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad.copy()
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            lp = build_loss(Graph(record=False)).data.item()
            flat[i] = keep - step
            lm = build_loss(Graph(record=False)).data.item()
            flat[i] = keep
            num[i] = (lp - lm) / (2.0 * step)
        err = np.abs(analytic.reshape(-1) - num)
        rel = err / np.maximum(np.abs(analytic.reshape(-1)), floor)
        worst = max(worst, rel.max())
    return worst


def fd_check_sampled(build_loss, tensors, rng, n_coords=12, step=1e-3, floor=1e-6):
    """fd_check over a random subset of coordinates of each tensor."""
    g = Graph()
    loss = build_loss(g)
    for t in tensors:
        t.zero_grad()
    g.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad.reshape(-1)
        flat = t.data.reshape(-1)
        k = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for i in coords:
            keep = flat[i]
            flat[i] = keep + step
            lp = build_loss(Graph(record=False)).data.item()
            flat[i] = keep - step
            lm = build_loss(Graph(record=False)).data.item()
            flat[i] = keep
            num = (lp - lm) / (2.0 * step)
            rel = abs(analytic[i] - num) / max(abs(analytic[i]), floor)
            worst = max(worst, rel)
    return worst


def random_projection_loss(g: Graph, out: Tensor, proj: np.ndarray) -> Tensor:
    """Scalar loss <out, proj> / size, as a fixed random functional of out."""
    return mean_all(g, mul(g, out, Tensor(proj)))
