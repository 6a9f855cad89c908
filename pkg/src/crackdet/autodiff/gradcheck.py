"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def grad_check(fn: Callable[[], Tensor], inputs: list[Tensor], h: float = 1e-5,
               max_coords: int = 512, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` rebuilds a scalar from ``inputs`` on every call. Up to
    ``max_coords`` coordinates are sampled across all inputs. The error is
    normwise: ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``,
    which stays meaningful when some sampled derivatives are tiny.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError("step h must lie in [1e-6, 1e-4]")
    rng = np.random.default_rng(0) if rng is None else rng
    for t in inputs:
        t.zero_grad()
    fn().backward()
    analytic_all = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    sizes = np.array([t.data.size for t in inputs])
    total = int(sizes.sum())
    picks = np.arange(total) if total <= max_coords else np.sort(rng.choice(total, max_coords, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    analytic, numeric = [], []
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        t, i = inputs[k], int(flat - offsets[k])
        view = t.data.reshape(-1)
        orig = view[i]
        view[i] = orig + h
        up = fn().item()
        view[i] = orig - h
        down = fn().item()
        view[i] = orig
        numeric.append((up - down) / (2 * h))
        analytic.append(analytic_all[k].reshape(-1)[i])

    analytic, numeric = np.array(analytic), np.array(numeric)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)
