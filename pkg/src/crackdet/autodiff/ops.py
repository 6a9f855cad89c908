"""Differentiable kernels for the crack network.

All tensors are NCHW float64. Every function returns a new :class:`Tensor`
whose ``backward_fn`` produces gradients for its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import IndexOutOfWindow, ShapeMismatch
from .tensor import Tensor


def _require_4d(x: Tensor, op: str):
    if x.data.ndim != 4:
        raise ShapeMismatch(f"{op} expects an NCHW tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp, kh, kw, stride, ho, wo):
    """Patches as ``(N, C*kh*kw, ho*wo)``, built from strided slice copies."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(dcols, xp_shape, kh, kw, stride, ho, wo):
    n, c = xp_shape[:2]
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros(xp_shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    return dxp


def _conv_direct(xp, w, stride, ho, wo):
    n = xp.shape[0]
    out = np.zeros((n, w.shape[0], ho, wo))
    for i in range(w.shape[2]):
        for j in range(w.shape[3]):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            out += np.einsum("oc,nchw->nohw", w[:, :, i, j], patch)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int | None = None, method: str = "im2col") -> Tensor:
    """2-D cross-correlation.

    ``padding`` defaults to ``k // 2`` so that stride-1 convolutions keep the
    spatial size. ``method="direct"`` evaluates the sum offset by offset and
    is kept as a reference for the ``im2col`` path.
    """
    _require_4d(x, "conv2d")
    w = weight.data
    if w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"conv2d: input has {x.shape[1]} channels, kernel is {w.shape}")
    kh, kw = w.shape[2:]
    if (kh, kw) not in ((3, 3), (1, 1)):
        raise ShapeMismatch(f"conv2d supports 3x3 and 1x1 kernels, got {kh}x{kw}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv2d: bias shape {bias.shape} vs {w.shape[0]} output channels")
    pad = kh // 2 if padding is None else padding
    n, c, h, wd = x.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    o = w.shape[0]
    wm = w.reshape(o, -1)

    if method == "im2col":
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        out = np.matmul(wm, cols).reshape(n, o, ho, wo)
    elif method == "direct":
        cols = None
        out = _conv_direct(xp, w, stride, ho, wo)
    else:
        raise ValueError(f"unknown conv method {method!r}")
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        if cols is not None:
            gm = g.reshape(n, o, ho * wo)
            dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            if stride == 1 and 2 * pad == kh - 1:
                # input gradient of a same-size conv is a same-size conv with the flipped kernel
                gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
                wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
                dx = np.matmul(wf, _im2col(gp, kh, kw, 1, h, wd)).reshape(n, c, h, wd)
                db = g.sum(axis=(0, 2, 3)) if bias is not None else None
                return (dx, dw, db) if bias is not None else (dx, dw)
            dxp = _col2im(np.matmul(wm.T, gm), xp.shape, kh, kw, stride, ho, wo)
        else:
            dw = np.zeros_like(w)
            dxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    sl = (slice(None), slice(None), slice(i, i + stride * ho, stride),
                          slice(j, j + stride * wo, stride))
                    dw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, xp[sl])
                    dxp[sl] += np.einsum("nohw,oc->nchw", g, w[:, :, i, j])
        dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor(out, parents=parents, backward_fn=backward, name="conv2d")


# ---------------------------------------------------------------------------
# pooling


@dataclass(frozen=True)
class PoolIndices:
    """Flat ``row * W + col`` position of each 2x2 window maximum."""

    flat: np.ndarray
    in_shape: tuple[int, int]

    def validate(self):
        h, w = self.in_shape
        ho, wo = self.flat.shape[-2:]
        if (ho, wo) != (h // 2, w // 2):
            raise IndexOutOfWindow(f"index grid {ho}x{wo} does not match input {h}x{w}")
        rows, cols = np.divmod(self.flat, w)
        ii = np.arange(ho)[:, None]
        jj = np.arange(wo)[None, :]
        if np.any(self.flat < 0) or np.any(rows // 2 != ii) or np.any(cols // 2 != jj):
            raise IndexOutOfWindow("pool index lies outside its 2x2 source window")


def maxpool2d(x: Tensor) -> tuple[Tensor, PoolIndices]:
    """2x2/stride-2 max pool; ties go to the first element in row-major order."""
    _require_4d(x, "maxpool2d")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"maxpool2d needs even spatial size, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    k = win.argmax(axis=-1)
    out = np.take_along_axis(win, k[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(k, 2)
    flat = (2 * np.arange(ho)[:, None] + di) * w + 2 * np.arange(wo)[None, :] + dj
    idx = PoolIndices(flat, (h, w))

    def backward(g):
        dx = np.zeros((n, c, h * w))
        np.put_along_axis(dx, flat.reshape(n, c, -1), g.reshape(n, c, -1), axis=-1)
        return (dx.reshape(n, c, h, w),)

    return Tensor(out, parents=(x,), backward_fn=backward, name="maxpool2d"), idx


def max_unpool2d(y: Tensor, idx: PoolIndices, out_shape: tuple[int, int] | None = None) -> Tensor:
    """Scatter pooled values back to their recorded positions, zeros elsewhere."""
    _require_4d(y, "max_unpool2d")
    h, w = idx.in_shape if out_shape is None else out_shape
    if (h, w) != idx.in_shape or y.shape != idx.flat.shape:
        raise ShapeMismatch(f"max_unpool2d: values {y.shape}, indices {idx.flat.shape} for {idx.in_shape}")
    idx.validate()
    n, c = y.shape[:2]
    flat = idx.flat.reshape(n, c, -1)
    out = np.zeros((n, c, h * w))
    np.put_along_axis(out, flat, y.data.reshape(n, c, -1), axis=-1)

    def backward(g):
        return (np.take_along_axis(g.reshape(n, c, -1), flat, axis=-1).reshape(y.shape),)

    return Tensor(out.reshape(n, c, h, w), parents=(y,), backward_fn=backward, name="max_unpool2d")


# ---------------------------------------------------------------------------
# resampling and merging


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation weights (half-pixel centers, edge clamped) as an ``n_out x n_in`` matrix."""
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] += 1 - frac
    m[np.arange(n_out), i1] += frac
    return m


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    _require_4d(x, "upsample_bilinear")
    h, w = x.shape[2:]
    if (h, w) == tuple(size):
        return x
    ah, aw = bilinear_matrix(h, size[0]), bilinear_matrix(w, size[1])
    out = ah @ x.data @ aw.T

    def backward(g):
        return (ah.T @ g @ aw,)

    return Tensor(out, parents=(x,), backward_fn=backward, name="upsample_bilinear")


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, parents=tuple(tensors), backward_fn=backward, name="concat")


# ---------------------------------------------------------------------------
# activations and normalization


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor(x.data * mask, parents=(x,), backward_fn=lambda g: (g * mask,), name="relu")


def stable_sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.data)
    return Tensor(s, parents=(x,), backward_fn=lambda g: (g * s * (1 - s),), name="sigmoid")


class BatchNormState:
    """Running statistics of one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization; batch statistics in training, running statistics in eval."""
    _require_4d(x, "batchnorm2d")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.running_mean.shape != (c,):
        raise ShapeMismatch(f"batchnorm2d: {c} channels vs gamma {gamma.shape}, beta {beta.shape}")
    bc = (None, slice(None), None, None)
    if training:
        m = x.data.size // c
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean = (1 - mom) * state.running_mean + mom * mean
        state.running_var = (1 - mom) * state.running_var + mom * var * (m / max(m - 1, 1))
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean[bc]) * inv_std[bc]
    out = gamma.data[bc] * xhat + beta.data[bc]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[bc]
        if training:
            mean_d = dxhat.mean(axis=(0, 2, 3))[bc]
            mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3))[bc]
            dx = inv_std[bc] * (dxhat - mean_d - xhat * mean_dx)
        else:
            dx = dxhat * inv_std[bc]
        return dx, dgamma, dbeta

    return Tensor(out, parents=(x, gamma, beta), backward_fn=backward, name="batchnorm2d")


# ---------------------------------------------------------------------------
# loss


def bce_with_logits(f: Tensor, y) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(f)`` against binary targets ``y``."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != f.shape:
        raise ShapeMismatch(f"bce: logits {f.shape} vs targets {y.shape}")
    z = f.data
    per_pixel = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def backward(g):
        return (g * (stable_sigmoid(z) - y) / n,)

    return Tensor(per_pixel.mean(), parents=(f,), backward_fn=backward, name="bce")
