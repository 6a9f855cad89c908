"""Clip-by-clip inference over images larger than the network input."""

from __future__ import annotations

import numpy as np

from ..errors import WindowTooSmall
from ..imagecore import GrayImage, ProbabilityMap
from .network import MIN_INPUT, HCNNFP


def window_starts(length: int, window: int, stride: int) -> list[int]:
    """Window offsets along one axis; the last window is flush with the far edge."""
    if length <= window:
        return [0]
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] != length - window:
        starts.append(length - window)
    return starts


def sliding_window_infer(net: HCNNFP, image: GrayImage, window: int, stride: int) -> ProbabilityMap:
    """Run ``net`` on overlapping square windows and average the overlaps."""
    if window < net.cfg.input_size or window % MIN_INPUT:
        raise WindowTooSmall(f"window {window} must be >= the network input {net.cfg.input_size} "
                             f"and a multiple of {MIN_INPUT}")
    if not 0 < stride <= window:
        raise WindowTooSmall(f"stride {stride} must lie in (0, window]")
    h, w = image.shape
    if h < window or w < window:
        raise WindowTooSmall(f"image {h}x{w} is smaller than the {window}px window")
    acc = np.zeros((h, w))
    hits = np.zeros((h, w))
    for i in window_starts(h, window, stride):
        for j in window_starts(w, window, stride):
            clip = image.data[i:i + window, j:j + window]
            acc[i:i + window, j:j + window] += net.predict(clip)[0]
            hits[i:i + window, j:j + window] += 1
    return ProbabilityMap(acc / hits)
