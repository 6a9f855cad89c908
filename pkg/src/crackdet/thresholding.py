"""Binarization of probability maps.

Every threshold-search routine works on a :class:`~crackdet.imagecore.Histogram`
and returns a real threshold ``T``; :func:`apply_threshold` then labels a
pixel as crack iff ``p > T``.

Available methods: fixed, Otsu, CBAT (contrast-based autotuned thresholding:
Otsu repeated on a shrinking high-probability region until the interclass
contrast exceeds ``contrast_stop``), ITTT (isodata iterative-mean) and CAT
(min-max histogram stretch followed by Otsu).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import BothMeansZero, DegenerateHistogram, ThresholdOutOfRange
from .imagecore import N_BINS, BinaryMap, Histogram, ProbabilityMap, bin_midpoints, build_histogram

METHODS = ("fixed", "otsu", "ittt", "cat", "cbat")

_ITTT_MAX_STEPS = 1000


@dataclass(frozen=True)
class ThresholdConfig:
    contrast_stop: float = 0.90
    max_iterations: int = 16
    ittt_epsilon: float = 1e-3
    fixed_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.contrast_stop < 1.0:
            raise ValueError(f"contrast_stop must lie in (0, 1), got {self.contrast_stop}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.ittt_epsilon <= 0:
            raise ValueError("ittt_epsilon must be positive")
        if not 0.0 < self.fixed_threshold < 1.0:
            raise ValueError("fixed_threshold must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdConfig":
        keys = ("contrast_stop", "max_iterations", "ittt_epsilon", "fixed_threshold")
        return cls(**{k: d[k] for k in keys if k in d})


class Termination(enum.Enum):
    CONTRAST_REACHED = "ContrastReached"
    ITERATION_CAP = "IterationCap"
    DEGENERATE_ROI = "DegenerateRoi"


@dataclass
class CbatTrace:
    thresholds: list[float] = field(default_factory=list)
    contrasts: list[float] = field(default_factory=list)
    roi_means: list[float] = field(default_factory=list)
    background_means: list[float] = field(default_factory=list)
    terminated_by: Termination | None = None

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "contrasts": list(self.contrasts),
            "roi_means": list(self.roi_means),
            "background_means": list(self.background_means),
            "terminated_by": self.terminated_by.value if self.terminated_by else None,
        }


def _require_two_classes(h: Histogram, what: str) -> np.ndarray:
    occ = h.occupied()
    if occ.size < 2:
        raise DegenerateHistogram(f"{what}: histogram window [{h.lo}, {h.hi}] has {occ.size} occupied bin(s)")
    return occ


def otsu_split_bin(h: Histogram) -> int:
    """Split bin ``b`` in ``[lo, hi-1]`` maximizing between-class variance.

    Class 0 holds bins ``lo..=b``. The comparison runs in exact integer
    arithmetic so ties resolve to the smallest ``b`` reliably.
    """
    _require_two_classes(h, "otsu")
    counts = [int(c) for c in h.window]
    # bin value (2i + 1) is proportional to the midpoint; the scale drops out of the argmax
    values = [2 * (h.lo + k) + 1 for k in range(len(counts))]
    n_all = sum(counts)
    s_all = sum(c * v for c, v in zip(counts, values))

    best_b, best_num, best_den = None, -1, 1
    n0 = s0 = 0
    for k in range(len(counts) - 1):
        n0 += counts[k]
        s0 += counts[k] * values[k]
        n1 = n_all - n0
        if n0 == 0 or n1 == 0:
            continue
        s1 = s_all - s0
        # n0*n1*(mu0 - mu1)^2 == (n1*s0 - n0*s1)^2 / (n0*n1)
        num = (n1 * s0 - n0 * s1) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_b, best_num, best_den = h.lo + k, num, den
    return best_b


def split_to_threshold(b: int) -> float:
    return (b + 1) / N_BINS


def otsu_threshold(h: Histogram) -> float:
    return split_to_threshold(otsu_split_bin(h))


def _window_mean(h: Histogram, lo: int, hi: int) -> float:
    counts = h.bins[lo:hi + 1]
    mids = bin_midpoints()[lo:hi + 1]
    return float(np.dot(counts, mids) / counts.sum())


def interclass_contrast(mu_roi: float, mu_b: float) -> float:
    if mu_roi < 0 or mu_b < 0:
        raise ValueError("class means must be non-negative")
    if mu_roi + mu_b == 0:
        raise BothMeansZero("interclass contrast undefined when both means are zero")
    return abs(mu_roi - mu_b) / (mu_roi + mu_b)


def cbat_threshold(h: Histogram, cfg: ThresholdConfig = ThresholdConfig()) -> tuple[float, CbatTrace]:
    """Contrast-based autotuned threshold and its iteration trace."""
    _require_two_classes(h, "cbat")
    trace = CbatTrace()
    roi = h
    while True:
        b = otsu_split_bin(roi)
        mu_roi = _window_mean(roi, b + 1, roi.hi)
        mu_b = _window_mean(roi, roi.lo, b)
        contrast = interclass_contrast(mu_roi, mu_b)
        trace.thresholds.append(split_to_threshold(b))
        trace.contrasts.append(contrast)
        trace.roi_means.append(mu_roi)
        trace.background_means.append(mu_b)

        roi = roi.roi(b + 1)
        if contrast > cfg.contrast_stop:
            trace.terminated_by = Termination.CONTRAST_REACHED
        elif len(trace.thresholds) >= cfg.max_iterations:
            trace.terminated_by = Termination.ITERATION_CAP
        elif roi.occupied().size < 2:
            trace.terminated_by = Termination.DEGENERATE_ROI
        else:
            continue
        return trace.thresholds[-1], trace


def ittt_threshold(h: Histogram, cfg: ThresholdConfig = ThresholdConfig()) -> float:
    """Isodata: move T to the mean of the two class means until it settles."""
    _require_two_classes(h, "ittt")
    counts = h.window.astype(np.float64)
    mids = bin_midpoints()[h.lo:h.hi + 1]
    t = float(np.dot(counts, mids) / counts.sum())
    for _ in range(_ITTT_MAX_STEPS):
        low = mids <= t
        m0 = np.dot(counts[low], mids[low]) / counts[low].sum()
        m1 = np.dot(counts[~low], mids[~low]) / counts[~low].sum()
        t_next = float((m0 + m1) / 2)
        if abs(t_next - t) < cfg.ittt_epsilon:
            return t_next
        t = t_next
    return t


def cat_threshold(h: Histogram) -> float:
    """Stretch the occupied bin range onto all 256 bins, run Otsu, map back."""
    occ = _require_two_classes(h, "cat")
    a, b = int(occ[0]), int(occ[-1])
    width = b - a + 1
    src = np.arange(a, b + 1)
    dst = np.floor((src - a + 0.5) * N_BINS / width).astype(np.int64)
    stretched = np.zeros(N_BINS, dtype=np.int64)
    np.add.at(stretched, dst, h.bins[a:b + 1])
    t_stretched = otsu_threshold(Histogram(stretched))
    return (a + t_stretched * width) / N_BINS


def apply_threshold(pmap: ProbabilityMap, t: float) -> BinaryMap:
    if not 0.0 < t < 1.0:
        raise ThresholdOutOfRange(f"threshold {t} outside (0, 1)")
    return BinaryMap((pmap.data > t).astype(np.uint8))


def find_threshold(pmap: ProbabilityMap, method: str, cfg: ThresholdConfig = ThresholdConfig(),
                   t: float | None = None) -> float:
    """Threshold chosen by ``method`` for ``pmap``; ``t`` overrides the fixed value."""
    if method == "fixed":
        return cfg.fixed_threshold if t is None else t
    h = build_histogram(pmap)
    if method == "otsu":
        return otsu_threshold(h)
    if method == "cbat":
        return cbat_threshold(h, cfg)[0]
    if method == "ittt":
        return ittt_threshold(h, cfg)
    if method == "cat":
        return cat_threshold(h)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def binarize(pmap: ProbabilityMap, method: str, cfg: ThresholdConfig = ThresholdConfig(),
             t: float | None = None) -> tuple[BinaryMap, float]:
    """Binarize ``pmap``. A single-class map falls back to the fixed threshold."""
    try:
        thr = find_threshold(pmap, method, cfg, t)
    except DegenerateHistogram:
        thr = cfg.fixed_threshold
    return apply_threshold(pmap, thr), thr
