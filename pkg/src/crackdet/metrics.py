"""Pixel-wise segmentation measures.

``F_beta`` weights precision against recall by ``beta2`` (= beta squared).
``AF_beta`` averages ``F_beta`` over an interval of ``beta2`` values and has
a closed form; :func:`af_numeric_oracle` integrates the definition directly
and exists to cross-check it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionMismatch, NoTruePositives, UndefinedMeasure
from .imagecore import BinaryMap


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def iou(self) -> float:
        denom = self.tp + self.fp + self.fn
        if denom == 0:
            raise UndefinedMeasure("IoU undefined with no positives in prediction or truth")
        return self.tp / denom


@dataclass(frozen=True)
class PrecisionRecall:
    precision: float
    recall: float

    def __post_init__(self):
        for name in ("precision", "recall"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @classmethod
    def from_counts(cls, c: ConfusionCounts) -> "PrecisionRecall":
        """Undefined ratios (empty prediction or empty truth) are reported as 0."""
        p = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
        r = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
        return cls(p, r)


@dataclass(frozen=True)
class BetaRange:
    beta2_lo: float = 0.25
    beta2_hi: float = 0.30

    def __post_init__(self):
        if not 0.0 < self.beta2_lo < self.beta2_hi <= 1.0:
            raise ValueError(f"need 0 < beta2_lo < beta2_hi <= 1, got ({self.beta2_lo}, {self.beta2_hi})")


def _check_shapes(pred: BinaryMap, gt: BinaryMap):
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")


def confusion(pred: BinaryMap, gt: BinaryMap) -> ConfusionCounts:
    _check_shapes(pred, gt)
    s = pred.data.astype(bool)
    y = gt.data.astype(bool)
    tp = int(np.count_nonzero(s & y))
    fp = int(np.count_nonzero(s & ~y))
    fn = int(np.count_nonzero(~s & y))
    return ConfusionCounts(tp=tp, fp=fp, tn=s.size - tp - fp - fn, fn=fn)


def f_measure(pr: PrecisionRecall, beta2: float) -> float:
    p, r = pr.precision, pr.recall
    if beta2 <= 0:
        raise ValueError("beta2 must be positive")
    if p == 0 and r == 0:
        raise UndefinedMeasure("F_beta undefined for precision = recall = 0")
    return (1 + beta2) * p * r / (beta2 * p + r)


def average_f_measure(pr: PrecisionRecall, rng: BetaRange = BetaRange()) -> float:
    """Closed-form mean of F_beta over ``beta2`` in ``[beta2_lo, beta2_hi]``."""
    p, r = pr.precision, pr.recall
    if p == 0 and r == 0:
        raise UndefinedMeasure("AF_beta undefined for precision = recall = 0")
    if p == 0:
        return 0.0
    if p == r:
        return r
    b1, b2 = rng.beta2_lo, rng.beta2_hi
    return r + (r / p) * (p - r) / (b2 - b1) * math.log((p * b2 + r) / (p * b1 + r))


def af_numeric_oracle(pr: PrecisionRecall, rng: BetaRange = BetaRange(), n_points: int = 10_001) -> float:
    """Trapezoidal integral of F_beta over the range, divided by its length."""
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    p, r = pr.precision, pr.recall
    if p == 0 and r == 0:
        raise UndefinedMeasure("AF_beta undefined for precision = recall = 0")
    x = np.linspace(rng.beta2_lo, rng.beta2_hi, n_points)
    f = (1 + x) * p * r / (x * p + r)
    h = x[1] - x[0]
    integral = h * (f.sum() - 0.5 * (f[0] + f[-1]))
    return float(integral / (rng.beta2_hi - rng.beta2_lo))


def mae(pred: BinaryMap, gt: BinaryMap) -> float:
    c = confusion(pred, gt)
    return (c.fp + c.fn) / c.total


def mape(pred: BinaryMap, gt: BinaryMap) -> float:
    """Absolute error count divided by the number of true-positive pixels."""
    c = confusion(pred, gt)
    if c.tp == 0:
        raise NoTruePositives("MAPE undefined with zero true positives")
    return (c.fp + c.fn) / c.tp


def beta_sweep(pr: PrecisionRecall, beta2_grid) -> list[tuple[float, float]]:
    grid = [float(b) for b in beta2_grid]
    if any(b <= 0 for b in grid):
        raise ValueError("beta2 grid points must be positive")
    return [(b, f_measure(pr, b)) for b in grid]


# ---------------------------------------------------------------------------
# report rows

REPORT_FIELDS = ("id", "tp", "fp", "tn", "fn", "precision", "recall",
                 "f_beta@0.25", "f_beta@0.3", "af_beta", "mae", "mape")
_MEAN_FIELDS = REPORT_FIELDS[1:]


def image_row(image_id: str, pred: BinaryMap, gt: BinaryMap, rng: BetaRange = BetaRange()) -> dict:
    """Metrics for one image in report layout.

    Undefined measures are penalized rather than raised: F and AF become 0
    and MAPE becomes ``None``; each substitution is listed under ``flags``.
    """
    c = confusion(pred, gt)
    pr = PrecisionRecall.from_counts(c)
    flags = []
    if c.tp + c.fp == 0:
        flags.append("empty_prediction")
    if c.tp + c.fn == 0:
        flags.append("empty_ground_truth")
    row = {"id": image_id, **asdict(c), "precision": pr.precision, "recall": pr.recall}
    if pr.precision == 0 and pr.recall == 0:
        flags.append("f_undefined")
        row.update({"f_beta@0.25": 0.0, "f_beta@0.3": 0.0, "af_beta": 0.0})
    else:
        row.update({"f_beta@0.25": f_measure(pr, 0.25), "f_beta@0.3": f_measure(pr, 0.3),
                    "af_beta": average_f_measure(pr, rng)})
    row["mae"] = (c.fp + c.fn) / c.total
    if c.tp == 0:
        flags.append("mape_undefined")
        row["mape"] = None
    else:
        row["mape"] = (c.fp + c.fn) / c.tp
    row["flags"] = flags
    return row


def aggregate_rows(rows: list[dict], pooled: bool = False, rng: BetaRange = BetaRange()) -> dict:
    """Dataset-level summary.

    Default is the arithmetic mean of per-image values (``None`` entries
    skipped). ``pooled=True`` instead recomputes every measure from the
    summed confusion counts.
    """
    if pooled:
        c = ConfusionCounts(*(sum(r[k] for r in rows) for k in ("tp", "fp", "tn", "fn")))
        pr = PrecisionRecall.from_counts(c)
        defined = pr.precision > 0 or pr.recall > 0
        return {
            "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn,
            "precision": pr.precision, "recall": pr.recall,
            "f_beta@0.25": f_measure(pr, 0.25) if defined else 0.0,
            "f_beta@0.3": f_measure(pr, 0.3) if defined else 0.0,
            "af_beta": average_f_measure(pr, rng) if defined else 0.0,
            "mae": (c.fp + c.fn) / c.total,
            "mape": (c.fp + c.fn) / c.tp if c.tp else None,
            "n_images": len(rows),
        }
    out = {}
    for key in _MEAN_FIELDS:
        vals = [r[key] for r in rows if r[key] is not None]
        out[key] = float(math.fsum(vals) / len(vals)) if vals else None
    out["n_images"] = len(rows)
    return out
