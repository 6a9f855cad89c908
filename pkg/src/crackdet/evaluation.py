"""Side-by-side binarizer comparison and report assembly."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from .errors import EmptySample
from .imagecore import BinaryMap, GroundTruthMask, ProbabilityMap
from .metrics import REPORT_FIELDS, BetaRange, aggregate_rows, image_row
from .thresholding import ThresholdConfig, binarize

COMPARISON_METHODS = ("fixed", "ittt", "cat", "cbat")
CSV_FIELDS = ("method",) + REPORT_FIELDS + ("threshold",)


def _evaluate_one(item, methods, cfg, rng):
    image_id, pmap, gt = item
    rows = []
    for method in methods:
        pred, thr = binarize(pmap, method, cfg)
        row = image_row(image_id, pred, gt, rng)
        row["method"] = method
        row["threshold"] = thr
        rows.append(row)
    return rows


def compare_binarizers(items: list[tuple[str, ProbabilityMap, GroundTruthMask]],
                       methods=COMPARISON_METHODS, cfg: ThresholdConfig = ThresholdConfig(),
                       rng: BetaRange = BetaRange(), workers: int = 1, pooled: bool = False) -> dict:
    """Binarize every map with every method and score it against its mask."""
    items = sorted(items, key=lambda it: it[0])
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            per_image = list(pool.map(lambda it: _evaluate_one(it, methods, cfg, rng), items))
    else:
        per_image = [_evaluate_one(it, methods, cfg, rng) for it in items]
    rows = [r for group in per_image for r in group]
    return build_report(rows, methods, rng, pooled)


def evaluate_binary(items: list[tuple[str, BinaryMap, GroundTruthMask]], label: str = "given",
                    rng: BetaRange = BetaRange(), pooled: bool = False) -> dict:
    """Score already-binarized predictions."""
    rows = []
    for image_id, pred, gt in sorted(items, key=lambda it: it[0]):
        row = image_row(image_id, pred, gt, rng)
        row["method"] = label
        row["threshold"] = None
        rows.append(row)
    return build_report(rows, (label,), rng, pooled)


def build_report(rows: list[dict], methods, rng: BetaRange, pooled: bool = False) -> dict:
    return {
        "beta_range": [rng.beta2_lo, rng.beta2_hi],
        "aggregation": "pooled" if pooled else "mean",
        "methods": list(methods),
        "images": rows,
        "aggregate": {m: aggregate_rows([r for r in rows if r["method"] == m], pooled, rng)
                      for m in methods},
    }


def rows_for(report: dict, method: str) -> list[dict]:
    return [r for r in report["images"] if r["method"] == method]


def write_report(report: dict, out_dir, stem: str = "report") -> dict[str, Path]:
    """Write ``<stem>.json`` and a flat ``<stem>.csv`` with identical columns."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = out / f"{stem}.json", out / f"{stem}.csv"
    json_path.write_text(json.dumps(report, indent=2))
    extra = [k for k in ("variant", "seed") if any(k in r for r in report["images"])]
    fields = list(CSV_FIELDS) + extra
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in report["images"]:
            writer.writerow(row)
        for method, agg in report["aggregate"].items():
            writer.writerow({**agg, "method": method, "id": "aggregate"})
    return {"json": json_path, "csv": csv_path}


def calibrate_contrast_stop(items, grid, cfg: ThresholdConfig = ThresholdConfig(),
                            rng: BetaRange = BetaRange()) -> tuple[float, list[dict]]:
    """Pick the CBAT contrast stop with the highest mean AF over labeled maps.

    Returns the winning value (the first one on ties) and the sweep table.
    """
    if not items:
        raise EmptySample("calibration needs at least one probability map with a mask")
    grid = [float(g) for g in grid]
    if not grid:
        raise EmptySample("calibration grid is empty")
    table = []
    for cs in grid:
        trial = replace(cfg, contrast_stop=cs)
        scores = [image_row(i, binarize(pm, "cbat", trial)[0], gt, rng)["af_beta"] for i, pm, gt in items]
        table.append({"contrast_stop": cs, "mean_af_beta": sum(scores) / len(scores)})
    best = max(table, key=lambda r: r["mean_af_beta"])
    return best["contrast_stop"], table
