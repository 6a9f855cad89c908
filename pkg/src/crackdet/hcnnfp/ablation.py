"""Paired with/without feature-preserving-branch comparison over seeds."""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from ..evaluation import build_report
from ..imagecore import ProbabilityMap
from ..metrics import BetaRange, image_row
from ..thresholding import ThresholdConfig, binarize
from .network import HCNNFP, NetworkConfig
from .training import Dataset, TrainConfig, desk_preset, train

log = logging.getLogger(__name__)

VARIANTS = ("fpb_on", "fpb_off")


def probability_maps(net: HCNNFP, data: Dataset) -> list[tuple[str, ProbabilityMap, object]]:
    probs = net.predict(data.images)
    return [(stem, ProbabilityMap(probs[i]), gt) for i, (stem, _, gt) in enumerate(data.pairs())]


def ablate_fpb(train_set: Dataset, test_set: Dataset, seeds=(0, 1, 2),
               net_cfg: NetworkConfig = NetworkConfig(), train_cfg: TrainConfig | None = None,
               method: str = "cbat", thr_cfg: ThresholdConfig = ThresholdConfig(),
               rng: BetaRange = BetaRange()) -> dict:
    """Train both variants once per seed and score them on ``test_set``.

    Rows carry ``variant`` and ``seed`` columns; ``aggregate`` holds the
    per-variant mean over all seeds and images, and ``per_seed`` the mean
    AF for each (variant, seed) pair.
    """
    train_cfg = train_cfg or desk_preset()
    rows, per_seed = [], []
    for seed in seeds:
        for variant in VARIANTS:
            cfg = replace(net_cfg, fpb_enabled=variant == "fpb_on", seed=seed)
            net = HCNNFP(cfg)
            res = train(net, train_set, replace(train_cfg, seed=seed))
            log.info("%s seed %d: %d steps, %s", variant, seed, res.steps, res.stop_reason)
            seed_rows = []
            for stem, pmap, gt in probability_maps(net, test_set):
                pred, thr = binarize(pmap, method, thr_cfg)
                row = image_row(stem, pred, gt, rng)
                row.update(method=variant, variant=variant, seed=seed, threshold=thr)
                seed_rows.append(row)
            rows.extend(seed_rows)
            per_seed.append({"variant": variant, "seed": seed, "steps": res.steps,
                             "af_beta": float(np.mean([r["af_beta"] for r in seed_rows]))})
    report = build_report(rows, VARIANTS, rng)
    report["binarizer"] = method
    report["per_seed"] = per_seed
    return report
