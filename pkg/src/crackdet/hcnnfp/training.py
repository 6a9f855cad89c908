"""Mini-batch Adam training with relative-loss early stopping."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff.checkpoint import save_checkpoint
from ..autodiff.optim import AdamState, adam_step
from ..errors import DatasetEmpty, NonFiniteLoss, ShapeMismatch
from ..imagecore import GrayImage, GroundTruthMask, load_gray, load_mask
from .network import HCNNFP, training_objective

log = logging.getLogger(__name__)

MASK_SUFFIX = ".mask.png"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    max_epochs: int = 30
    early_stop_delta: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    max_steps: int | None = None
    validation_stop: bool = False

    def __post_init__(self):
        if self.lr < 0 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("lr must be >= 0, max_epochs and batch_size >= 1")
        if not 0.0 < self.early_stop_delta < 1.0:
            raise ValueError("early_stop_delta must lie in (0, 1)")


# Learning rate used for the synthetic desk-scale runs. The reference rate of
# 1e-5 barely moves the loss in 30 epochs on 200 small images.
DESK_LR = 1e-3


def desk_preset(**overrides) -> TrainConfig:
    return TrainConfig(**{"lr": DESK_LR, **overrides})


@dataclass
class Dataset:
    ids: list[str]
    images: np.ndarray  # (N, 1, H, W)
    masks: np.ndarray   # (N, 1, H, W), 0/1

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_pairs(cls, pairs) -> "Dataset":
        pairs = list(pairs)
        if not pairs:
            raise DatasetEmpty("dataset has no image/mask pairs")
        shapes = {img.shape for _, img, _ in pairs} | {m.shape for _, _, m in pairs}
        if len(shapes) != 1:
            raise ShapeMismatch(f"dataset mixes image/mask shapes {sorted(shapes)}")
        return cls(ids=[p[0] for p in pairs],
                   images=np.stack([p[1].data for p in pairs])[:, None].astype(np.float64),
                   masks=np.stack([p[2].data for p in pairs])[:, None].astype(np.float64))

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset([self.ids[i] for i in idx], self.images[idx], self.masks[idx])

    def pairs(self):
        for i, stem in enumerate(self.ids):
            yield stem, GrayImage(self.images[i, 0]), GroundTruthMask(self.masks[i, 0].astype(np.uint8))


def load_dataset(directory) -> Dataset:
    """Read ``<stem>.png`` + ``<stem>.mask.png`` pairs, sorted by stem."""
    directory = Path(directory)
    pairs = []
    for mask_path in sorted(directory.glob(f"*{MASK_SUFFIX}")):
        stem = mask_path.name[:-len(MASK_SUFFIX)]
        img_path = directory / f"{stem}.png"
        if not img_path.exists():
            log.warning("mask %s has no image, skipped", mask_path.name)
            continue
        pairs.append((stem, load_gray(img_path), load_mask(mask_path)))
    if not pairs:
        raise DatasetEmpty(f"{directory}: no <stem>.png / <stem>{MASK_SUFFIX} pairs")
    return Dataset.from_pairs(pairs)


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    steps: int = 0
    stop_reason: str = ""
    step_losses: list[float] = field(default_factory=list)


def evaluate_objective(net: HCNNFP, data: Dataset, batch_size: int = 8) -> float:
    total = 0.0
    for s in range(0, len(data), batch_size):
        outs = net.forward(data.images[s:s + batch_size], training=False)
        total += training_objective(outs, data.masks[s:s + batch_size]).item() * len(data.images[s:s + batch_size])
    return total / len(data)


def train(net: HCNNFP, data: Dataset, tcfg: TrainConfig = TrainConfig(), *, val: Dataset | None = None,
          log_path=None, checkpoint_path=None) -> TrainResult:
    """Optimize ``net`` in place.

    Stops after ``max_epochs``, after ``max_steps`` optimizer steps, or when
    the epoch loss falls by less than ``early_stop_delta`` (relative) from the
    previous epoch without rising. With ``validation_stop`` the held-out objective drives
    that test instead of the training loss.
    """
    if len(data) == 0:
        raise DatasetEmpty("cannot train on an empty dataset")
    rng = np.random.default_rng(tcfg.seed)
    params = list(net.params.values())
    state = AdamState.for_params([p.data for p in params], lr=tcfg.lr,
                                 beta1=tcfg.betas[0], beta2=tcfg.betas[1])
    result = TrainResult()
    log_fh = open(log_path, "w") if log_path else None
    prev = None
    try:
        for epoch in range(1, tcfg.max_epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(data))
            running, seen = 0.0, 0
            for s in range(0, len(order), tcfg.batch_size):
                batch = order[s:s + tcfg.batch_size]
                for p in params:
                    p.zero_grad()
                outs = net.forward(data.images[batch], training=True)
                loss = training_objective(outs, data.masks[batch])
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteLoss(f"loss became {value} at epoch {epoch}, step {result.steps + 1}")
                loss.backward()
                adam_step([p.data for p in params], [p.grad for p in params], state)
                result.steps += 1
                result.step_losses.append(value)
                running += value * len(batch)
                seen += len(batch)
                if tcfg.max_steps is not None and result.steps >= tcfg.max_steps:
                    break
            epoch_loss = running / seen
            record = {"epoch": epoch, "loss": epoch_loss,
                      "wall_ms": round((time.perf_counter() - t0) * 1000, 1)}
            monitored = epoch_loss
            if val is not None:
                record["val_loss"] = evaluate_objective(net, val)
                if tcfg.validation_stop:
                    monitored = record["val_loss"]
            result.log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            log.info("epoch %d loss %.6f", epoch, epoch_loss)

            if tcfg.max_steps is not None and result.steps >= tcfg.max_steps:
                result.stop_reason = "max_steps"
                break
            # an epoch whose loss went up is not a small reduction, so it does not stop training
            if prev is not None and 0.0 <= (prev - monitored) / prev < tcfg.early_stop_delta:
                result.stop_reason = "early_stop"
                break
            prev = monitored
        else:
            result.stop_reason = "max_epochs"
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path is not None:
        save_checkpoint(net.state_arrays(), checkpoint_path)
    return result
