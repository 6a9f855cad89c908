"""Synthetic crack images with exact masks.

Dark random polyline strokes are drawn over a smooth light texture. The
stroke length is budgeted from ``crack_ratio`` so masks stay heavily
imbalanced (a few percent crack pixels), the regime where picking a
threshold for the probability map matters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

from .errors import IoFailure
from .imagecore import GrayImage, GroundTruthMask, save_binary_map, save_gray

_SEGMENT_PX = 6.0


@dataclass(frozen=True)
class SyntheticSpec:
    count: int = 250
    size: int = 64
    strokes: tuple[int, int] = (1, 3)
    width: tuple[int, int] = (1, 3)
    crack_ratio: float = 0.02
    texture_amplitude: float = 0.06
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.crack_ratio < 0.5:
            raise ValueError("crack_ratio must lie in (0, 0.5)")
        if self.width[0] < 1 or self.width[0] > self.width[1]:
            raise ValueError("stroke width range must satisfy 1 <= lo <= hi")
        if self.strokes[0] < 0 or self.strokes[0] > self.strokes[1]:
            raise ValueError("stroke count range must satisfy 0 <= lo <= hi")
        if self.count < 0 or self.size < 1:
            raise ValueError("count must be >= 0 and size >= 1")


def _polyline(rng, size, length):
    margin = size * 0.15
    pos = rng.uniform(margin, size - margin, 2)
    angle = rng.uniform(0, 2 * math.pi)
    points = [tuple(pos)]
    travelled = 0.0
    while travelled < length:
        angle += rng.normal(0, 0.35)
        step = min(_SEGMENT_PX, length - travelled)
        nxt = pos + step * np.array([math.cos(angle), math.sin(angle)])
        # reflect off the borders so the stroke budget stays inside the image
        for d in range(2):
            if not 0 <= nxt[d] <= size - 1:
                angle = math.pi - angle if d == 0 else -angle
                nxt[d] = min(max(nxt[d], 0), size - 1)
        pos = nxt
        points.append(tuple(pos))
        travelled += step
    return points


def make_sample(spec: SyntheticSpec, index: int) -> tuple[GrayImage, GroundTruthMask]:
    rng = np.random.default_rng([spec.seed, index])
    n = spec.size
    texture = gaussian_filter(rng.normal(size=(n, n)), 1.5)
    texture /= texture.std() or 1.0
    yy, xx = np.mgrid[0:n, 0:n] / max(n - 1, 1)
    tilt = rng.uniform(-0.05, 0.05, 2)
    background = rng.uniform(0.55, 0.75) + spec.texture_amplitude * texture + tilt[0] * yy + tilt[1] * xx

    canvas = Image.new("L", (n, n), 0)
    draw = ImageDraw.Draw(canvas)
    n_strokes = int(rng.integers(spec.strokes[0], spec.strokes[1] + 1))
    budget = spec.crack_ratio * n * n
    for _ in range(n_strokes):
        width = int(rng.integers(spec.width[0], spec.width[1] + 1))
        length = budget / (n_strokes * width) * rng.uniform(0.8, 1.2)
        draw.line(_polyline(rng, n, length), fill=255, width=width, joint="curve")
    mask = (np.asarray(canvas) > 0).astype(np.uint8)

    depth = rng.uniform(0.25, 0.4)
    image = background - depth * mask + rng.normal(0, spec.noise_sigma, (n, n))
    image = np.round(np.clip(image, 0, 1) * 255) / 255
    return GrayImage(image), GroundTruthMask(mask)


def generate(spec: SyntheticSpec) -> list[tuple[str, GrayImage, GroundTruthMask]]:
    return [(f"syn_{i:04d}", *make_sample(spec, i)) for i in range(spec.count)]


def write_dataset(spec: SyntheticSpec, out_dir) -> list[str]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"{out}: {exc}") from exc
    stems = []
    for stem, img, mask in generate(spec):
        save_gray(img, out / f"{stem}.png")
        save_binary_map(mask, out / f"{stem}.mask.png")
        stems.append(stem)
    return stems
