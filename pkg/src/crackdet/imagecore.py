"""Image, mask and probability-map containers, file I/O and histograms.

All maps wrap a read-only 2-D ``numpy`` array of shape ``(height, width)``.
Probability maps are stored on disk either as grayscale images or in the
QPM1 raw format::

    b"QPM1" | width u32 | height u32 | reserved u32 (0) | float32[width*height]

(little-endian, row-major).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CorruptFile, IoFailure, NonFiniteValue, UnsupportedFormat

N_BINS = 256
QPM_MAGIC = b"QPM1"
_QPM_HEADER = struct.Struct("<4sIII")


def _frozen(data, dtype) -> np.ndarray:
    arr = np.array(data, dtype=dtype, copy=True)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class _Map:
    data: np.ndarray

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other):
        return (type(self) is type(other)
                and self.data.shape == other.data.shape
                and bool(np.array_equal(self.data, other.data)))

    __hash__ = None


class GrayImage(_Map):
    """Grayscale intensities normalized to [0, 1]."""

    def __init__(self, data):
        arr = _frozen(data, np.float64)
        if not np.all(np.isfinite(arr)) or arr.min(initial=0.0) < 0 or arr.max(initial=0.0) > 1:
            raise ValueError("GrayImage values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)


class ProbabilityMap(_Map):
    """Per-pixel crack probability in [0, 1]."""

    def __init__(self, data):
        arr = _frozen(data, np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue("probability map contains NaN or Inf")
        if arr.size and (arr.min() < 0 or arr.max() > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "data", arr)


class BinaryMap(_Map):
    """Binary labels, 1 = crack."""

    def __init__(self, data):
        arr = _frozen(data, np.uint8)
        if np.any(arr > 1):
            raise ValueError("binary map values must be 0 or 1")
        if not np.array_equal(arr, np.asarray(data)):
            raise ValueError("binary map values must be exactly 0 or 1")
        object.__setattr__(self, "data", arr)


class GroundTruthMask(BinaryMap):
    """Annotated crack mask: 1 for an abnormal pixel, 0 otherwise."""


@dataclass(frozen=True, eq=False)
class Histogram:
    """256-bin probability histogram restricted to bins ``lo..=hi``.

    ``bins`` keeps counts for the full [0, 1] range; ``total`` is the mass
    inside the active window.
    """

    bins: np.ndarray
    lo: int = 0
    hi: int = N_BINS - 1

    def __post_init__(self):
        bins = np.array(self.bins, dtype=np.int64, copy=True)
        if bins.shape != (N_BINS,):
            raise ValueError(f"histogram needs {N_BINS} bins, got {bins.shape}")
        if np.any(bins < 0):
            raise ValueError("histogram counts must be non-negative")
        if not 0 <= self.lo <= self.hi <= N_BINS - 1:
            raise ValueError(f"invalid bin window [{self.lo}, {self.hi}]")
        bins.setflags(write=False)
        object.__setattr__(self, "bins", bins)

    @property
    def total(self) -> int:
        return int(self.bins[self.lo:self.hi + 1].sum())

    @property
    def window(self) -> np.ndarray:
        return self.bins[self.lo:self.hi + 1]

    def occupied(self) -> np.ndarray:
        """Indices of non-empty bins inside the window."""
        return np.flatnonzero(self.window) + self.lo

    def roi(self, lo: int, hi: int | None = None) -> "Histogram":
        return Histogram(self.bins, lo, self.hi if hi is None else hi)


def bin_index(p) -> np.ndarray:
    """Bin of each probability: ``floor(256 p)``, with 1.0 closed into bin 255."""
    idx = np.floor(np.asarray(p, dtype=np.float64) * N_BINS).astype(np.int64)
    return np.clip(idx, 0, N_BINS - 1)


def bin_midpoints() -> np.ndarray:
    return (np.arange(N_BINS) + 0.5) / N_BINS


def build_histogram(pmap: ProbabilityMap) -> Histogram:
    counts = np.bincount(bin_index(pmap.data).ravel(), minlength=N_BINS)
    return Histogram(counts)


# ---------------------------------------------------------------------------
# file I/O


def _open_image(path) -> Image.Image:
    path = Path(path)
    try:
        im = Image.open(path)
        im.load()
    except FileNotFoundError:
        raise
    except UnidentifiedImageError as exc:
        # Pillow cannot tell a truncated PNG from an unknown format.
        with open(path, "rb") as fh:
            head = fh.read(8)
        if head.startswith(b"\x89PNG") or head[:2] in (b"P2", b"P5"):
            raise CorruptFile(f"{path}: {exc}") from exc
        raise UnsupportedFormat(f"{path}: {exc}") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    if im.format not in ("PNG", "PPM"):
        raise UnsupportedFormat(f"{path}: format {im.format} is not PNG/PGM")
    return im


def _normalized_pixels(im: Image.Image, path) -> np.ndarray:
    if im.mode in ("L", "1"):
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    if im.mode in ("I;16", "I;16B", "I;16L", "I"):
        # Pillow rescales non-standard PGM maxvals to the 16-bit range.
        return np.asarray(im, dtype=np.float64) / 65535.0
    raise UnsupportedFormat(f"{path}: image mode {im.mode} is not grayscale")


def load_gray(path) -> GrayImage:
    im = _open_image(path)
    return GrayImage(np.clip(_normalized_pixels(im, path), 0.0, 1.0))


def load_mask(path) -> GroundTruthMask:
    """Load an annotation image; any pixel above half scale is a crack."""
    im = _open_image(path)
    return GroundTruthMask((_normalized_pixels(im, path) > 0.5).astype(np.uint8))


def save_qpm(pmap: ProbabilityMap, path) -> None:
    payload = np.ascontiguousarray(pmap.data, dtype="<f4")
    try:
        with open(path, "wb") as fh:
            fh.write(_QPM_HEADER.pack(QPM_MAGIC, pmap.width, pmap.height, 0))
            fh.write(payload.tobytes())
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def _load_qpm(raw: bytes, path) -> ProbabilityMap:
    if len(raw) < _QPM_HEADER.size:
        raise CorruptFile(f"{path}: truncated QPM1 header")
    magic, width, height, reserved = _QPM_HEADER.unpack_from(raw)
    if reserved != 0:
        raise CorruptFile(f"{path}: reserved QPM1 field is {reserved}, expected 0")
    expected = _QPM_HEADER.size + 4 * width * height
    if len(raw) != expected:
        raise CorruptFile(f"{path}: QPM1 payload is {len(raw)} bytes, expected {expected}")
    values = np.frombuffer(raw, dtype="<f4", offset=_QPM_HEADER.size).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue(f"{path}: QPM1 payload contains NaN or Inf")
    return ProbabilityMap(np.clip(values.reshape(height, width), 0.0, 1.0))


def load_probability_map(path) -> ProbabilityMap:
    """Read a QPM1 file or a grayscale image (value / format max)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] == QPM_MAGIC:
        return _load_qpm(raw, path)
    return ProbabilityMap(load_gray(path).data)


def save_binary_map(bmap: BinaryMap, path) -> None:
    """Write an 8-bit PNG with crack = 255 and background = 0."""
    pixels = (bmap.data * 255).astype(np.uint8)
    try:
        Image.fromarray(pixels).save(path, format="PNG")
    except (OSError, ValueError) as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def load_binary_map(path) -> BinaryMap:
    return BinaryMap(load_mask(path).data)


def save_gray(img: GrayImage, path) -> None:
    pixels = np.round(img.data * 255).astype(np.uint8)
    try:
        Image.fromarray(pixels).save(path, format="PNG")
    except (OSError, ValueError) as exc:
        raise IoFailure(f"{path}: {exc}") from exc
