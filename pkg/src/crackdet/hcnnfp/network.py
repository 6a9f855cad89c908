"""Hierarchical encoder-decoder crack network with a feature-preserving branch.

Encoder: five conv+BN+ReLU blocks (2, 2, 3, 3, 3 layers; channels C, 2C,
4C, 8C, 8C), each followed by a 2x2 max-pool that records argmax indices.
With the branch enabled, blocks 1-4 hand the next block a concatenation of

* the pooled output squeezed to half its channels by a 1x1 conv, and
* a side path: stride-2 3x3 conv + BN + ReLU on the un-pooled block output,
  also at half the channels,

so the next block still receives ``C_k`` channels, half of them preserved
from the shallower scale.

Decoder: five stages, deepest first, each unpooling with the matching
encoder indices and applying the mirrored conv stack. A 1x1 conv on every
decoder stage gives a side logit map, bilinearly resized to the input size;
a 1x1 conv over the five side maps gives the fused logit map.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import ops
from ..autodiff.optim import he_init
from ..autodiff.tensor import Tensor, parameter
from ..errors import CheckpointMismatch, ConfigInvalid, ShapeMismatch
from ..imagecore import GrayImage, GroundTruthMask, ProbabilityMap

N_SCALES = 5
MIN_INPUT = 2 ** N_SCALES


@dataclass(frozen=True)
class NetworkConfig:
    block_conv_counts: tuple[int, ...] = (2, 2, 3, 3, 3)
    base_channels: int = 8
    input_size: int = 64
    fpb_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "block_conv_counts", tuple(int(c) for c in self.block_conv_counts))
        counts = self.block_conv_counts
        if len(counts) != N_SCALES or sum(counts) != 13 or min(counts) < 1:
            raise ConfigInvalid(f"need five blocks with 13 conv layers in total, got {counts}")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ConfigInvalid("base_channels must be an even number >= 2")
        if self.input_size < MIN_INPUT or self.input_size % MIN_INPUT:
            raise ConfigInvalid(f"input_size must be a positive multiple of {MIN_INPUT}")

    @property
    def channels(self) -> list[int]:
        c = self.base_channels
        return [c, 2 * c, 4 * c, 8 * c, 8 * c]

    def to_vector(self) -> np.ndarray:
        return np.array([self.base_channels, int(self.fpb_enabled), self.input_size, self.seed,
                         *self.block_conv_counts], dtype=np.float64)

    @classmethod
    def from_vector(cls, v) -> "NetworkConfig":
        v = [int(round(x)) for x in v]
        return cls(block_conv_counts=tuple(v[4:9]), base_channels=v[0], fpb_enabled=bool(v[1]),
                   input_size=v[2], seed=v[3])


@dataclass
class ForwardOutputs:
    side_maps: list[Tensor]
    fused_map: Tensor
    provenance: list[dict] = field(default_factory=list)

    @property
    def maps(self) -> list[Tensor]:
        return [self.fused_map, *self.side_maps]

    def probability(self) -> np.ndarray:
        return ops.stable_sigmoid(self.fused_map.data)


class HCNNFP:
    """Parameters, batch-norm buffers and the forward pass."""

    def __init__(self, cfg: NetworkConfig = NetworkConfig()):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, ops.BatchNormState] = {}
        ch = cfg.channels
        c_in = 1
        for k in range(N_SCALES):
            for i in range(cfg.block_conv_counts[k]):
                self._conv_bn(f"enc{k + 1}.{i}", c_in, ch[k], 3)
                c_in = ch[k]
            if cfg.fpb_enabled and k < N_SCALES - 1:
                self._conv(f"fpb{k + 1}.main", ch[k], ch[k] // 2, 1)
                self._conv_bn(f"fpb{k + 1}.side", ch[k], ch[k] // 2, 3)
        for k in reversed(range(N_SCALES)):
            n = cfg.block_conv_counts[k]
            c_out = ch[k - 1] if k > 0 else ch[0]
            for i in range(n):
                self._conv_bn(f"dec{k + 1}.{i}", ch[k], c_out if i == n - 1 else ch[k], 3)
            self._conv(f"side{k + 1}", c_out, 1, 1)
        self._conv("fuse", N_SCALES, 1, 1)

    # -- construction ---------------------------------------------------

    def _rng(self, name: str) -> np.random.Generator:
        # per-layer streams keep shared layers identical whether or not the branch exists
        return np.random.default_rng([self.cfg.seed, zlib.crc32(name.encode())])

    def _conv(self, name, c_in, c_out, k):
        fan_in = c_in * k * k
        self.params[f"{name}.w"] = parameter(he_init((c_out, c_in, k, k), fan_in, self._rng(name)), f"{name}.w")
        self.params[f"{name}.b"] = parameter(np.zeros(c_out), f"{name}.b")

    def _conv_bn(self, name, c_in, c_out, k):
        self._conv(f"{name}.conv", c_in, c_out, k)
        self.params[f"{name}.bn.gamma"] = parameter(np.ones(c_out), f"{name}.bn.gamma")
        self.params[f"{name}.bn.beta"] = parameter(np.zeros(c_out), f"{name}.bn.beta")
        self.bn[name] = ops.BatchNormState(c_out)

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def parameter_shapes(self) -> dict[str, tuple]:
        return {k: p.shape for k, p in self.params.items()}

    # -- forward --------------------------------------------------------

    def _apply_conv(self, name, x, stride=1):
        return ops.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=stride)

    def _apply_conv_bn(self, name, x, training, stride=1):
        y = self._apply_conv(f"{name}.conv", x, stride)
        y = ops.batchnorm2d(y, self.params[f"{name}.bn.gamma"], self.params[f"{name}.bn.beta"],
                            self.bn[name], training)
        return ops.relu(y)

    def forward(self, x, training: bool = False) -> ForwardOutputs:
        """Run the network on an ``(N, 1, H, W)`` batch (or a single GrayImage)."""
        x = as_batch(x)
        n, c, h, w = x.shape
        if c != 1 or h % MIN_INPUT or w % MIN_INPUT or h == 0 or w == 0:
            raise ShapeMismatch(f"input must be (N, 1, H, W) with H, W multiples of {MIN_INPUT}, got {x.shape}")
        cfg = self.cfg
        t = x
        indices, provenance = [], []
        for k in range(N_SCALES):
            for i in range(cfg.block_conv_counts[k]):
                t = self._apply_conv_bn(f"enc{k + 1}.{i}", t, training)
            pooled, idx = ops.maxpool2d(t)
            indices.append(idx)
            if cfg.fpb_enabled and k < N_SCALES - 1:
                main = self._apply_conv(f"fpb{k + 1}.main", pooled)
                side = self._apply_conv_bn(f"fpb{k + 1}.side", t, training, stride=2)
                main.tag, side.tag = f"main{k + 1}", f"preserved{k + 1}"
                t = ops.concat([main, side])
                provenance.append({"block_input": k + 2, "channels": t.shape[1],
                                   "preserved": side.shape[1], "tags": [main.tag, side.tag]})
            else:
                t = pooled

        sides = [None] * N_SCALES
        for k in reversed(range(N_SCALES)):
            t = ops.max_unpool2d(t, indices[k])
            for i in range(cfg.block_conv_counts[k]):
                t = self._apply_conv_bn(f"dec{k + 1}.{i}", t, training)
            sides[k] = ops.upsample_bilinear(self._apply_conv(f"side{k + 1}", t), (h, w))
        fused = self._apply_conv("fuse", ops.concat(sides))
        return ForwardOutputs(side_maps=sides, fused_map=fused, provenance=provenance)

    def predict(self, x, batch_size: int = 8) -> np.ndarray:
        """Eval-mode probabilities, shape ``(N, H, W)``, computed ``batch_size`` images at a time."""
        x = as_batch(x).data
        parts = [self.forward(x[s:s + batch_size], training=False).probability()[:, 0]
                 for s in range(0, len(x), batch_size)]
        return np.concatenate(parts)

    # -- persistence ----------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"meta.config": self.cfg.to_vector()}
        out.update({k: p.data for k, p in self.params.items()})
        for name, s in self.bn.items():
            out[f"{name}.bn.running_mean"] = s.running_mean
            out[f"{name}.bn.running_var"] = s.running_var
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], cfg: NetworkConfig | None = None) -> "HCNNFP":
        if "meta.config" not in arrays:
            raise CheckpointMismatch("checkpoint has no meta.config record")
        stored = NetworkConfig.from_vector(arrays["meta.config"])
        if cfg is not None and (cfg.base_channels, cfg.fpb_enabled, cfg.block_conv_counts) != \
                (stored.base_channels, stored.fpb_enabled, stored.block_conv_counts):
            raise CheckpointMismatch(f"checkpoint topology {stored} does not match {cfg}")
        net = cls(cfg or stored)
        expected = set(net.state_arrays())
        if expected != set(arrays):
            missing, extra = sorted(expected - set(arrays)), sorted(set(arrays) - expected)
            raise CheckpointMismatch(f"checkpoint records differ: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, p in net.params.items():
            if arrays[k].shape != p.shape:
                raise CheckpointMismatch(f"{k}: shape {arrays[k].shape} vs {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)
        for name, s in net.bn.items():
            s.running_mean = np.array(arrays[f"{name}.bn.running_mean"], dtype=np.float64)
            s.running_var = np.array(arrays[f"{name}.bn.running_var"], dtype=np.float64)
        return net


def build_network(cfg: NetworkConfig = NetworkConfig()) -> HCNNFP:
    return HCNNFP(cfg)


def as_batch(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, GrayImage):
        x = x.data[None, None]
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    return Tensor(arr)


def _targets(gt, like: Tensor) -> np.ndarray:
    if isinstance(gt, GroundTruthMask):
        gt = gt.data
    y = np.asarray(gt, dtype=np.float64)
    n, _, h, w = like.shape
    if y.size != n * h * w:
        raise ShapeMismatch(f"mask of shape {y.shape} does not match maps {like.shape}")
    return y.reshape(like.shape)


def total_loss(outs: ForwardOutputs, gt) -> Tensor:
    """Pixel-summed cross-entropy of the fused map plus the five side maps."""
    y = _targets(gt, outs.fused_map)
    n_pix = y.size
    terms = [ops.bce_with_logits(m, y) for m in outs.maps]
    return sum(terms[1:], terms[0]) * float(n_pix)


def training_objective(outs: ForwardOutputs, gt) -> Tensor:
    """``total_loss`` scaled by ``1 / (6 * pixels)``: the mean of the six mean losses."""
    y = _targets(gt, outs.fused_map)
    terms = [ops.bce_with_logits(m, y) for m in outs.maps]
    return sum(terms[1:], terms[0]) * (1.0 / len(terms))


def infer(net: HCNNFP, image) -> ProbabilityMap:
    return ProbabilityMap(net.predict(image)[0])
