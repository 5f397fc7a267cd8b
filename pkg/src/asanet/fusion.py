"""Asymmetric RGB-SAR fusion blocks.

``sfm_forward`` re-weights each branch's channels from the max-pooled
difference between the two modalities.  ``cfm_forward`` fuses the branches
with a channel gate followed by a spatial gate and a final addition; ``pwa``
is plain addition, the baseline it is compared with.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, Tuple

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .functional import Conv2dParams
from .init import conv_params
from .tensor import Tensor

SPATIAL_MODES = ("modality", "spatial")


def hidden_width(channels: int) -> int:
    """Width of the squeeze layer: max(32, ceil(C / 16))."""
    return max(32, math.ceil(channels / 16))


@dataclass
class FeaturePair:
    rgb: Tensor
    sar: Tensor

    def __post_init__(self):
        if self.rgb.shape != self.sar.shape:
            raise DimensionError(f"feature pair shapes differ: {self.rgb.shape} vs {self.sar.shape}")
        if self.rgb.dtype != self.sar.dtype:
            raise DimensionError(f"feature pair dtypes differ: {self.rgb.dtype} vs {self.sar.dtype}")

    def __iter__(self) -> Iterator[Tensor]:
        return iter((self.rgb, self.sar))

    @property
    def channels(self) -> int:
        return self.rgb.shape[1]


@dataclass
class Perceptron:
    """Two 1x1 convolutions with GELU between (C -> hidden -> C)."""

    fc1: Conv2dParams
    fc2: Conv2dParams

    @classmethod
    def init(cls, rng, channels, scheme="trunc_normal", dtype=np.float32):
        h = hidden_width(channels)
        return cls(
            conv_params(rng, channels, h, 1, scheme=scheme, dtype=dtype),
            conv_params(rng, h, channels, 1, scheme=scheme, dtype=dtype),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(F.gelu(F.conv2d(x, self.fc1)), self.fc2)

    def named_tensors(self, prefix: str) -> Dict[str, Tensor]:
        return _conv_named(self.fc1, f"{prefix}.fc1") | _conv_named(self.fc2, f"{prefix}.fc2")


def _conv_named(p: Conv2dParams, prefix: str) -> Dict[str, Tensor]:
    out = {f"{prefix}.weight": p.weight}
    if p.bias is not None:
        out[f"{prefix}.bias"] = p.bias
    return out


@dataclass
class SfmParams:
    """Independent squeeze/expand perceptrons for the RGB and SAR branches."""

    rgb: Perceptron
    sar: Perceptron

    @property
    def channels(self) -> int:
        return self.rgb.fc1.in_channels

    @classmethod
    def init(cls, rng, channels, scheme="trunc_normal", dtype=np.float32):
        return cls(Perceptron.init(rng, channels, scheme, dtype), Perceptron.init(rng, channels, scheme, dtype))

    def named_tensors(self, prefix: str = "sfm") -> Dict[str, Tensor]:
        return self.rgb.named_tensors(f"{prefix}.rgb") | self.sar.named_tensors(f"{prefix}.sar")

    def swapped(self) -> "SfmParams":
        return SfmParams(self.sar, self.rgb)


@dataclass
class CfmParams:
    channel_fuse: Conv2dParams  # 2C -> C, 1x1
    mlp_rgb: Perceptron
    mlp_sar: Perceptron
    spatial_fuse: Conv2dParams  # 2C -> 1, 7x7
    score_rgb: Conv2dParams  # 1 -> 1, 7x7
    score_sar: Conv2dParams  # 1 -> 1, 7x7
    mode: str = "modality"

    def __post_init__(self):
        if self.mode not in SPATIAL_MODES:
            raise ConfigError(f"spatial softmax mode must be one of {SPATIAL_MODES}, got {self.mode!r}")

    @property
    def channels(self) -> int:
        return self.channel_fuse.out_channels

    @classmethod
    def init(cls, rng, channels, mode="modality", scheme="trunc_normal", dtype=np.float32):
        c = channels
        return cls(
            conv_params(rng, 2 * c, c, 1, scheme=scheme, dtype=dtype),
            Perceptron.init(rng, c, scheme, dtype),
            Perceptron.init(rng, c, scheme, dtype),
            conv_params(rng, 2 * c, 1, 7, scheme=scheme, dtype=dtype),
            conv_params(rng, 1, 1, 7, scheme=scheme, dtype=dtype),
            conv_params(rng, 1, 1, 7, scheme=scheme, dtype=dtype),
            mode,
        )

    def named_tensors(self, prefix: str = "cfm") -> Dict[str, Tensor]:
        return (
            _conv_named(self.channel_fuse, f"{prefix}.channel_fuse")
            | self.mlp_rgb.named_tensors(f"{prefix}.mlp_rgb")
            | self.mlp_sar.named_tensors(f"{prefix}.mlp_sar")
            | _conv_named(self.spatial_fuse, f"{prefix}.spatial_fuse")
            | _conv_named(self.score_rgb, f"{prefix}.score_rgb")
            | _conv_named(self.score_sar, f"{prefix}.score_sar")
        )


def _check_channels(pair: FeaturePair, channels: int, what: str) -> None:
    if pair.channels != channels:
        raise DimensionError(
            f"{what} expects {channels} channels, got feature maps of shape {pair.rgb.shape}"
        )


def differential_features(pair: FeaturePair) -> Tuple[Tensor, Tensor]:
    """Return (RGB - SAR, SAR - RGB)."""
    return F.sub(pair.rgb, pair.sar), F.sub(pair.sar, pair.rgb)


def sfm_gates(pair: FeaturePair, p: SfmParams) -> Tuple[Tensor, Tensor]:
    """Per-branch channel gates of shape N x C x 1 x 1, each in (0, 1)."""
    _check_channels(pair, p.channels, "SFM")
    diff_rgb, diff_sar = differential_features(pair)
    s2_rgb = p.rgb(F.global_pool(diff_rgb, "max"))
    s2_sar = p.sar(F.global_pool(diff_sar, "max"))
    return F.sigmoid(s2_rgb), F.sigmoid(s2_sar)


def sfm_forward(pair: FeaturePair, p: SfmParams) -> FeaturePair:
    gate_rgb, gate_sar = sfm_gates(pair, p)
    return FeaturePair(F.mul(pair.rgb, gate_rgb), F.mul(pair.sar, gate_sar))


def cfm_channel(pair: FeaturePair, p: CfmParams) -> FeaturePair:
    _check_channels(pair, p.channels, "CFM")
    s = F.global_pool(F.conv2d(F.concat([pair.rgb, pair.sar]), p.channel_fuse), "avg")
    return FeaturePair(
        F.mul(pair.rgb, F.sigmoid(p.mlp_rgb(s))),
        F.mul(pair.sar, F.sigmoid(p.mlp_sar(s))),
    )


def spatial_weights(pair: FeaturePair, p: CfmParams) -> Tuple[Tensor, Tensor]:
    """Per-pixel weight maps (N x 1 x H x W) for the two branches."""
    if p.mode not in SPATIAL_MODES:
        raise ConfigError(f"spatial softmax mode must be one of {SPATIAL_MODES}, got {p.mode!r}")
    z = F.conv2d(F.concat([pair.rgb, pair.sar]), p.spatial_fuse)
    a_rgb = F.conv2d(z, p.score_rgb)
    a_sar = F.conv2d(z, p.score_sar)
    if p.mode == "modality":
        w = F.softmax(F.concat([a_rgb, a_sar]), axis=1)
        return F.narrow(w, 1, 0, 1), F.narrow(w, 1, 1, 2)
    n, _, h, wd = a_rgb.shape
    flat = lambda a: F.reshape(F.softmax(F.reshape(a, (n, 1, h * wd)), axis=2), (n, 1, h, wd))
    return flat(a_rgb), flat(a_sar)


def cfm_spatial(pair: FeaturePair, p: CfmParams) -> FeaturePair:
    w_rgb, w_sar = spatial_weights(pair, p)
    return FeaturePair(F.mul(pair.rgb, w_rgb), F.mul(pair.sar, w_sar))


def cfm_forward(pair: FeaturePair, p: CfmParams) -> Tensor:
    z = cfm_spatial(cfm_channel(pair, p), p)
    return F.add(z.rgb, z.sar)


def pwa(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"pwa needs equal shapes, got {a.shape} and {b.shape}")
    return F.add(a, b)
