"""Dual-branch encoder, per-stage fusion and UPerNet-style decoder."""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .errors import ConfigError, GeometryError, RegistryError
from .functional import ChannelNormParams, Conv2dParams
from .fusion import CfmParams, FeaturePair, Perceptron, SfmParams, cfm_forward, pwa, sfm_forward
from .init import conv_params, norm_params
from .tensor import Tensor

MODES = ("sfm+cfm", "sfm+pwa", "cfm-only", "pwa-only", "rgb-only", "sar-only")
SINGLE_MODALITY = ("rgb-only", "sar-only")
NUM_STAGES = 4


@dataclass
class NetConfig:
    widths: Tuple[int, ...] = (32, 64, 128, 256)
    blocks: int = 2
    num_classes: int = 4
    height: int = 64
    width: int = 64
    mode: str = "sfm+cfm"
    stage_mask: Tuple[int, ...] = (1, 2, 3, 4)
    decoder_width: int = 128
    pool_bins: Tuple[int, ...] = (1, 2, 3, 6)
    rgb_channels: int = 3
    sar_channels: int = 1
    spatial_mode: str = "modality"
    sfm_residual: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.stage_mask = tuple(sorted(set(int(s) for s in self.stage_mask)))
        self.pool_bins = tuple(int(b) for b in self.pool_bins)
        self.validate()

    def validate(self) -> None:
        if len(self.widths) != NUM_STAGES or min(self.widths) < 1:
            raise ConfigError(f"need {NUM_STAGES} positive stage widths, got {self.widths}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown fusion mode {self.mode!r}; choose from {MODES}")
        if self.height % 16 or self.width % 16 or self.height < 16 or self.width < 16:
            raise ConfigError(f"input size {self.height}x{self.width} must be a multiple of 16")
        if not set(self.stage_mask) <= {1, 2, 3, 4}:
            raise ConfigError(f"stage mask {self.stage_mask} must be a subset of {{1,2,3,4}}")
        if not self.stage_mask and self.mode not in ("pwa-only",) + SINGLE_MODALITY:
            raise ConfigError(f"mode {self.mode} needs a non-empty stage mask")
        if self.num_classes < 2 or self.blocks < 0 or self.decoder_width < 1:
            raise ConfigError("num_classes >= 2, blocks >= 0 and decoder_width >= 1 required")
        if self.spatial_mode not in ("modality", "spatial"):
            raise ConfigError(f"unknown spatial softmax mode {self.spatial_mode!r}")

    @property
    def uses_sfm(self) -> bool:
        return self.mode in ("sfm+cfm", "sfm+pwa")

    @property
    def uses_cfm(self) -> bool:
        return self.mode in ("sfm+cfm", "cfm-only")

    @property
    def active_stages(self) -> Tuple[int, ...]:
        return self.stage_mask if (self.uses_sfm or self.uses_cfm) else ()

    @property
    def branches(self) -> Tuple[str, ...]:
        if self.mode == "rgb-only":
            return ("rgb",)
        if self.mode == "sar-only":
            return ("sar",)
        return ("rgb", "sar")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("widths", "stage_mask", "pool_bins"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


class ModelParams(dict):
    """Named parameter registry; a missing name raises :class:`RegistryError`."""

    def __missing__(self, name):
        raise RegistryError(f"missing parameter '{name}'")

    def conv(self, prefix: str, stride: int = 1, padding: Optional[int] = None) -> Conv2dParams:
        w = self[f"{prefix}.weight"]
        k = w.shape[-1]
        return Conv2dParams(w, self[f"{prefix}.bias"], stride, k // 2 if padding is None else padding)

    def norm(self, prefix: str) -> ChannelNormParams:
        return ChannelNormParams(self[f"{prefix}.scale"], self[f"{prefix}.shift"])

    def perceptron(self, prefix: str) -> Perceptron:
        return Perceptron(self.conv(f"{prefix}.fc1"), self.conv(f"{prefix}.fc2"))

    def sfm(self, stage: int) -> SfmParams:
        return SfmParams(self.perceptron(f"sfm.{stage}.rgb"), self.perceptron(f"sfm.{stage}.sar"))

    def cfm(self, stage: int, mode: str = "modality") -> CfmParams:
        p = f"cfm.{stage}"
        return CfmParams(
            self.conv(f"{p}.channel_fuse"),
            self.perceptron(f"{p}.mlp_rgb"),
            self.perceptron(f"{p}.mlp_sar"),
            self.conv(f"{p}.spatial_fuse"),
            self.conv(f"{p}.score_rgb"),
            self.conv(f"{p}.score_sar"),
            mode,
        )

    def count(self) -> int:
        return int(sum(t.size for t in self.values()))

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.items()})

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.items()})


def _rng(seed: int, prefix: str) -> np.random.Generator:
    # per-module streams keep shared modules identical across fusion variants
    return np.random.default_rng([int(seed), zlib.crc32(prefix.encode())])


def _add_conv(reg: ModelParams, prefix: str, p: Conv2dParams) -> None:
    reg[f"{prefix}.weight"] = p.weight
    reg[f"{prefix}.bias"] = p.bias


def init_params(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Create every parameter the configuration uses, seeded per module name."""
    reg = ModelParams()
    in_ch = {"rgb": cfg.rgb_channels, "sar": cfg.sar_channels}
    for branch in cfg.branches:
        cin = in_ch[branch]
        for i, c in enumerate(cfg.widths, start=1):
            pre = f"enc_{branch}.{i}"
            _add_conv(reg, f"{pre}.down", conv_params(_rng(seed, f"{pre}.down"), cin, c, 3, 2, 1, "he", dtype=dtype))
            for b in range(cfg.blocks):
                bp = f"{pre}.block{b}"
                r = _rng(seed, bp)
                _add_conv(reg, f"{bp}.conv1", conv_params(r, c, c, 3, scheme="he", dtype=dtype))
                n = norm_params(c, dtype)
                reg[f"{bp}.norm.scale"], reg[f"{bp}.norm.shift"] = n.scale, n.shift
                _add_conv(reg, f"{bp}.conv2", conv_params(r, c, c, 3, scheme="he", dtype=dtype))
            cin = c
    for i in cfg.active_stages:
        c = cfg.widths[i - 1]
        if cfg.uses_sfm:
            reg.update(SfmParams.init(_rng(seed, f"sfm.{i}"), c, dtype=dtype).named_tensors(f"sfm.{i}"))
        if cfg.uses_cfm:
            reg.update(CfmParams.init(_rng(seed, f"cfm.{i}"), c, dtype=dtype).named_tensors(f"cfm.{i}"))
    d = cfg.decoder_width
    c4 = cfg.widths[-1]
    for b in cfg.pool_bins:
        _add_conv(reg, f"dec.ppm.{b}", conv_params(_rng(seed, f"dec.ppm.{b}"), c4, d, 1, scheme="he", dtype=dtype))
    nb = len(cfg.pool_bins)
    _add_conv(reg, "dec.bottleneck", conv_params(_rng(seed, "dec.bottleneck"), c4 + nb * d, d, 3, scheme="he", dtype=dtype))
    for i in range(1, NUM_STAGES):
        c = cfg.widths[i - 1]
        _add_conv(reg, f"dec.lateral.{i}", conv_params(_rng(seed, f"dec.lateral.{i}"), c, d, 1, scheme="he", dtype=dtype))
        _add_conv(reg, f"dec.fpn.{i}", conv_params(_rng(seed, f"dec.fpn.{i}"), d, d, 3, scheme="he", dtype=dtype))
    _add_conv(reg, "dec.fuse", conv_params(_rng(seed, "dec.fuse"), NUM_STAGES * d, d, 3, scheme="he", dtype=dtype))
    _add_conv(reg, "dec.cls", conv_params(_rng(seed, "dec.cls"), d, cfg.num_classes, 1, dtype=dtype))
    return reg


def encoder_stage(x: Tensor, params: ModelParams, prefix: str, blocks: int) -> Tensor:
    """Stride-2 3x3 downsampling conv followed by ``blocks`` residual units."""
    h, w = x.shape[2], x.shape[3]
    if h % 2 or w % 2:
        raise GeometryError(f"encoder stage needs even extents, got {h}x{w}")
    x = F.conv2d(x, params.conv(f"{prefix}.down", stride=2, padding=1))
    for b in range(blocks):
        bp = f"{prefix}.block{b}"
        r = F.conv2d(x, params.conv(f"{bp}.conv1"))
        r = F.gelu(F.channel_norm(r, params.norm(f"{bp}.norm")))
        r = F.conv2d(r, params.conv(f"{bp}.conv2"))
        x = F.add(x, r)
    return x


def encode(rgb: Optional[Tensor], sar: Optional[Tensor], cfg: NetConfig, params: ModelParams) -> List[Tensor]:
    """Run both encoders with per-stage fusion; returns the four fused maps."""
    feats = {"rgb": rgb, "sar": sar}
    fused = []
    active = set(cfg.active_stages)
    for i in range(1, NUM_STAGES + 1):
        for branch in cfg.branches:
            feats[branch] = encoder_stage(feats[branch], params, f"enc_{branch}.{i}", cfg.blocks)
        if cfg.mode in SINGLE_MODALITY:
            fused.append(feats[cfg.branches[0]])
            continue
        f_rgb, f_sar = feats["rgb"], feats["sar"]
        if i in active and cfg.uses_sfm:
            g = sfm_forward(FeaturePair(f_rgb, f_sar), params.sfm(i))
            if cfg.sfm_residual:
                f_rgb, f_sar = F.add(f_rgb, g.rgb), F.add(f_sar, g.sar)
            else:
                f_rgb, f_sar = g.rgb, g.sar
            feats["rgb"], feats["sar"] = f_rgb, f_sar
        if i in active and cfg.uses_cfm:
            fused.append(cfm_forward(FeaturePair(f_rgb, f_sar), params.cfm(i, cfg.spatial_mode)))
        else:
            fused.append(pwa(f_rgb, f_sar))
    return fused


def upernet_decode(
    fused: Sequence[Tensor],
    params: ModelParams,
    num_classes: int,
    pool_bins: Sequence[int] = (1, 2, 3, 6),
    out_size: Optional[Tuple[int, int]] = None,
) -> Tensor:
    """Pyramid pooling on the deepest map, top-down FPN, fuse and classify.

    Logits are resized to ``out_size`` (default: twice the stage-1 extent,
    i.e. the encoder input size).
    """
    if len(fused) != NUM_STAGES:
        raise GeometryError(f"decoder needs {NUM_STAGES} feature maps, got {len(fused)}")
    for a, b in zip(fused[:-1], fused[1:]):
        if a.shape[2] != 2 * b.shape[2] or a.shape[3] != 2 * b.shape[3]:
            raise GeometryError(f"non-dyadic feature extents {a.shape[2:]} -> {b.shape[2:]}")
    f4 = fused[-1]
    h4, w4 = f4.shape[2], f4.shape[3]
    ppm = [f4]
    for b in pool_bins:
        y = F.relu(F.conv2d(F.adaptive_avg_pool(f4, b), params.conv(f"dec.ppm.{b}")))
        ppm.append(F.resize_bilinear(y, h4, w4))
    levels: List[Optional[Tensor]] = [None] * NUM_STAGES
    levels[-1] = F.relu(F.conv2d(F.concat(ppm), params.conv("dec.bottleneck")))
    laterals = [F.relu(F.conv2d(fused[i], params.conv(f"dec.lateral.{i + 1}"))) for i in range(NUM_STAGES - 1)]
    top = levels[-1]
    for i in range(NUM_STAGES - 2, -1, -1):
        lat = laterals[i]
        top = F.add(lat, F.resize_bilinear(top, lat.shape[2], lat.shape[3]))
        laterals[i] = top
    h1, w1 = fused[0].shape[2], fused[0].shape[3]
    for i in range(NUM_STAGES - 1):
        levels[i] = F.relu(F.conv2d(laterals[i], params.conv(f"dec.fpn.{i + 1}")))
    stacked = F.concat([F.resize_bilinear(t, h1, w1) for t in levels])
    x = F.relu(F.conv2d(stacked, params.conv("dec.fuse")))
    logits = F.conv2d(x, params.conv("dec.cls"))
    if logits.shape[1] != num_classes:
        raise RegistryError(f"classifier emits {logits.shape[1]} classes, config expects {num_classes}")
    oh, ow = out_size if out_size is not None else (2 * h1, 2 * w1)
    return F.resize_bilinear(logits, oh, ow)


def asanet_forward(
    rgb: Optional[Tensor], sar: Optional[Tensor], cfg: NetConfig, params: ModelParams
) -> Tensor:
    """Logits N x K x H x W for a batch of optical and backscatter inputs."""
    ref = rgb if rgb is not None else sar
    if "rgb" in cfg.branches and rgb is None or "sar" in cfg.branches and sar is None:
        raise ConfigError(f"mode {cfg.mode} needs both {cfg.branches} inputs")
    fused = encode(rgb, sar, cfg, params)
    return upernet_decode(fused, params, cfg.num_classes, cfg.pool_bins, (ref.shape[2], ref.shape[3]))
