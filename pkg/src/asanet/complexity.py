"""Analytic FLOP/parameter accounting and measured throughput."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Iterable, List, Tuple, Union

import numpy as np

from . import functional as F
from .init import conv_params
from .network import MODES, NetConfig, asanet_forward, init_params
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class ConvLayerConfig:
    """A lone convolution, used to pin the counter against hand counts."""

    in_channels: int = 1
    out_channels: int = 1
    kernel: int = 3
    height: int = 8
    width: int = 8
    bias: bool = True


def _inputs(cfg: NetConfig, batch: int, dtype=np.float32) -> Tuple[Tensor, Tensor]:
    rng = np.random.default_rng(0)
    shape = (batch, cfg.height, cfg.width)
    rgb = Tensor(rng.random((shape[0], cfg.rgb_channels) + shape[1:]).astype(dtype))
    sar = Tensor(rng.random((shape[0], cfg.sar_channels) + shape[1:]).astype(dtype))
    return rgb, sar


def count_flops_params(cfg: Union[NetConfig, ConvLayerConfig]) -> Tuple[int, int]:
    """(FLOPs for one sample, trainable parameter count).

    FLOPs are tallied by executing the forward pass under
    :func:`functional.count_flops`, so the count always describes the code
    that actually runs.
    """
    if isinstance(cfg, ConvLayerConfig):
        p = conv_params(np.random.default_rng(0), cfg.in_channels, cfg.out_channels, cfg.kernel, bias=cfg.bias)
        x = Tensor(np.zeros((1, cfg.in_channels, cfg.height, cfg.width), np.float32))
        with no_grad(), F.count_flops() as box:
            F.conv2d(x, p)
        n = p.weight.size + (p.bias.size if p.bias is not None else 0)
        return box[0], n
    params = init_params(cfg, 0)
    rgb, sar = _inputs(cfg, 1)
    with no_grad(), F.count_flops() as box:
        asanet_forward(rgb, sar, cfg, params)
    return box[0], params.count()


@dataclass
class BenchRow:
    mode: str
    flops: int
    params: int
    images_per_second: float

    def __str__(self) -> str:
        return (
            f"{self.mode:<9} {self.flops / 1e6:9.2f} MFLOPs {self.params / 1e3:9.1f} k params "
            f"{self.images_per_second:8.1f} img/s"
        )


def bench(base: NetConfig, modes: Iterable[str] = MODES, batch: int = 8, repeats: int = 3) -> List[BenchRow]:
    """Inference throughput (best of ``repeats``) next to the analytic counts."""
    rows = []
    for mode in modes:
        cfg = NetConfig.from_dict({**base.to_dict(), "mode": mode})
        flops, n = count_flops_params(cfg)
        params = init_params(cfg, 0)
        rgb, sar = _inputs(cfg, batch)
        best = float("inf")
        with no_grad():
            asanet_forward(rgb, sar, cfg, params)  # warm-up
            for _ in range(repeats):
                t0 = time.perf_counter()
                asanet_forward(rgb, sar, cfg, params)
                best = min(best, time.perf_counter() - t0)
        rows.append(BenchRow(mode, flops, n, batch / best))
    return rows
