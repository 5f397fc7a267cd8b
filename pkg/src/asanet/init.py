"""Parameter initializers."""
from __future__ import annotations

import numpy as np

from .functional import ChannelNormParams, Conv2dParams
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal samples redrawn until they fall within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def conv_params(
    rng: np.random.Generator,
    cin: int,
    cout: int,
    k: int = 1,
    stride: int = 1,
    padding: int = None,
    scheme: str = "trunc_normal",
    bias: bool = True,
    dtype=np.float32,
) -> Conv2dParams:
    if padding is None:
        padding = k // 2
    shape = (cout, cin, k, k)
    if scheme == "trunc_normal":
        w = trunc_normal(rng, shape)
    elif scheme == "he":
        w = rng.standard_normal(shape) * np.sqrt(2.0 / (cin * k * k))
    elif scheme == "zeros":
        w = np.zeros(shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
    return Conv2dParams(Tensor(w.astype(dtype), requires_grad=True), b, stride, padding)


def norm_params(channels: int, dtype=np.float32) -> ChannelNormParams:
    return ChannelNormParams(
        Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
    )
