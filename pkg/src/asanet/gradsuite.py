"""The finite-difference gradient suite run by ``asanet gradcheck``.

Every differentiable building block is checked in float64 against central
differences: layers, both fusion blocks, an encoder stage, the decoder and
a complete two-class 16x16 model.
"""
from __future__ import annotations

import time
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import functional as F
from .functional import ChannelNormParams, Conv2dParams
from .fusion import CfmParams, FeaturePair, SfmParams, cfm_forward, sfm_forward
from .gradcheck import GradReport, finite_diff_check
from .network import NetConfig, asanet_forward, encoder_stage, init_params, upernet_decode
from .tensor import Tensor

Check = Tuple[str, Callable[[np.random.Generator], GradReport]]


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _projected(fn, rng):
    """Scalarise a tensor-valued function with a fixed random projection."""
    cache = {}

    def f(*xs):
        out = fn(*xs)
        if "w" not in cache:
            cache["w"] = rng.standard_normal(out.shape)
        return F.sum(F.mul(out, cache["w"]))

    return f


def _check(fn, inputs: Sequence[Tensor], rng, **kw) -> GradReport:
    return finite_diff_check(_projected(fn, rng), list(inputs), rng=rng, **kw)


def _randomize(tensors: Dict[str, Tensor], rng) -> List[Tensor]:
    """Redraw parameters at fan-in scale so gates and softmaxes stay unsaturated.

    Saturated sigmoids give gradients near 1e-10 whose finite-difference
    relative error says nothing about the backward pass.
    """
    out = []
    for t in tensors.values():
        scale = 1.0 / np.sqrt(np.prod(t.shape[1:])) if t.ndim == 4 else 0.1
        t.data = rng.standard_normal(t.shape) * scale
        t.requires_grad = True
        out.append(t)
    return out


def check_conv(rng):
    x, w, b = _t(rng, 2, 3, 6, 6), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    return _check(lambda x, w, b: F.conv2d(x, Conv2dParams(w, b, 2, 1)), [x, w, b], rng)


def check_conv_narrowing(rng):
    x, w, b = _t(rng, 1, 4, 6, 6), _t(rng, 1, 4, 7, 7), _t(rng, 1)
    return _check(lambda x, w, b: F.conv2d(x, Conv2dParams(w, b, 1, 3)), [x, w, b], rng)


def check_pools(rng):
    x = _t(rng, 2, 3, 4, 4)
    return _check(lambda x: F.concat([F.global_pool(x, "max"), F.global_pool(x, "avg")]), [x], rng)


def check_activations(rng):
    x = _t(rng, 3, 5, scale=2.0)
    return _check(lambda x: F.concat([F.gelu(x), F.sigmoid(x), F.relu(x)], axis=0), [x], rng)


def check_softmax(rng):
    x = _t(rng, 2, 3, 4)
    return _check(lambda x: F.softmax(x, 1), [x], rng)


def check_channel_norm(rng):
    x, sc, sh = _t(rng, 2, 4, 3, 3), _t(rng, 4), _t(rng, 4)
    return _check(lambda x, sc, sh: F.channel_norm(x, ChannelNormParams(sc, sh)), [x, sc, sh], rng)


def check_resample(rng):
    x = _t(rng, 1, 2, 4, 4)
    return _check(
        lambda x: F.concat([F.bilinear_upsample(x, 2), F.resize_bilinear(F.adaptive_avg_pool(x, 3), 8, 8)]),
        [x],
        rng,
    )


def check_cross_entropy(rng):
    x = _t(rng, 2, 3, 4, 4)
    labels = rng.integers(0, 3, (2, 4, 4))
    labels[1, 2, 3] = 255
    return finite_diff_check(lambda x: F.cross_entropy(x, labels), [x], rng=rng)


def check_sfm(rng):
    p = SfmParams.init(rng, 8, dtype=np.float64)
    ps = _randomize(p.named_tensors(), rng)
    a, b = _t(rng, 2, 8, 4, 4, scale=0.5), _t(rng, 2, 8, 4, 4, scale=0.5)

    def fn(a, b, *_):
        out = sfm_forward(FeaturePair(a, b), p)
        return F.concat([out.rgb, out.sar])

    return _check(fn, [a, b] + ps, rng)


def _check_cfm(rng, mode):
    p = CfmParams.init(rng, 4, mode=mode, dtype=np.float64)
    named = p.named_tensors()
    if mode == "spatial":
        # a softmax over all pixels ignores a constant shift: these biases
        # have an identically zero gradient, which a relative error cannot score
        for k in ("cfm.score_rgb.bias", "cfm.score_sar.bias"):
            named.pop(k)
    ps = _randomize(named, rng)
    a, b = _t(rng, 2, 4, 5, 5, scale=0.5), _t(rng, 2, 4, 5, 5, scale=0.5)
    return _check(lambda a, b, *_: cfm_forward(FeaturePair(a, b), p), [a, b] + ps, rng)


def check_cfm(rng):
    return _check_cfm(rng, "modality")


def check_cfm_spatial_softmax(rng):
    return _check_cfm(rng, "spatial")


def _small_net(**kw) -> NetConfig:
    base = dict(widths=(3, 4, 4, 5), blocks=1, num_classes=2, height=16, width=16, decoder_width=4)
    base.update(kw)
    return NetConfig(**base)


def check_encoder_stage(rng):
    cfg = _small_net()
    params = init_params(cfg, 1, np.float64)
    names = [k for k in params if k.startswith("enc_rgb.1.")]
    ps = _randomize({k: params[k] for k in names}, rng)
    x = _t(rng, 2, 3, 8, 8)
    return _check(lambda x, *_: encoder_stage(x, params, "enc_rgb.1", 1), [x] + ps, rng)


def check_decoder(rng):
    cfg = _small_net()
    params = init_params(cfg, 2, np.float64)
    names = [k for k in params if k.startswith("dec.")]
    ps = _randomize({k: params[k] for k in names}, rng)
    fused = [_t(rng, 1, c, 8 >> i, 8 >> i) for i, c in enumerate(cfg.widths)]
    return _check(
        lambda *xs: upernet_decode(xs[:4], params, 2, cfg.pool_bins, (16, 16)),
        fused + ps,
        rng,
        max_coords=24,
    )


def check_model(rng):
    """Whole sfm+cfm network, 2 classes, 16x16 inputs, sampled coordinates.

    The logits are scalarised by a random projection and the fusion blocks
    start at half fan-in scale: deep, saturating gate paths otherwise leave
    gradients of 1e-8 that sit below the central-difference noise floor.
    """
    cfg = _small_net()
    params = init_params(cfg, 3, np.float64)
    names = sorted(params)
    ps = _randomize({k: params[k] for k in names}, rng)
    for name, t in zip(names, ps):
        if name.startswith(("sfm.", "cfm.")):
            t.data *= 0.5
    rgb, sar = _t(rng, 2, 3, 16, 16, scale=0.5), _t(rng, 2, 1, 16, 16, scale=0.5)
    return finite_diff_check(
        _projected(lambda r, s, *_: asanet_forward(r, s, cfg, params), rng),
        [rgb, sar] + ps,
        rng=rng,
        max_coords=6,
        names=["rgb", "sar"] + names,
    )


CHECKS: List[Check] = [
    ("conv2d", check_conv),
    ("conv2d 7x7 narrowing", check_conv_narrowing),
    ("global pools", check_pools),
    ("activations", check_activations),
    ("softmax", check_softmax),
    ("channel norm", check_channel_norm),
    ("resampling", check_resample),
    ("cross entropy", check_cross_entropy),
    ("sfm", check_sfm),
    ("cfm", check_cfm),
    ("cfm spatial softmax", check_cfm_spatial_softmax),
    ("encoder stage", check_encoder_stage),
    ("decoder", check_decoder),
    ("model 2-class 16x16", check_model),
]


def run_suite(seed: int = 0, verbose: bool = False) -> Tuple[List[Tuple[str, GradReport]], float]:
    """Run every check; returns the reports and the elapsed wall time."""
    t0 = time.perf_counter()
    results = []
    for i, (name, fn) in enumerate(CHECKS):
        rep = fn(np.random.default_rng([seed, i]))
        results.append((name, rep))
        if verbose:
            print(f"{'ok  ' if rep.passed else 'FAIL'} {name:<22} {rep}")
    return results, time.perf_counter() - t0
