"""Differentiable operations on :class:`~asanet.tensor.Tensor`.

Feature maps are laid out N x C x H x W.  Every op here has a hand-written
backward; the heavy ones (conv2d, channel_norm, softmax, cross_entropy) are
fused so a training step stays within a few hundred graph nodes.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf, expit

from .errors import DataError, DimensionError, GeometryError
from .tensor import Tensor, broadcast_shape, make_result, unbroadcast

_counter = threading.local()


@contextlib.contextmanager
def count_flops():
    """Collect analytic operation counts for every op executed in the block.

    Yields a one-element list whose entry is the running total.
    """
    prev = getattr(_counter, "box", None)
    box = [0]
    _counter.box = box
    try:
        yield box
    finally:
        _counter.box = prev


def _tally(n: int) -> None:
    box = getattr(_counter, "box", None)
    if box is not None:
        box[0] += int(n)


def _wrap(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


# ---------------------------------------------------------------------------
# elementwise arithmetic


def elementwise(a, b, kind: str) -> Tensor:
    """``add``/``sub``/``mul`` with unit-axis broadcasting between equal ranks.

    Python scalars are accepted as constants.
    """
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise DimensionError("elementwise needs at least one Tensor operand")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
        scalar_a = a.ndim == 0
    else:
        scalar_a = False
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
        scalar_b = b.ndim == 0
    else:
        scalar_b = False
    if not (scalar_a or scalar_b):
        out_shape = broadcast_shape(a.shape, b.shape)
    else:
        out_shape = a.shape if scalar_b else b.shape
    ad, bd = a.data, b.data
    if kind == "add":
        out = ad + bd
    elif kind == "sub":
        out = ad - bd
    elif kind == "mul":
        out = ad * bd
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    _tally(out.size)
    a_shape, b_shape = a.shape, b.shape

    def reduce(g, shape):
        if len(shape) == 0:
            return np.asarray(g.sum(), dtype=g.dtype)
        return unbroadcast(g, shape)

    def backward(g):
        if kind == "add":
            return reduce(g, a_shape), reduce(g, b_shape)
        if kind == "sub":
            return reduce(g, a_shape), reduce(-g, b_shape)
        return reduce(g * bd, a_shape), reduce(g * ad, b_shape)

    assert out.shape == out_shape
    return make_result(out, (a, b), kind, backward)


def add(a, b) -> Tensor:
    return elementwise(a, b, "add")


def sub(a, b) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a, b) -> Tensor:
    return elementwise(a, b, "mul")


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    _tally(x.size)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return make_result(out, (x,), "sum", backward)


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    _tally(n)
    shape = x.shape

    def backward(g):
        return (np.full(shape, g / n, dtype=x.dtype),)

    return make_result(out, (x,), "mean", backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return make_result(out, (x,), "reshape", backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channel axis by default)."""
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != axis and s != r for i, (s, r) in enumerate(zip(t.shape, ref))
        ):
            raise DimensionError(f"dimension mismatch in concat: {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return make_result(out, tuple(tensors), "concat", backward)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` along ``axis``."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = np.ascontiguousarray(x.data[index])
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return make_result(out, (x,), "narrow", backward)


# ---------------------------------------------------------------------------
# convolution


@dataclass
class Conv2dParams:
    """Weights ``Cout x Cin x k x k`` and optional bias of length ``Cout``."""

    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[-1]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def tensors(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


def conv_output_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xt: np.ndarray, k: int, k2: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Columns (C*k*k2) x (N*Ho*Wo) from a channel-major C x N x Hp x Wp array."""
    c, n = xt.shape[:2]
    sc, sn, sh, sw = xt.strides
    view = as_strided(xt, (c, k, k2, n, ho, wo), (sc, sh, sw, sn, sh * s, sw * s), writeable=False)
    return np.ascontiguousarray(view).reshape(c * k * k2, n * ho * wo)


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlation plus bias, im2col style."""
    w = p.weight
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects N x C x H x W input, got {x.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    s, pad = p.stride, p.padding
    if s < 1 or pad < 0:
        raise GeometryError(f"invalid stride/padding {s}/{pad}")
    ho = conv_output_extent(h, k, s, pad)
    wo = conv_output_extent(wd, k2, s, pad)
    if ho < 1 or wo < 1:
        raise GeometryError(
            f"conv2d output extent {ho}x{wo} is not positive for input {h}x{wd}, kernel {k}, "
            f"stride {s}, padding {pad}"
        )
    # channel-major layout keeps the im2col copy and col2im adds contiguous
    xt = x.data.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xt, k, k2, s, ho, wo)
    w2 = w.data.reshape(cout, cin * k * k2)
    out = w2 @ cols
    if p.bias is not None:
        out += p.bias.data.reshape(cout, 1)
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    _tally(n * (2 * k * k2 * cin * cout * ho * wo + (cout * ho * wo if p.bias is not None else 0)))
    padded_shape = xt.shape
    has_bias = p.bias is not None
    # input gradient as a full correlation of g with the flipped kernel: cheaper
    # than col2im whenever the layer narrows channels
    transposed_route = s == 1 and cout < cin and pad <= k - 1 and pad <= k2 - 1

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        gw = (g2 @ cols.T).reshape(w.shape)
        if transposed_route:
            gt = np.pad(
                g.transpose(1, 0, 2, 3),
                ((0, 0), (0, 0), (k - 1 - pad, k - 1 - pad), (k2 - 1 - pad, k2 - 1 - pad)),
            )
            gcols = _im2col(gt, k, k2, 1, h, wd)
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, cout * k * k2)
            gxt = (wflip @ gcols).reshape(cin, n, h, wd)
        elif k == 1 and k2 == 1 and s == 1 and not pad:
            gxt = (w2.T @ g2).reshape(cin, n, h, wd)
        else:
            gcols = (w2.T @ g2).reshape(cin, k, k2, n, ho, wo)
            gxt = np.zeros(padded_shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k2):
                    gxt[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[:, i, j]
            if pad:
                gxt = gxt[:, :, pad : pad + h, pad : pad + wd]
        grads = [np.ascontiguousarray(gxt.transpose(1, 0, 2, 3)), gw]
        if has_bias:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    parents = (x, w, p.bias) if has_bias else (x, w)
    return make_result(out, parents, "conv2d", backward)


# ---------------------------------------------------------------------------
# pooling and resampling


def global_pool(x: Tensor, mode: str) -> Tensor:
    """Reduce each channel to one value: ``max`` or ``avg``.

    For ``max`` the gradient goes to the first maximal element in row-major order.
    """
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError(f"global_pool expects N x C x H x W input, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    _tally(x.size)
    if mode == "max":
        idx = np.argmax(flat, axis=2)
        out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(n, c, 1, 1)

        def backward(g):
            gx = np.zeros((n, c, h * w), dtype=g.dtype)
            np.put_along_axis(gx, idx[..., None], g.reshape(n, c, 1), axis=2)
            return (gx.reshape(n, c, h, w),)

    elif mode == "avg":
        out = flat.mean(axis=2).reshape(n, c, 1, 1).astype(x.dtype)

        def backward(g):
            return (np.broadcast_to(g / (h * w), (n, c, h, w)).astype(g.dtype, copy=True),)

    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return make_result(np.ascontiguousarray(out), (x,), f"global_{mode}_pool", backward)


def _separable(x: Tensor, rows: np.ndarray, cols: np.ndarray, op: str) -> Tensor:
    """``out[n,c] = rows @ x[n,c] @ cols.T`` for fixed interpolation matrices."""
    rows = rows.astype(x.dtype)
    cols = cols.astype(x.dtype)
    out = np.matmul(np.matmul(rows, x.data), cols.T)
    _tally(out.size)

    def backward(g):
        return (np.matmul(np.matmul(rows.T, g), cols),)

    return make_result(np.ascontiguousarray(out), (x,), op, backward)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel (align-corners=False) bilinear weights, shape n_out x n_in."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def adaptive_avg_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Averaging weights for bins ``[floor(i*n/b), ceil((i+1)*n/b))``."""
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        start = (o * n_in) // n_out
        stop = -((-(o + 1) * n_in) // n_out)
        m[o, start:stop] = 1.0 / (stop - start)
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = x.shape[2], x.shape[3]
    if (out_h, out_w) == (h, w):
        return x
    return _separable(x, bilinear_matrix(h, out_h), bilinear_matrix(w, out_w), "resize_bilinear")


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise GeometryError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    return resize_bilinear(x, x.shape[2] * factor, x.shape[3] * factor)


def adaptive_avg_pool(x: Tensor, bins: int) -> Tensor:
    h, w = x.shape[2], x.shape[3]
    return _separable(x, adaptive_avg_matrix(h, bins), adaptive_avg_matrix(w, bins), "adaptive_avg_pool")


# ---------------------------------------------------------------------------
# activations


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(x.dtype, copy=False)
    _tally(x.size)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(g.dtype, copy=False),)

    return make_result(out, (x,), "gelu", backward)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data).astype(x.dtype, copy=False)
    _tally(x.size)

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), "sigmoid", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    _tally(x.size)

    def backward(g):
        return (g * mask,)

    return make_result(out, (x,), "relu", backward)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype, copy=False)
    _tally(x.size)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), "softmax", backward)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class ChannelNormParams:
    scale: Tensor
    shift: Tensor
    epsilon: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("channel norm epsilon must be positive")

    def tensors(self):
        return [self.scale, self.shift]


def channel_norm(x: Tensor, p: ChannelNormParams) -> Tensor:
    """Normalize the C-vector at every pixel, then scale and shift per channel."""
    n, c, h, w = x.shape
    if p.scale.shape != (c,) or p.shift.shape != (c,):
        raise DimensionError(f"channel_norm params {p.scale.shape} do not match input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + p.epsilon)
    xhat = xc * inv
    sc = p.scale.data.reshape(1, c, 1, 1)
    out = (xhat * sc + p.shift.data.reshape(1, c, 1, 1)).astype(x.dtype, copy=False)
    _tally(4 * x.size)

    def backward(g):
        gxhat = g * sc
        gx = inv * (
            gxhat - gxhat.mean(axis=1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)
        )
        return (
            gx.astype(g.dtype, copy=False),
            (g * xhat).sum(axis=(0, 2, 3)),
            g.sum(axis=(0, 2, 3)),
        )

    return make_result(out, (x, p.scale, p.shift), "channel_norm", backward)


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean pixel-wise cross-entropy over non-ignored pixels."""
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        b, y, x = (int(v) for v in np.argwhere(bad)[0])
        raise DataError(
            f"label {int(labels[b, y, x])} out of range [0, {k}) at sample {b}, pixel ({y}, {x})"
        )
    count = int(valid.sum())
    ld = logits.data
    shifted = ld - ld.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(shifted, safe[:, None], axis=1)[:, 0]
    nll = np.log(z[:, 0]) - picked
    _tally(3 * logits.size)
    if count == 0:
        out = np.asarray(0.0, dtype=logits.dtype)
    else:
        out = np.asarray((nll * valid).sum() / count, dtype=logits.dtype)

    def backward(g):
        if count == 0:
            return (np.zeros_like(ld),)
        prob = e / z
        np.put_along_axis(prob, safe[:, None], np.take_along_axis(prob, safe[:, None], axis=1) - 1.0, axis=1)
        prob *= valid[:, None]
        return ((prob * (g / count)).astype(ld.dtype, copy=False),)

    return make_result(out, (logits,), "cross_entropy", backward)
