"""Differentiable operations on :class:`Tensor`.

Every function computes its forward value with numpy and, when an input is on
the tape, registers a closure returning one gradient per parent (``None`` for
parents that need none).
"""

from __future__ import annotations

from typing import Optional, Sequence

import builtins

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from micar.autodiff.tensor import Tensor, as_tensor, make_result
from micar.errors import ConfigurationError, DimensionError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "div")


def _row_stable_matmul(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # BLAS takes a matrix-vector path for single-row operands whose rounding
    # differs from the matrix-matrix path; pad to two rows so a row's value
    # never depends on how many other rows share the call
    if x.shape[-2] != 1:
        return x @ y
    pad = np.concatenate([x, np.zeros_like(x)], axis=-2)
    return (pad @ y)[..., :1, :]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _row_stable_matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_result(out, (a, b), bw, "matmul")


# -- reductions ---------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return make_result(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // builtins.max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape),)

    return make_result(out, (x,), bw, "mean")


def max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    axis = axis % x.ndim
    idx = np.expand_dims(x.data.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return make_result(out if keepdims else out.squeeze(axis), (x,), bw, "max")


# -- shape manipulation -------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return make_result(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(a % x.ndim for a in axes)
    inv = np.argsort(axes)

    def bw(g):
        return (g.transpose(inv),)

    return make_result(x.data.transpose(axes), (x,), bw, "transpose")


def getitem(x: Tensor, key) -> Tensor:
    advanced = isinstance(key, (list, np.ndarray)) or (
        isinstance(key, tuple) and any(isinstance(k, (list, np.ndarray)) for k in key)
    )

    def bw(g):
        gx = np.zeros_like(x.data)
        if advanced:
            np.add.at(gx, key, g)
        else:
            gx[key] = g
        return (gx,)

    return make_result(x.data[key], (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise DimensionError(f"concat shape mismatch: {[u.shape for u in tensors]}")
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def broadcast_to(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (unbroadcast(g, x.shape),)

    return make_result(np.broadcast_to(x.data, shape).copy(), (x,), bw, "broadcast_to")


# -- pointwise nonlinearities ------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s

    def bw(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return make_result(out, (x,), bw, "silu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_result(out, (x,), bw, "gelu")


ACTIVATIONS = {"silu": silu, "gelu": gelu, "relu": relu}


def xlogx(x: Tensor) -> Tensor:
    """Elementwise x*log(x) with the convention 0*log(0) = 0."""
    pos = x.data > 0
    safe = np.where(pos, x.data, 1.0)
    out = np.where(pos, x.data * np.log(safe), 0.0)
    return make_result(out, (x,), lambda g: (g * np.where(pos, np.log(safe) + 1.0, 0.0),), "xlogx")


# -- normalisation and probability -------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw, "log_softmax")


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: Optional[np.ndarray] = None) -> Tensor:
    """Per-position negative log-likelihood ``-log softmax(logits)[target]``.

    ``weights`` (same shape as ``targets``) multiplies each position, so padded
    positions can be zeroed out.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {logits.shape} do not align with targets {targets.shape}")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = -picked * w

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (p * (g * w)[..., None],)

    return make_result(out, (logits,), bw, "cross_entropy")


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """``gain * x / sqrt(mean(x**2, -1) + eps)`` over the last axis."""
    if gain.shape != (x.shape[-1],):
        raise DimensionError(f"rmsnorm gain {gain.shape} does not match features of {x.shape}")
    d = x.shape[-1]
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * r

    def bw(g):
        gx = gg = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            u = g * gain.data
            gx = r * u - xhat * (r / d) * (u * xhat).sum(axis=-1, keepdims=True)
        return gx, gg

    return make_result(xhat * gain.data, (x, gain), bw, "rmsnorm")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation for ``N×C×H×W`` (or ``C×H×W``) input.

    In training mode the batch statistics normalise the input and the running
    buffers are updated in place (unbiased variance, like the usual frameworks).
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm parameters {gamma.shape} do not match channels of {x.shape}")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * (var * m / (m - 1) if m > 1 else var)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        g = g[None] if squeeze else g
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        if squeeze:
            gx = gx[0]
        return gx, ggamma, gbeta

    return make_result(out[0] if squeeze else out, (x, gamma, beta), bw, "batch_norm")


# -- convolution and spatial resampling --------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``[N×]C_in×H×W`` input with ``C_out×C_in×kh×kw`` kernels."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects C×H×W or N×C×H×W input and 4-d kernels, got {x.shape}, {w.shape}")
    n, c_in, h, wd = xd.shape
    c_out, c_k, kh, kw = w.shape
    if c_k != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernels {w.shape}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # cols: (n*oh*ow, c_in*kh*kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c_in * kh * kw)
    wmat = w.data.reshape(c_out, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)

    def bw(g):
        g = g[None] if squeeze else g
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, oh, ow, c_in, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
            if squeeze:
                gx = gx[0]
        return gx, gw

    return make_result(np.ascontiguousarray(out[0] if squeeze else out), (x, w), bw, "conv2d")


def _spatial_map(x: Tensor, mh: np.ndarray, mw: np.ndarray, op: str) -> Tensor:
    # out[..., i, j] = sum_{a,b} mh[i, a] x[..., a, b] mw[j, b]
    out = mh @ x.data @ mw.T

    def bw(g):
        return (mh.T @ g @ mw,)

    return make_result(out, (x,), bw, op)


def adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row ``i`` averages input cells ``floor(i*n_in/n_out) .. ceil((i+1)*n_in/n_out)-1``."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def nearest_matrix(n_in: int, n_out: int) -> np.ndarray:
    """One-hot selection: output cell ``i`` copies input cell ``floor(i*n_in/n_out)``."""
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), (np.arange(n_out) * n_in) // n_out] = 1.0
    return m


def adaptive_avg_pool2d(x: Tensor, size: tuple[int, int]) -> Tensor:
    h, w = x.shape[-2:]
    gh, gw = size
    if gh > h or gw > w or gh < 1 or gw < 1:
        raise ConfigurationError(f"adaptive pool grid {gh}x{gw} exceeds spatial size {h}x{w}")
    return _spatial_map(x, adaptive_pool_matrix(h, gh), adaptive_pool_matrix(w, gw), "adaptive_avg_pool2d")


def upsample_nearest(x: Tensor, size: tuple[int, int]) -> Tensor:
    h, w = x.shape[-2:]
    return _spatial_map(x, nearest_matrix(h, size[0]), nearest_matrix(w, size[1]), "upsample_nearest")


# -- lookup, masking, stochastic ops -----------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return make_result(table.data[ids], (table,), bw, "embedding")


def index_select(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows ``x[idx]`` of a 2-d tensor (indices may repeat)."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_result(x.data[idx], (x,), bw, "index_select")


def index_add(base: Tensor, idx: np.ndarray, src: Tensor) -> Tensor:
    """``base`` with ``src`` rows added at row indices ``idx`` (repeats accumulate)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = base.data.copy()
    np.add.at(out, idx, src.data)

    def bw(g):
        return g, g[idx]

    return make_result(out, (base, src), bw, "index_add")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true with a constant (no gradient there)."""
    mask = np.broadcast_to(mask, x.shape)
    return make_result(np.where(mask, value, x.data), (x,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; the identity in eval mode or at rate 0."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- rotary embedding ------------------------------------------------------------

def rope_angles(positions: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    """Angles ``m * base**(-2i/dim)`` of shape ``positions.shape + (dim//2,)``."""
    if dim % 2:
        raise ConfigurationError(f"rotary width must be even, got {dim}")
    theta = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    return np.asarray(positions, dtype=np.float64)[..., None] * theta


def _rotate(v: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    ev, od = v[..., 0::2], v[..., 1::2]
    out = np.empty_like(v)
    out[..., 0::2] = ev * cos - od * sin
    out[..., 1::2] = ev * sin + od * cos
    return out


def rope(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate interleaved pairs ``(x_2i, x_2i+1)`` by ``position * theta_i``.

    ``positions`` broadcasts against ``x.shape[:-1]``.
    """
    ang = rope_angles(positions, x.shape[-1], base)
    cos, sin = np.cos(ang), np.sin(ang)
    return make_result(_rotate(x.data, cos, sin), (x,), lambda g: (_rotate(g, cos, -sin),), "rope")
