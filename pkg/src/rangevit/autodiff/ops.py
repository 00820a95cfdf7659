"""Differentiable operations on :class:`Tensor`.

Each function computes its forward result with numpy and registers a
closure that maps the output adjoint to the adjoints of its inputs.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np
from scipy.special import erf

from .. import _kernels
from .tensor import Tensor, as_tensor

LEAKY_SLOPE = 0.01


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _lift(a, like: Tensor | None = None) -> Tensor:
    if isinstance(a, Tensor):
        return a
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(a, dtype=dtype))


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    return Tensor.from_op(x**exponent, (a,), lambda g: (g * exponent * x ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return Tensor.from_op(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor.from_op(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    x = a.data
    scale = np.where(x > 0, 1.0, slope).astype(x.dtype)
    return Tensor.from_op(x * scale, (a,), lambda g: (g * scale,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype)

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype),)

    return Tensor.from_op(out, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dimensions")

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor.from_op(ad @ bd, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[1]:
        raise ValueError(f"linear: input width {xd.shape[-1]} != weight in-features {wd.shape[1]}")
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, wd.shape[0])

    def back(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, back)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = a.data
    axes = _norm_axes(axis, x.ndim)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(np.sum(x, axis=axes, keepdims=keepdims), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = a.data
    axes = _norm_axes(axis, x.ndim)
    n = 1
    for ax in axes:
        n *= x.shape[ax]

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return Tensor.from_op(np.mean(x, axis=axes, keepdims=keepdims), (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(
        np.ascontiguousarray(np.transpose(a.data, axes)),
        (a,),
        lambda g: (np.transpose(g, inv),),
    )


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    x = a.data
    basic = _is_basic_index(index)

    def back(g):
        out = np.zeros_like(x)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return Tensor.from_op(x[index], (a,), back)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``a[idx]`` along axis 0; indices may repeat."""
    x = a.data
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        out = np.zeros_like(x)
        _kernels.scatter_add_rows(out, idx, g)
        return (out,)

    return Tensor.from_op(x[idx], (a,), back)


def take_along_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """``out[n] = a[n, idx[n]]`` for a 2-D tensor."""
    x = a.data
    rows = np.arange(x.shape[0])

    def back(g):
        out = np.zeros_like(x)
        out[rows, idx] = g
        return (out,)

    return Tensor.from_op(x[rows, idx], (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (a,), back)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def _normalize_backward(g_hat, xhat, inv_std, axes):
    m1 = g_hat.mean(axis=axes, keepdims=True)
    m2 = (g_hat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (g_hat - m1 - xhat * m2)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    out = xhat * weight.data + bias.data
    lead = tuple(range(xd.ndim - 1))

    def back(g):
        gx = _normalize_backward(g * weight.data, xhat, inv_std, -1) if x.requires_grad else None
        gw = (g * xhat).sum(axis=lead) if weight.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor.from_op(out, (x, weight, bias), back)


def batch_norm(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over every axis except axis 1 (channels).

    In training mode the running statistics are updated in place, with the
    unbiased variance feeding the running estimate.
    """
    xd = x.data
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = [1] * xd.ndim
    bshape[1] = xd.shape[1]
    w = weight.data.reshape(bshape)
    b = bias.data.reshape(bshape)

    if training:
        n = xd.size // xd.shape[1]
        mu = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu) * inv_std
        unbiased = var.reshape(-1) * (n / max(n - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).reshape(bshape).astype(xd.dtype)
        xhat = (xd - running_mean.reshape(bshape).astype(xd.dtype)) * inv_std
    out = xhat * w + b

    def back(g):
        gx = None
        if x.requires_grad:
            if training:
                gx = _normalize_backward(g * w, xhat, inv_std, axes)
            else:
                gx = g * w * inv_std
        gw = (g * xhat).sum(axis=axes) if weight.requires_grad else None
        gb = g.sum(axis=axes) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor.from_op(out.astype(xd.dtype, copy=False), (x, weight, bias), back)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def _conv_out(n, k, s, p, d):
    return (n + 2 * p - d * (k - 1) - 1) // s + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride=1,
    padding=0,
    dilation=1,
) -> Tensor:
    """2-D cross-correlation on B x C x H x W input."""
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {xd.shape} and {wd.shape}")
    bsz, c_in, h, w = xd.shape
    c_out, c_w, kh, kw = wd.shape
    if c_in != c_w:
        raise ValueError(f"conv2d: input has {c_in} channels but weight expects {c_w}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    if min(ph, pw) < 0 or min(sh, sw, dh, dw) < 1:
        raise ValueError("conv2d: stride/dilation must be >= 1 and padding >= 0")
    ho = _conv_out(h, kh, sh, ph, dh)
    wo = _conv_out(w, kw, sw, pw, dw)
    if ho <= 0 or wo <= 0:
        raise ValueError(
            f"conv2d: dilated kernel {kh}x{kw} (dilation {dh},{dw}) does not fit "
            f"padded input {h + 2 * ph}x{w + 2 * pw}"
        )

    pointwise = kh == kw == 1 and sh == sw == 1 and ph == pw == 0
    if pointwise:
        cols = xd.reshape(bsz, c_in, h * w)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
        cols6 = np.empty((bsz, c_in, kh, kw, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            r0 = i * dh
            for j in range(kw):
                c0 = j * dw
                cols6[:, :, i, j] = xp[:, :, r0 : r0 + sh * (ho - 1) + 1 : sh, c0 : c0 + sw * (wo - 1) + 1 : sw]
        cols = cols6.reshape(bsz, c_in * kh * kw, ho * wo)
    wmat = wd.reshape(c_out, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(bsz, c_out, ho, wo)

    def back(g):
        g3 = g.reshape(bsz, c_out, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g3)
            if pointwise:
                gx = gcols.reshape(xd.shape)
            else:
                gcols = gcols.reshape(bsz, c_in, kh, kw, ho, wo)
                gxp = np.zeros((bsz, c_in, h + 2 * ph, w + 2 * pw), dtype=xd.dtype)
                for i in range(kh):
                    r0 = i * dh
                    for j in range(kw):
                        c0 = j * dw
                        gxp[:, :, r0 : r0 + sh * (ho - 1) + 1 : sh, c0 : c0 + sw * (wo - 1) + 1 : sw] += gcols[:, :, i, j]
                gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, back)


def avg_pool2d(x: Tensor, kernel, stride=None, padding=0) -> Tensor:
    """Average pooling; zero padding counts toward the divisor."""
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"avg_pool2d expects 4-D input, got {xd.shape}")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(padding)
    bsz, c, h, w = xd.shape
    ho = _conv_out(h, kh, sh, ph, 1)
    wo = _conv_out(w, kw, sw, pw, 1)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"avg_pool2d: kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
    area = kh * kw
    out = np.zeros((bsz, c, ho, wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
    out /= area

    def back(g):
        gs = g / area
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += gs
        return (gxp[:, :, ph : ph + h, pw : pw + w],)

    return Tensor.from_op(out, (x,), back)


def pixel_shuffle(x: Tensor, r_h: int, r_w: int) -> Tensor:
    """B x (C*r_h*r_w) x H x W  ->  B x C x (H*r_h) x (W*r_w)."""
    xd = x.data
    bsz, cin, h, w = xd.shape
    if cin % (r_h * r_w):
        raise ValueError(f"pixel_shuffle: {cin} channels not divisible by {r_h}*{r_w}")
    c = cin // (r_h * r_w)
    out = xd.reshape(bsz, c, r_h, r_w, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(bsz, c, h * r_h, w * r_w)

    def back(g):
        return (g.reshape(bsz, c, h, r_h, w, r_w).transpose(0, 1, 3, 5, 2, 4).reshape(xd.shape),)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), back)


def pixel_unshuffle(x: Tensor, r_h: int, r_w: int) -> Tensor:
    """Space-to-depth, the inverse of :func:`pixel_shuffle`."""
    xd = x.data
    bsz, c, hh, ww = xd.shape
    if hh % r_h or ww % r_w:
        raise ValueError(f"pixel_unshuffle: spatial size {hh}x{ww} not divisible by {r_h}x{r_w}")
    out = np.empty((bsz, c * r_h * r_w, hh // r_h, ww // r_w), dtype=xd.dtype)
    for ch in range(c):
        for i in range(r_h):
            for j in range(r_w):
                out[:, ch * r_h * r_w + i * r_w + j] = xd[:, ch, i::r_h, j::r_w]

    def back(g):
        gx = np.empty_like(xd)
        for ch in range(c):
            for i in range(r_h):
                for j in range(r_w):
                    gx[:, ch, i::r_h, j::r_w] = g[:, ch * r_h * r_w + i * r_w + j]
        return (gx,)

    return Tensor.from_op(out, (x,), back)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------


def bilinear_weights(coords: np.ndarray, h: int, w: int):
    """Corner indices (flat, N x 4) and blend weights (N x 4).

    Integer coordinates address pixel centers; coordinates are clamped to
    ``[0, h-1] x [0, w-1]`` first.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError(f"coords must be N x 2, got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        bad = int(np.flatnonzero(~np.isfinite(coords).all(axis=1))[0])
        raise ValueError(f"non-finite sampling coordinate at row {bad}")
    r = np.clip(coords[:, 0], 0.0, h - 1)
    c = np.clip(coords[:, 1], 0.0, w - 1)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    fr = r - r0
    fc = c - c0
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    idx = np.stack([r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1], axis=1)
    wts = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=1)
    return idx, wts


def bilinear_sample(feature_map: Tensor, coords: np.ndarray) -> Tensor:
    """Sample a C x H x W map at continuous (row, col) positions -> N x C."""
    fm = feature_map.data
    if fm.ndim != 3:
        raise ValueError(f"bilinear_sample expects a C x H x W map, got {fm.shape}")
    c, h, w = fm.shape
    if len(coords) == 0:
        return Tensor.from_op(np.zeros((0, c), dtype=fm.dtype), (feature_map,), lambda g: (np.zeros_like(fm),))
    idx, wts = bilinear_weights(coords, h, w)
    wts = wts.astype(fm.dtype)
    flat = fm.reshape(c, h * w).T
    out = np.einsum("nk,nkc->nc", wts, flat[idx])

    def back(g):
        acc = np.zeros((h * w, c), dtype=fm.dtype)
        contrib = wts[:, :, None] * g[:, None, :]
        _kernels.scatter_add_rows(acc, idx.reshape(-1), contrib.reshape(-1, c))
        return (np.ascontiguousarray(acc.T).reshape(c, h, w),)

    return Tensor.from_op(out, (feature_map,), back)


# ---------------------------------------------------------------------------
# transformer block
# ---------------------------------------------------------------------------


def multi_head_attention(x: Tensor, qkv_w, qkv_b, proj_w, proj_b, num_heads: int) -> Tensor:
    bsz, t, d = x.shape
    if d % num_heads:
        raise ValueError(f"width {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    qkv = linear(x, qkv_w, qkv_b)
    qkv = transpose(reshape(qkv, (bsz, t, 3, num_heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = transpose(matmul(attn, v), (0, 2, 1, 3))
    return linear(reshape(ctx, (bsz, t, d)), proj_w, proj_b)


def attention_block(x: Tensor, p: Mapping[str, Tensor], num_heads: int) -> Tensor:
    """Pre-norm transformer block on B x T x D tokens.

    ``p`` maps ``ln1.weight``, ``attn.qkv.weight``, ``ffn.fc1.weight`` and
    friends to tensors.
    """
    h = layer_norm(x, p["ln1.weight"], p["ln1.bias"])
    x = add(x, multi_head_attention(
        h, p["attn.qkv.weight"], p["attn.qkv.bias"], p["attn.proj.weight"], p["attn.proj.bias"], num_heads
    ))
    h = layer_norm(x, p["ln2.weight"], p["ln2.bias"])
    h = linear(gelu(linear(h, p["ffn.fc1.weight"], p["ffn.fc1.bias"])), p["ffn.fc2.weight"], p["ffn.fc2.bias"])
    return add(x, h)
