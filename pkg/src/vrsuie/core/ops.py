"""Differentiable image ops: convolution, normalization, activations,
softmax, resizing, pooling, padding and attention.

Layout is always (batch, channel, height, width). Reductions run in a fixed
order so identical inputs give bitwise identical outputs.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import (
    ParameterError,
    ShapeError,
    Tensor,
    as_tensor,
    make_result,
    matmul,
    mul,
    sigmoid,
    transpose,
)

GELU_C = 0.7978845608  # sqrt(2/pi), fixed so outputs are reproducible across implementations
GELU_A = 0.044715


# -- convolution -------------------------------------------------------------
def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _window(xp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _dw_forward(xp, wk, stride, ho, wo):
    # wk: (1 or B, C, kh, kw); kernel row-major accumulation
    b, c = xp.shape[:2]
    out = np.zeros((b, c, ho, wo), dtype=np.result_type(xp, wk))
    for i in range(wk.shape[2]):
        for j in range(wk.shape[3]):
            out += wk[:, :, i, j, None, None] * _window(xp, i, j, stride, ho, wo)
    return out


def _dw_backward(g, xp, wk, stride, ho, wo, per_sample):
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(wk)
    for i in range(wk.shape[2]):
        for j in range(wk.shape[3]):
            win = _window(xp, i, j, stride, ho, wo)
            prod = (g * win).sum(axis=(2, 3))
            gw[:, :, i, j] = prod if per_sample else prod.sum(axis=0, keepdims=True)
            _window(gxp, i, j, stride, ho, wo)[...] += wk[:, :, i, j, None, None] * g
    return gxp, gw


def _unpad(g: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return g
    return g[:, :, pad:-pad, pad:-pad]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """Cross-correlation with zero padding.

    ``w`` has shape (C_out, C_in // groups, kh, kw). The depthwise case
    (groups == C_in == C_out) accumulates kernel taps in row-major order;
    the general case reduces over (channel, kernel row, kernel col) with a
    single matrix product per group.
    """
    x, w = as_tensor(x), as_tensor(w, x)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"conv2d: channels in={cin} out={cout} not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(f"conv2d: kernel expects {cin_g * groups} input channels, input has {cin}")
    ho, wo = _out_extent(h, kh, stride, padding), _out_extent(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = _pad_hw(x.data, padding)
    depthwise = groups == cin == cout

    if depthwise:
        wk = w.data.reshape(1, cout, kh, kw)
        out = _dw_forward(xp, wk, stride, ho, wo)

        def backward_core(g):
            gxp, gw = _dw_backward(g, xp, wk, stride, ho, wo, per_sample=False)
            return _unpad(gxp, padding), gw.reshape(w.shape)
    else:
        k = cin_g * kh * kw
        cols = np.empty((bsz, cin, kh, kw, ho, wo), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = _window(xp, i, j, stride, ho, wo)
        cols = cols.reshape(bsz, groups, k, ho * wo)
        wr = w.data.reshape(groups, cout // groups, k)
        out = np.matmul(wr[None], cols).reshape(bsz, cout, ho, wo)

        def backward_core(g):
            gr = g.reshape(bsz, groups, cout // groups, ho * wo)
            gw = np.matmul(gr, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(w.shape)
            gcols = np.matmul(np.swapaxes(wr, -1, -2)[None], gr).reshape(bsz, cin, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    _window(gxp, i, j, stride, ho, wo)[...] += gcols[:, :, i, j]
            return _unpad(gxp, padding), gw

    if b is not None:
        b = as_tensor(b, x)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)
    else:
        parents = (x, w)

    def backward(g):
        gx, gw = backward_core(g)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, parents, backward, "conv2d")


def depthwise_conv2d_per_sample(x: Tensor, w: Tensor, padding: int = 1) -> Tensor:
    """Depthwise conv where every batch item carries its own kernel set.

    ``w`` has shape (B, C, kh, kw). Same tap order as the shared depthwise
    path in :func:`conv2d`.
    """
    x, w = as_tensor(x), as_tensor(w, x)
    bsz, c, h, wd = x.shape
    if w.ndim != 4 or w.shape[:2] != (bsz, c):
        raise ShapeError(f"per-sample kernels must be ({bsz}, {c}, kh, kw), got {w.shape}")
    kh, kw = w.shape[2:]
    ho, wo = _out_extent(h, kh, 1, padding), _out_extent(wd, kw, 1, padding)
    xp = _pad_hw(x.data, padding)
    out = _dw_forward(xp, w.data, 1, ho, wo)

    def backward(g):
        gxp, gw = _dw_backward(g, xp, w.data, 1, ho, wo, per_sample=True)
        return _unpad(gxp, padding), gw

    return make_result(out, (x, w), backward, "dwconv_per_sample")


# -- normalization -----------------------------------------------------------
def _normalize(x: Tensor, view: tuple[int, ...], axes: tuple[int, ...], weight, bias, eps: float, op: str):
    if eps <= 0:
        raise ParameterError("norm eps must be positive")
    shape = x.shape
    c = shape[1]
    xv = x.data.reshape(view)
    mu = xv.mean(axis=axes, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(shape)
    parents = [x]
    out = xhat
    if weight is not None:
        weight = as_tensor(weight, x)
        out = out * weight.data.reshape(1, c, 1, 1)
        parents.append(weight)
    if bias is not None:
        bias = as_tensor(bias, x)
        out = out + bias.data.reshape(1, c, 1, 1)
        parents.append(bias)
    if out is xhat:
        out = xhat.copy()

    def backward(g):
        gxhat = g * weight.data.reshape(1, c, 1, 1) if weight is not None else g
        gv = gxhat.reshape(view)
        xh = xhat.reshape(view)
        gx = inv * (gv - gv.mean(axis=axes, keepdims=True) - xh * (gv * xh).mean(axis=axes, keepdims=True))
        grads = [gx.reshape(shape)]
        if weight is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)))
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(out, parents, backward, op)


def layer_norm(x: Tensor, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize every pixel over its channel vector."""
    b, c, h, w = x.shape
    return _normalize(x, (b, c, h, w), (1,), weight, bias, eps, "layer_norm")


def group_norm(x: Tensor, groups: int, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel group) over its channels and pixels."""
    b, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    return _normalize(x, (b, groups, c // groups, h, w), (2, 3, 4), weight, bias, eps, "group_norm")


def norm(x: Tensor, kind: str = "layer", groups: int = 1, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    if kind == "layer":
        return layer_norm(x, weight, bias, eps)
    if kind == "group":
        return group_norm(x, groups, weight, bias, eps)
    raise ParameterError(f"unknown norm kind {kind!r}")


# -- activations / softmax ---------------------------------------------------------
def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = GELU_C * (xd + GELU_A * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return make_result(out, (x,), backward, "gelu")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ParameterError(f"unknown activation {kind!r}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def tempered_softmax(scores, temperature: float, axis: int = -1) -> Tensor:
    """softmax(scores / T) for T > 0."""
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    scores = as_tensor(scores)
    return softmax(scores * (1.0 / float(temperature)), axis=axis)


# -- resampling ----------------------------------------------------------------
def _lerp_plan(n_in: int, n_out: int):
    # half-pixel centers (align_corners=False); negative sources clamp to 0
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.arange(n_out), i0), 1.0 - lam)
    np.add.at(mat, (np.arange(n_out), i1), lam)
    return i0, i1, lam, mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling with half-pixel centers (align_corners=False).

    Each axis is interpolated as ``a + lam * (b - a)`` so constant maps stay
    exactly constant.
    """
    if out_h < 1 or out_w < 1:
        raise ParameterError("output extents must be >= 1")
    x = as_tensor(x)
    h, w = x.shape[-2:]
    dt = x.dtype
    yi0, yi1, ylam, ymat = _lerp_plan(h, out_h)
    xi0, xi1, xlam, xmat = _lerp_plan(w, out_w)
    xd = x.data
    a, b = xd[..., yi0, :], xd[..., yi1, :]
    rows = a + ylam.astype(dt)[:, None] * (b - a)
    a, b = rows[..., xi0], rows[..., xi1]
    out = a + xlam.astype(dt) * (b - a)
    ymat, xmat = ymat.astype(dt), xmat.astype(dt)

    def backward(g):
        return (ymat.T @ g @ xmat,)

    return make_result(out, (x,), backward, "bilinear_resize")


def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        mat[i, lo:hi] = 1.0 / (hi - lo)
    return mat


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average over the bins [floor(i*n/m), ceil((i+1)*n/m)) on each axis."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    ph = _pool_matrix(h, out_h).astype(x.dtype)
    pw = _pool_matrix(w, out_w).astype(x.dtype)
    out = ph @ x.data @ pw.T

    def backward(g):
        return (ph.T @ g @ pw,)

    return make_result(out, (x,), backward, "adaptive_avg_pool2d")


def _reflect_index(n: int, before: int, after: int) -> np.ndarray:
    idx = np.arange(-before, n + after)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int, mode: str = "zero") -> Tensor:
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if mode == "zero":
        widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
        out = np.pad(x.data, widths)

        def backward(g):
            return (g[..., top:top + h, left:left + w],)
    elif mode == "reflect":
        iy = _reflect_index(h, top, bottom)
        ix = _reflect_index(w, left, right)
        out = x.data[..., iy, :][..., ix]
        ey = np.zeros((len(iy), h), dtype=x.dtype)
        ey[np.arange(len(iy)), iy] = 1.0
        ex = np.zeros((len(ix), w), dtype=x.dtype)
        ex[np.arange(len(ix)), ix] = 1.0

        def backward(g):
            return (ey.T @ g @ ex,)
    else:
        raise ParameterError(f"unknown pad mode {mode!r}")
    return make_result(np.ascontiguousarray(out), (x,), backward, f"pad_{mode}")


# -- token ops / attention ---------------------------------------------------
def permute_tokens(x: Tensor, index: np.ndarray, inverse: np.ndarray) -> Tensor:
    """out[b, t] = x[b, index[b, t]] for x of shape (B, N, ...).

    ``inverse`` must be the inverse permutation of ``index`` row by row; the
    backward pass is then a gather too, so no accumulation happens.
    """
    x = as_tensor(x)
    if index.shape != x.shape[:2] or inverse.shape != index.shape:
        raise ShapeError(f"permutation shape {index.shape} does not match tokens {x.shape[:2]}")
    extra = (1,) * (x.ndim - 2)
    idx = index.reshape(index.shape + extra)
    inv = inverse.reshape(inverse.shape + extra)
    out = np.take_along_axis(x.data, idx, axis=1)

    def backward(g):
        return (np.take_along_axis(g, inv, axis=1),)

    return make_result(out, (x,), backward, "permute_tokens")


def attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    """softmax(q k^T * scale) v over the last two axes."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = mul(matmul(q, transpose(k, axes)), float(scale))
    return matmul(softmax(scores, axis=-1), v)


def default_scale(dim: int) -> float:
    return 1.0 / math.sqrt(dim)
