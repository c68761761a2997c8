"""Value-priority scanning: sort pixels by a value map, run a diagonal linear
state recurrence along the sorted sequence, scatter results back.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.tensor import NumericError, ParameterError, ShapeError, Tensor, as_tensor, make_result, reshape, transpose
from .core.tensor import exp, neg, softplus
from .nn import Module, Parameter

SCAN_IMPLS = ("sequential", "fft")


def deterministic_mode() -> bool:
    return os.environ.get("VRS_DETERMINISTIC", "0") == "1"


@dataclass(frozen=True)
class Permutation:
    """Bijection over flattened pixel indices, one row per batch item."""

    forward: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_forward(cls, forward) -> Permutation:
        fwd = np.asarray(forward, dtype=np.int64)
        inv = np.empty_like(fwd)
        rows = np.arange(fwd.shape[-1])
        if fwd.ndim == 1:
            inv[fwd] = rows
        else:
            np.put_along_axis(inv, fwd, np.broadcast_to(rows, fwd.shape), axis=-1)
        return cls(fwd, inv)

    def __len__(self) -> int:
        return self.forward.shape[-1]

    def batched(self, batch: int) -> Permutation:
        if self.forward.ndim == 2:
            return self
        return Permutation(np.broadcast_to(self.forward, (batch, len(self))).copy(),
                           np.broadcast_to(self.inverse, (batch, len(self))).copy())


def _check_scores(v) -> np.ndarray:
    v = np.asarray(v.data if isinstance(v, Tensor) else v)
    if np.isnan(v).any():
        raise ValueError("value scores contain NaN")
    return v


def argsort_desc(v) -> Permutation:
    """Stable descending order; equal scores keep raster order."""
    v = _check_scores(v)
    return Permutation.from_forward(np.argsort(-v, axis=-1, kind="stable"))


def argsort_reversed(v) -> Permutation:
    """Exact reversal of :func:`argsort_desc`: ascending scores, ties in reverse raster order."""
    return Permutation.from_forward(argsort_desc(v).forward[..., ::-1])


def raster_order(h: int, w: int) -> Permutation:
    return Permutation.from_forward(np.arange(h * w))


def column_order(h: int, w: int) -> Permutation:
    return Permutation.from_forward(np.arange(h * w).reshape(h, w).T.reshape(-1))


def reverse(perm: Permutation) -> Permutation:
    return Permutation.from_forward(perm.forward[..., ::-1])


# -- gather / scatter ----------------------------------------------------------
def gather_seq(x: Tensor, perm: Permutation) -> Tensor:
    """(B, C, H, W) -> (B, N, C) with row t holding pixel perm.forward[b, t]."""
    b, c, h, w = x.shape
    if len(perm) != h * w:
        raise ShapeError(f"permutation length {len(perm)} != {h}*{w}")
    perm = perm.batched(b)
    tokens = transpose(reshape(x, (b, c, h * w)), (0, 2, 1))
    return ops.permute_tokens(tokens, perm.forward, perm.inverse)


def scatter_seq(seq: Tensor, perm: Permutation, h: int, w: int) -> Tensor:
    """Inverse of :func:`gather_seq`."""
    b, n, c = seq.shape
    if len(perm) != n or n != h * w:
        raise ShapeError(f"permutation length {len(perm)} vs sequence {n} and grid {h}x{w}")
    perm = perm.batched(b)
    tokens = ops.permute_tokens(seq, perm.inverse, perm.forward)
    return reshape(transpose(tokens, (0, 2, 1)), (b, c, h, w))


# -- recurrence ----------------------------------------------------------------
def _seq_forward(x, a, bm, cm, dv):
    b, n, c = x.shape
    bx = np.ascontiguousarray(np.moveaxis(x[..., None] * bm, 1, 0))  # (n, b, c, d)
    hs = np.empty_like(bx)
    h = np.zeros(bx.shape[1:], dtype=bx.dtype)
    for t in range(n):
        h = a * h + bx[t]
        hs[t] = h
    finite = np.isfinite(hs).reshape(n, -1).all(axis=1)
    if not finite.all():
        raise NumericError(f"ssm_scan: non-finite state at step {int(np.argmin(finite))}")
    y = np.einsum("nbcd,cd->bnc", hs, cm) + dv * x
    return y, hs


def _seq_backward(g, x, a, bm, cm, dv, hs):
    n = x.shape[1]
    gyc = np.ascontiguousarray(np.moveaxis(g[..., None] * cm, 1, 0))
    gh = np.empty_like(gyc)
    acc = np.zeros(gyc.shape[1:], dtype=gyc.dtype)
    for t in range(n - 1, -1, -1):
        acc = gyc[t] + a * acc
        gh[t] = acc
    hprev = np.concatenate([np.zeros_like(hs[:1]), hs[:-1]], axis=0)
    gx = np.einsum("nbcd,cd->bnc", gh, bm) + dv * g
    ga = np.einsum("nbcd,nbcd->cd", gh, hprev)
    gb = np.einsum("nbcd,bnc->cd", gh, x)
    gc = np.einsum("bnc,nbcd->cd", g, hs)
    gd = (g * x).sum(axis=(0, 1))
    return gx, ga, gb, gc, gd


def _fft_len(n: int) -> int:
    return 1 << max(1, (2 * n - 1).bit_length())


def _fft_forward(x, a, bm, cm, dv):
    # y = K * x (causal convolution) with K[c, j] = sum_d C B A^j
    n = x.shape[1]
    powers = np.power(a[..., None], np.arange(n, dtype=x.dtype))  # (c, d, n)
    kern = np.einsum("cd,cdn->nc", cm * bm, powers)
    size = _fft_len(n)
    y = np.fft.irfft(np.fft.rfft(x, size, axis=1) * np.fft.rfft(kern, size, axis=0)[None], size, axis=1)[:, :n]
    return y.astype(x.dtype, copy=False) + dv * x, (powers, kern)


def _fft_backward(g, x, a, bm, cm, dv, cache):
    powers, kern = cache
    n = x.shape[1]
    size = _fft_len(n)
    fk = np.fft.rfft(kern, size, axis=0)[None]
    fg = np.fft.rfft(g[:, ::-1], size, axis=1)
    gx = np.fft.irfft(fg * fk, size, axis=1)[:, :n][:, ::-1] + dv * g
    fx = np.fft.rfft(x, size, axis=1)
    fgy = np.fft.rfft(g, size, axis=1)
    # gk[j] = sum_t g[t] x[t - j]
    gk = np.fft.irfft(fgy * np.conj(fx), size, axis=1)[:, :n].sum(axis=0)  # (n, c)
    gcb = np.einsum("nc,cdn->cd", gk, powers)
    j = np.arange(n, dtype=x.dtype)
    dpow = np.zeros_like(powers)
    dpow[..., 1:] = j[1:] * powers[..., :-1]
    ga = np.einsum("nc,cdn->cd", gk, dpow) * cm * bm
    gd = (g * x).sum(axis=(0, 1))
    return gx.astype(x.dtype, copy=False), ga, gcb * cm, gcb * bm, gd


def linear_scan(x: Tensor, a: Tensor, bm: Tensor, cm: Tensor, dv: Tensor, impl: str = "sequential") -> Tensor:
    """Per-channel diagonal recurrence over a (B, N, C) sequence.

    h_t = a * h_{t-1} + bm * x_t, y_t = sum_d cm * h_t + dv * x_t, h_0 = 0.
    ``a``, ``bm``, ``cm`` have shape (C, d_state); ``dv`` has shape (C,).
    ``impl="fft"`` evaluates the same map as a causal convolution.
    """
    if impl not in SCAN_IMPLS:
        raise ParameterError(f"unknown scan impl {impl!r}")
    if deterministic_mode():
        impl = "sequential"
    x, a, bm, cm, dv = (as_tensor(t) for t in (x, a, bm, cm, dv))
    c = x.shape[-1]
    if x.ndim != 3 or a.shape[0] != c or bm.shape != a.shape or cm.shape != a.shape or dv.shape != (c,):
        raise ShapeError(f"scan shapes: x {x.shape}, A {a.shape}, B {bm.shape}, C {cm.shape}, D {dv.shape}")
    args = (x.data, a.data, bm.data, cm.data, dv.data)
    if impl == "sequential":
        y, cache = _seq_forward(*args)

        def backward(g):
            return _seq_backward(g, *args, cache)
    else:
        y, cache = _fft_forward(*args)

        def backward(g):
            return _fft_backward(g, *args, cache)

    return make_result(y, (x, a, bm, cm, dv), backward, f"ssm_scan_{impl}")


class ScanParams(Module):
    """Diagonal recurrence parameters; decay is exp(-softplus(a_raw)) in (0, 1)."""

    def __init__(self, channels: int, d_state: int = 8, rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        decay = np.tile(np.linspace(0.5, 0.98, d_state), (channels, 1))
        self.a_raw = Parameter(np.log(np.expm1(-np.log(decay))), dtype=dtype)
        bound = 1.0 / math.sqrt(d_state)
        # input gain scaled by (1 - A) keeps the state an exponential average
        self.B = Parameter((1.0 - decay) * rng.uniform(-1.0, 1.0, (channels, d_state)) * math.sqrt(d_state), dtype=dtype)
        self.C = Parameter(rng.uniform(-bound, bound, (channels, d_state)), dtype=dtype)
        self.D = Parameter(np.ones(channels), dtype=dtype)
        self.impl = "sequential"

    @property
    def channels(self) -> int:
        return self.a_raw.shape[0]

    def decay(self) -> Tensor:
        return exp(neg(softplus(self.a_raw)))


def ssm_scan(xseq: Tensor, params: ScanParams, impl: str | None = None) -> Tensor:
    return linear_scan(xseq, params.decay(), params.B, params.C, params.D, impl or params.impl)


def scan_in_order(x: Tensor, perm: Permutation, params: ScanParams, impl: str | None = None) -> Tensor:
    h, w = x.shape[-2:]
    return scatter_seq(ssm_scan(gather_seq(x, perm), params, impl), perm, h, w)


def reordered_scan(x: Tensor, value, params: ScanParams, direction: str = "forward",
                   impl: str | None = None) -> Tensor:
    """Scan ``x`` in descending order of ``value`` (ties by raster index).

    No gradient flows into ``value``: the permutation is piecewise constant.
    """
    b, c, h, w = x.shape
    v = _check_scores(value)
    if v.shape[-2:] != (h, w):
        raise ShapeError(f"value map extent {v.shape[-2:]} != feature extent {(h, w)}")
    v = np.broadcast_to(v.reshape(-1, h * w), (b, h * w)) if v.ndim == 2 else v.reshape(b, h * w)
    if direction == "forward":
        perm = argsort_desc(v)
    elif direction == "reversed":
        perm = argsort_reversed(v)
    else:
        raise ParameterError(f"unknown scan direction {direction!r}")
    return scan_in_order(x, perm, params, impl)


def four_way_orders(h: int, w: int) -> list[Permutation]:
    rows, cols = raster_order(h, w), column_order(h, w)
    return [rows, reverse(rows), cols, reverse(cols)]


def four_way_scan(x: Tensor, params: ScanParams, impl: str | None = None) -> Tensor:
    """Mean of row-major, reverse row-major, column-major and reverse column-major scans."""
    h, w = x.shape[-2:]
    outs = [scan_in_order(x, perm, params, impl) for perm in four_way_orders(h, w)]
    return (outs[0] + outs[1] + outs[2] + outs[3]) * 0.25
