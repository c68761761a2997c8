"""Value maps from sampling statistics, guided by a coarse explicit prior.

An offset head predicts k*k displacements per pixel; every displaced sample
deposits unit mass on the grid, giving the sampling-frequency map S. During
training S is pulled toward an upsampled prior D with a temperature-softened
KL divergence evaluated inside nested top-k masks of the prior distribution.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import ops, vrst
from .core.tensor import ParameterError, ShapeError, Tensor, as_tensor, make_result, no_grad
from .core.tensor import log as tlog
from .core.tensor import tsum
from .nn import Conv2d, Module

DEFAULT_RATIOS = (0.25, 0.5, 0.75, 1.0)
KL_EPS = 1e-8
PRIOR_SIZE = 16


# -- data types ---------------------------------------------------------------
@dataclass
class PriorMap:
    """Non-negative coarse value scores, shape (h, w) or (B, h, w)."""

    grid: np.ndarray
    source: str = "reference-gradient"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim not in (2, 3) or min(self.grid.shape[-2:]) < 1:
            raise ShapeError(f"prior grid must be (h, w) or (B, h, w), got {self.grid.shape}")
        if not np.isfinite(self.grid).all() or (self.grid < 0).any():
            raise ValueError("prior scores must be finite and non-negative")


@dataclass
class OffsetField:
    """Raw per-pixel displacements, shape (B, 2*k*k, H, W) as (dy, dx) pairs."""

    offsets: Tensor
    k: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ParameterError("k must be >= 1")
        if self.offsets.shape[1] != 2 * self.k * self.k:
            raise ShapeError(f"expected {2 * self.k * self.k} offset channels, got {self.offsets.shape[1]}")


@dataclass
class SamplingFrequencyMap:
    grid: Tensor  # (B, H, W)
    mode: str = "soft"


@dataclass
class ValueMap:
    grid: np.ndarray  # (B, H, W)


@dataclass(frozen=True)
class TemperatureSchedule:
    half_point: int
    t_start: float = 1.0
    t_end: float = 0.1

    def __call__(self, it: int) -> float:
        if it < 0:
            raise ParameterError("iteration must be >= 0")
        if it >= self.half_point:
            return self.t_end
        return self.t_start + (self.t_end - self.t_start) * (it / self.half_point)


def temperature(schedule: TemperatureSchedule, it: int) -> float:
    return schedule(it)


# -- offsets and sampling ------------------------------------------------------
class OffsetHead(Module):
    """3x3 depthwise conv -> GELU -> 1x1 conv to 2*k*k raw offsets."""

    def __init__(self, channels: int, k: int = 1, rng=None, dtype=np.float64, zero: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k = k
        self.dw = Conv2d(channels, channels, 3, groups=channels, rng=rng, dtype=dtype)
        self.pw = Conv2d(channels, 2 * k * k, 1, rng=rng, dtype=dtype, zero=zero)

    def forward(self, x1: Tensor) -> OffsetField:
        return OffsetField(self.pw(ops.gelu(self.dw(x1))), self.k)


def predict_offsets(x1: Tensor, head: OffsetHead) -> OffsetField:
    return head(x1)


def base_grid(k: int) -> np.ndarray:
    """(k*k, 2) integer (dy, dx) displacements of the sampling kernel, row-major."""
    r = np.arange(k) - (k - 1) // 2
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dy.ravel(), dx.ravel()], axis=1).astype(np.float64)


def sample_locations(field: OffsetField, h: int | None = None, w: int | None = None) -> tuple[Tensor, Tensor]:
    """Continuous sample coordinates (rows, cols), each of shape (B, k*k, H, W)."""
    off = field.offsets
    b, _, hh, ww = off.shape
    if (h is not None and h != hh) or (w is not None and w != ww):
        raise ShapeError(f"offset extent {(hh, ww)} != feature extent {(h, w)}")
    kk = field.k * field.k
    pairs = off.reshape(b, kk, 2, hh, ww)
    grid = base_grid(field.k).astype(off.dtype)
    rows = np.arange(hh, dtype=off.dtype)[None, None, :, None] + grid[:, 0][None, :, None, None]
    cols = np.arange(ww, dtype=off.dtype)[None, None, None, :] + grid[:, 1][None, :, None, None]
    ys = pairs[:, :, 0] + rows
    xs = pairs[:, :, 1] + cols
    return ys, xs


def _corners(ys: np.ndarray, xs: np.ndarray, h: int, w: int):
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy, fx = ys - y0, xs - x0
    y0, x0 = y0.astype(np.int64), x0.astype(np.int64)
    b = ys.shape[0]
    base = (np.arange(b) * h * w).reshape((b,) + (1,) * (ys.ndim - 1))
    out = []
    for dy, dx, wy, wx in ((0, 0, 1 - fy, 1 - fx), (0, 1, 1 - fy, fx), (1, 0, fy, 1 - fx), (1, 1, fy, fx)):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.where(valid, base + yy * w + xx, 0)
        out.append((idx, valid, wy * wx, dy, dx))
    return out, fy, fx


def soft_splat(ys: Tensor, xs: Tensor, h: int, w: int) -> Tensor:
    """Bilinear splat of unit mass per sample; out-of-grid mass is dropped.

    Differentiable in the sample coordinates (piecewise linear).
    """
    ys, xs = as_tensor(ys), as_tensor(xs)
    b = ys.shape[0]
    corners, fy, fx = _corners(ys.data, xs.data, h, w)
    total = b * h * w
    idx_all = np.concatenate([c[0][c[1]] for c in corners])
    wt_all = np.concatenate([c[2][c[1]] for c in corners])
    out = np.bincount(idx_all, weights=wt_all, minlength=total).astype(ys.dtype).reshape(b, h, w)

    def backward(g):
        gf = g.reshape(-1)
        gy = np.zeros_like(fy)
        gx = np.zeros_like(fx)
        for idx, valid, _, dy, dx in corners:
            gc = np.where(valid, gf[idx], 0.0)
            gy += gc * ((fx if dx else 1 - fx) * (1 if dy else -1))
            gx += gc * ((fy if dy else 1 - fy) * (1 if dx else -1))
        return gy, gx

    return make_result(out, (ys, xs), backward, "soft_splat")


def hard_count(ys, xs, h: int, w: int) -> np.ndarray:
    """Round each sample to the nearest pixel and count; out-of-grid samples dropped."""
    ys = np.asarray(ys.data if isinstance(ys, Tensor) else ys)
    xs = np.asarray(xs.data if isinstance(xs, Tensor) else xs)
    b = ys.shape[0]
    yy = np.floor(ys + 0.5).astype(np.int64)
    xx = np.floor(xs + 0.5).astype(np.int64)
    valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    base = (np.arange(b) * h * w).reshape((b,) + (1,) * (ys.ndim - 1))
    idx = (base + yy * w + xx)[valid]
    return np.bincount(idx, minlength=b * h * w).reshape(b, h, w)


def accumulate_frequency(ys, xs, h: int, w: int, mode: str = "soft") -> SamplingFrequencyMap:
    if mode == "soft":
        return SamplingFrequencyMap(soft_splat(ys, xs, h, w), "soft")
    if mode == "hard":
        return SamplingFrequencyMap(Tensor(hard_count(ys, xs, h, w).astype(np.float64)), "hard")
    raise ParameterError(f"unknown accumulation mode {mode!r}")


def value_map(freq: SamplingFrequencyMap) -> ValueMap:
    """The ranking key is the (detached) sampling frequency itself."""
    return ValueMap(np.array(freq.grid.data))


# -- explicit prior ------------------------------------------------------------
def explicit_prior(features, source: str = "external") -> PriorMap:
    """Channel-wise L2 norm of (C, h, w) or (B, C, h, w) features."""
    feats = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    if feats.ndim not in (3, 4):
        raise ShapeError(f"features must be (C, h, w) or (B, C, h, w), got {feats.shape}")
    if not np.isfinite(feats).all():
        raise ValueError("prior features contain non-finite values")
    return PriorMap(np.sqrt((feats * feats).sum(axis=-3)), source)


def load_prior(path) -> PriorMap:
    """Read a VRST feature tensor and reduce it to a prior."""
    arr = vrst.load(path).astype(np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return explicit_prior(arr, source=f"file:{path}")


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def _sobel_magnitude(gray: np.ndarray) -> np.ndarray:
    p = np.pad(gray, 1, mode="edge")
    h, w = gray.shape
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    for i in range(3):
        for j in range(3):
            win = p[i:i + h, j:j + w]
            gx += _SOBEL_X[i, j] * win
            gy += _SOBEL_X[j, i] * win
    return np.sqrt(gx * gx + gy * gy)


def prior_from_reference(reference, size: int = PRIOR_SIZE) -> PriorMap:
    """Sobel gradient magnitude of the grayscale reference, average-pooled to
    ``size`` x ``size`` and min-max scaled to [0, 1].

    ``reference`` is (3, H, W) or (H, W) in [0, 1]. A map with no spread
    (e.g. a constant image) yields all zeros and a warning.
    """
    ref = np.asarray(reference, dtype=np.float64)
    gray = ref if ref.ndim == 2 else 0.299 * ref[0] + 0.587 * ref[1] + 0.114 * ref[2]
    mag = _sobel_magnitude(gray)
    with no_grad():
        pooled = ops.adaptive_avg_pool2d(Tensor(mag), size, size).data
    lo, hi = pooled.min(), pooled.max()
    if hi - lo <= 1e-12:
        warnings.warn("reference has no gradient spread; prior is all zero", RuntimeWarning, stacklevel=2)
        return PriorMap(np.zeros((size, size)), "reference-gradient")
    return PriorMap((pooled - lo) / (hi - lo), "reference-gradient")


def upsample_prior(prior: PriorMap, h: int, w: int) -> np.ndarray:
    """D upsampled to (B, h, w) (or (h, w)) with the bilinear convention of the network."""
    with no_grad():
        return ops.bilinear_resize(Tensor(prior.grid), h, w).data


# -- guidance losses -------------------------------------------------------------
def topk_masks(q: np.ndarray, ratios=DEFAULT_RATIOS) -> list[np.ndarray]:
    """Boolean masks over the top ceil(r * N) entries of each row of ``q``.

    Ties break by raster index, so masks are deterministic and nested.
    """
    q = np.atleast_2d(np.asarray(q))
    n = q.shape[-1]
    order = np.argsort(-q, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(n), order.shape), axis=-1)
    masks = []
    for r in ratios:
        if not 0 < r <= 1 or r * n < 1:
            raise ParameterError(f"top-k ratio {r} selects no pixels out of {n}")
        masks.append(rank < math.ceil(r * n))
    return masks


def masked_kl(p: Tensor, q: np.ndarray, ratios=DEFAULT_RATIOS, eps: float = KL_EPS) -> Tensor:
    """Sum over masks of KL(q_i || p_i), each renormalized inside its mask.

    ``p`` (B, N) carries gradients, ``q`` (B, N) is a constant. The result is
    averaged over the batch.
    """
    p = as_tensor(p)
    if p.ndim == 1:
        p = p.reshape(1, -1)
    q = np.atleast_2d(np.asarray(q, dtype=p.dtype))
    if q.shape != p.shape:
        raise ShapeError(f"p {p.shape} and q {q.shape} differ")
    total = None
    for mask in topk_masks(q, ratios):
        m = mask.astype(p.dtype)
        qm = q * m
        qn = qm / qm.sum(axis=-1, keepdims=True)
        qlogq = np.where(qn > 0, qn * np.log(np.where(qn > 0, qn, 1.0)), 0.0).sum()
        pm = p * m
        pn = pm / tsum(pm, axis=-1, keepdims=True)
        cross = tsum(tlog(pn + eps) * qn)
        kl = (cross * -1.0 + float(qlogq)) * (1.0 / p.shape[0])
        total = kl if total is None else total + kl
    return total


def mvgl_loss(freq, prior: PriorMap, temperature: float, ratios=DEFAULT_RATIOS, eps: float = KL_EPS) -> Tensor:
    """Multi-granularity masked KL between softmax(S/T) and softmax(D_up/T).

    The prior side is a constant; gradients reach S only.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    s = freq.grid if isinstance(freq, SamplingFrequencyMap) else as_tensor(freq)
    if s.ndim == 2:
        s = s.reshape(1, *s.shape)
    b, h, w = s.shape
    d_up = upsample_prior(prior, h, w)
    d_up = np.broadcast_to(d_up.reshape(-1, h * w), (b, h * w))
    with no_grad():
        q = ops.tempered_softmax(Tensor(np.array(d_up, dtype=s.dtype)), temperature).data
    p = ops.tempered_softmax(s.reshape(b, h * w), temperature)
    return masked_kl(p, q, ratios, eps)


def pooled_kl_loss(freq, prior: PriorMap, temperature: float, eps: float = KL_EPS) -> Tensor:
    """KL(D || pool(S)) on the prior's own lattice, unmasked."""
    s = freq.grid if isinstance(freq, SamplingFrequencyMap) else as_tensor(freq)
    b = s.shape[0]
    grid = np.broadcast_to(prior.grid.reshape(-1, *prior.grid.shape[-2:]), (b,) + prior.grid.shape[-2:])
    ph, pw = grid.shape[-2:]
    pooled = ops.adaptive_avg_pool2d(s, ph, pw).reshape(b, ph * pw)
    with no_grad():
        q = ops.tempered_softmax(Tensor(np.array(grid.reshape(b, ph * pw), dtype=s.dtype)), temperature).data
    return masked_kl(ops.tempered_softmax(pooled, temperature), q, (1.0,), eps)


# -- block-level component -------------------------------------------------------
@dataclass
class GuidanceOutput:
    value: np.ndarray  # (B, H, W) ranking key
    loss: Tensor | None = None
    freq: SamplingFrequencyMap | None = field(default=None, repr=False)


class MVGL(Module):
    """Offset head plus the rules turning its samples into a value map and a guidance loss.

    ``guidance``: ``"d"`` multi-granularity masked KL, ``"c"`` unmasked KL at
    full resolution, ``"b"`` KL on the pooled 16x16 lattice.
    """

    def __init__(self, channels: int, k: int = 1, guidance: str = "d", ratios=DEFAULT_RATIOS,
                 eps: float = KL_EPS, rng=None, dtype=np.float64):
        if guidance not in ("b", "c", "d"):
            raise ParameterError(f"guidance {guidance!r} has no learned sampling branch")
        self.head = OffsetHead(channels, k, rng=rng, dtype=dtype)
        self.k = k
        self.guidance = guidance
        self.ratios = tuple(ratios)
        self.eps = eps

    def forward(self, x1: Tensor, prior: PriorMap | None = None, temperature: float | None = None) -> GuidanceOutput:
        b, _, h, w = x1.shape
        ys, xs = sample_locations(self.head(x1), h, w)
        freq = accumulate_frequency(ys, xs, h, w, "soft")
        value = value_map(freq).grid
        loss = None
        if prior is not None and self.training:
            if temperature is None:
                raise ParameterError("guidance loss needs a temperature")
            if self.guidance == "b":
                loss = pooled_kl_loss(freq, prior, temperature, self.eps)
            elif self.guidance == "c":
                loss = mvgl_loss(freq, prior, temperature, (1.0,), self.eps)
            else:
                loss = mvgl_loss(freq, prior, temperature, self.ratios, self.eps)
        return GuidanceOutput(value, loss, freq)
