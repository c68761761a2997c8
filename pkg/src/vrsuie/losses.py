"""Training objective: weighted L1, (1 - SSIM), Laplacian edge Charbonnier and
the averaged guidance term."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.tensor import ParameterError, ShapeError, Tensor, as_tensor, concat, sqrt, tabs

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
EDGE_EPS = 1e-3
LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class LossWeights:
    l1: float = 8.0
    ssim: float = 1.0
    edge: float = 4.0
    mvgl: float = 2e-3

    def __post_init__(self):
        if min(self.l1, self.ssim, self.edge, self.mvgl) < 0:
            raise ParameterError("loss weights must be non-negative")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.l1, self.ssim, self.edge, self.mvgl)


def _check_pair(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    if pred.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W) images, got {pred.shape}")


def l1_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    _check_pair(pred, target)
    return tabs(pred - target).mean()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_window(h: int, w: int) -> int:
    size = SSIM_WINDOW
    if min(h, w) < size:
        size = min(h, w) if min(h, w) % 2 else min(h, w) - 1
        size = max(size, 1)
        warnings.warn(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window; "
                      f"using {size}x{size}", RuntimeWarning, stacklevel=3)
    return size


def ssim_map(pred, target) -> Tensor:
    """Per-pixel SSIM over valid window positions, shape (B, C, H', W').

    Local moments of both images come out of one depthwise Gaussian
    convolution and enter the formula symmetrically, so swapping the
    arguments gives bitwise identical values.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    _check_pair(pred, target)
    b, c, h, w = pred.shape
    size = _ssim_window(h, w)
    win = gaussian_window(size).astype(pred.dtype)
    stacked = concat([pred, target, pred * pred, target * target, pred * target], axis=1)
    kernel = Tensor(np.broadcast_to(win, (5 * c, 1, size, size)).copy())
    moments = ops.conv2d(stacked, kernel, None, 1, 0, 5 * c)
    mu_x, mu_y = moments[:, :c], moments[:, c:2 * c]
    exx, eyy, exy = moments[:, 2 * c:3 * c], moments[:, 3 * c:4 * c], moments[:, 4 * c:]
    mu_xy = mu_x * mu_y
    mu_xx, mu_yy = mu_x * mu_x, mu_y * mu_y
    var_sum = (exx - mu_xx) + (eyy - mu_yy)
    cov = exy - mu_xy
    num = (mu_xy * 2.0 + SSIM_C1) * (cov * 2.0 + SSIM_C2)
    den = (mu_xx + mu_yy + SSIM_C1) * (var_sum + SSIM_C2)
    return num / den


def ssim(pred, target) -> Tensor:
    """Mean single-scale SSIM (11x11 Gaussian window, sigma 1.5) on [0, 1] images."""
    return ssim_map(pred, target).mean()


def laplacian(x: Tensor) -> Tensor:
    c = x.shape[1]
    kernel = Tensor(np.broadcast_to(LAPLACIAN.astype(x.dtype), (c, 1, 3, 3)).copy())
    return ops.conv2d(x, kernel, None, 1, 1, c)


def edge_loss(pred, target, eps: float = EDGE_EPS) -> Tensor:
    """Mean Charbonnier distance sqrt(d^2 + eps^2) between Laplacian edge maps (zero padding).

    Averaged as eps + mean(sqrt(d^2 + eps^2) - eps) so identical inputs give
    exactly eps.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    _check_pair(pred, target)
    d = laplacian(pred) - laplacian(target)
    return (sqrt(d * d + eps * eps) - eps).mean() + eps


@dataclass
class LossComponents:
    l1: float
    ssim: float  # the (1 - SSIM) term
    edge: float
    mvgl: float | None
    total: float


def loss_total(pred, target, mvgl_terms=(), weights: LossWeights = LossWeights(),
               edge_eps: float = EDGE_EPS) -> tuple[Tensor, LossComponents]:
    """lambda1 * L1 + lambda2 * (1 - SSIM) + lambda3 * edge + lambda4 * mean(guidance terms).

    With no guidance terms the fourth component is reported as ``None``.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    _check_pair(pred, target)
    l1 = l1_loss(pred, target)
    lssim = 1.0 - ssim(pred, target)
    ledge = edge_loss(pred, target, edge_eps)
    total = l1 * weights.l1 + lssim * weights.ssim + ledge * weights.edge
    lmvgl = None
    terms = list(mvgl_terms)
    if terms:
        acc = terms[0]
        for t in terms[1:]:
            acc = acc + t
        lmvgl = acc * (1.0 / len(terms))
        total = total + lmvgl * weights.mvgl
    comps = LossComponents(float(l1.data), float(lssim.data), float(ledge.data),
                           None if lmvgl is None else float(lmvgl.data), float(total.data))
    return total, comps
