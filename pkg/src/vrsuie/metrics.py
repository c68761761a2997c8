"""Full-reference quality metrics plus the no-reference UCIQE index.

Images are float arrays in [0, 1], shaped (3, H, W) or (B, 3, H, W).
"""
from __future__ import annotations

import math

import numpy as np

from .core.tensor import Tensor, no_grad
from .losses import ssim as _ssim

PSNR_CAP = 99.0
UCIQE_WEIGHTS = (0.4680, 0.2745, 0.2576)

# sRGB (D65) to XYZ
_RGB2XYZ = np.array([[0.412453, 0.357580, 0.180423],
                     [0.212671, 0.715160, 0.072169],
                     [0.019334, 0.119193, 0.950227]])
# white point from the matrix itself, so achromatic input maps to a* = b* = 0
_WHITE = _RGB2XYZ.sum(axis=1)


def _batched(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def mse(pred, target) -> float:
    """Mean squared error on the [0, 1] scale."""
    d = _batched(pred) - _batched(target)
    return float(np.mean(d * d))


def mse255(pred, target) -> float:
    """Mean squared error on the [0, 255] scale (the reported MSE)."""
    return mse(pred, target) * 255.0 * 255.0


def psnr(pred, target) -> float:
    """10 log10(1 / MSE) on [0, 1] data, capped at 99 dB when MSE < 1e-10."""
    err = mse(pred, target)
    if err < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / err)


def ssim(pred, target) -> float:
    with no_grad():
        return float(_ssim(Tensor(_batched(pred)), Tensor(_batched(target))).data)


def rgb_to_lab(img) -> np.ndarray:
    """sRGB in [0, 1], channel-first, to CIE L*a*b* (D65), channel-first."""
    rgb = np.asarray(img, dtype=np.float64)
    lin = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    xyz = np.tensordot(_RGB2XYZ, lin, axes=(1, 0)) / _WHITE.reshape(3, *([1] * (rgb.ndim - 1)))
    f = np.where(xyz > 0.008856, np.cbrt(xyz), 7.787 * xyz + 16.0 / 116.0)
    l_star = np.where(xyz[1] > 0.008856, 116.0 * np.cbrt(xyz[1]) - 16.0, 903.3 * xyz[1])
    return np.stack([l_star, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])])


def uciqe(img) -> float:
    """0.4680 * std(chroma) + 0.2745 * luminance contrast + 0.2576 * mean saturation.

    Computed in CIELab with L and chroma scaled to [0, 1] (divided by 100);
    contrast is the spread between the 99th and 1st percentile of L, and
    saturation is C / sqrt(C^2 + L^2) (zero where both vanish).
    """
    lab = rgb_to_lab(img)
    lum = lab[0] / 100.0
    chroma = np.hypot(lab[1], lab[2]) / 100.0
    contrast = float(np.percentile(lum, 99) - np.percentile(lum, 1))
    denom = np.hypot(chroma, lum)
    sat = np.divide(chroma, denom, out=np.zeros_like(chroma), where=denom > 0)
    w_c, w_l, w_s = UCIQE_WEIGHTS
    return w_c * float(np.std(chroma)) + w_l * contrast + w_s * float(np.mean(sat))


def metrics(pred, target) -> dict[str, float]:
    pred, target = _batched(pred), _batched(target)
    return {
        "psnr": psnr(pred, target),
        "ssim": ssim(pred, target),
        "mse": mse255(pred, target),
        "uciqe": float(np.mean([uciqe(p) for p in pred])),
    }
