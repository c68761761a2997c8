"""Synthetic underwater pairs: procedural clean scenes degraded by a
wavelength-dependent attenuation + veiling-light model with additive noise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core.tensor import ParameterError


@dataclass
class DegradationParams:
    """Attenuation per channel (R, G, B), ambient veil per channel, depth map, noise std."""

    beta: np.ndarray
    ambient: np.ndarray
    depth: np.ndarray
    sigma: float = 0.0

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(3)
        self.ambient = np.asarray(self.ambient, dtype=np.float64).reshape(3)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if not (self.beta[0] >= self.beta[1] >= self.beta[2] >= 0):
            raise ParameterError(f"attenuation must satisfy beta_R >= beta_G >= beta_B >= 0, got {self.beta}")
        if ((self.ambient < 0) | (self.ambient > 1)).any():
            raise ParameterError("ambient light must lie in [0, 1]")
        if self.sigma < 0 or (self.depth < 0).any():
            raise ParameterError("noise std and depth must be non-negative")


def smooth_field(rng: np.random.Generator, h: int, w: int, lo: float, hi: float, coarse: int = 4) -> np.ndarray:
    """Bilinear upsampling of a coarse uniform grid: a smooth field in [lo, hi]."""
    grid = rng.uniform(lo, hi, (coarse, coarse))
    ys = np.linspace(0, coarse - 1, h)
    xs = np.linspace(0, coarse - 1, w)
    y0 = np.minimum(ys.astype(int), coarse - 2)
    x0 = np.minimum(xs.astype(int), coarse - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x0 + 1] * fx
    bot = grid[y0 + 1][:, x0] * (1 - fx) + grid[y0 + 1][:, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def random_params(rng: np.random.Generator, h: int, w: int) -> DegradationParams:
    beta_b = rng.uniform(0.05, 0.25)
    beta_g = beta_b + rng.uniform(0.05, 0.3)
    beta_r = beta_g + rng.uniform(0.3, 0.8)
    ambient = np.array([rng.uniform(0.0, 0.15), rng.uniform(0.35, 0.6), rng.uniform(0.45, 0.75)])
    depth = smooth_field(rng, h, w, 0.5, 2.5)
    return DegradationParams(np.array([beta_r, beta_g, beta_b]), ambient, depth, float(rng.uniform(0.0, 0.01)))


def synth_degrade(clean, params: DegradationParams, seed: int = 0) -> np.ndarray:
    """I = J * t + B * (1 - t) + N(0, sigma), t = exp(-beta * d), clamped to [0, 1]."""
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim != 3 or clean.shape[0] != 3:
        raise ValueError(f"clean image must be (3, H, W), got {clean.shape}")
    if params.depth.shape != clean.shape[1:]:
        raise ValueError(f"depth {params.depth.shape} does not match image {clean.shape[1:]}")
    trans = np.exp(-params.beta[:, None, None] * params.depth[None])
    out = clean * trans + params.ambient[:, None, None] * (1.0 - trans)
    if params.sigma > 0:
        out = out + np.random.default_rng(seed).normal(0.0, params.sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def clean_scene(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Gradient background with a few flat-colored disks and rectangles and a faint texture."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    top, bottom = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    t = (yy / max(h - 1, 1))[None]
    img = top[:, None, None] * (1 - t) + bottom[:, None, None] * t
    for _ in range(int(rng.integers(3, 7))):
        color = rng.uniform(0.05, 0.95, 3)[:, None, None]
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if rng.random() < 0.5:
            r = rng.uniform(0.1, 0.3) * min(h, w)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            hh, hw = rng.uniform(0.1, 0.3) * h, rng.uniform(0.1, 0.3) * w
            mask = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
        img = np.where(mask[None], color, img)
    freq = rng.uniform(0.2, 0.6, 2)
    texture = 0.04 * np.sin(freq[0] * yy + rng.uniform(0, 6.3)) * np.sin(freq[1] * xx + rng.uniform(0, 6.3))
    return np.clip(img + texture[None], 0.0, 1.0)


@dataclass
class Pair:
    degraded: np.ndarray
    clean: np.ndarray


def make_pair(seed: int, index: int, size: int) -> Pair:
    rng = np.random.default_rng([seed, index])
    clean = clean_scene(rng, size, size)
    params = random_params(rng, size, size)
    return Pair(synth_degrade(clean, params, seed=int(rng.integers(2 ** 31))), clean)


def make_pairs(n: int, size: int, seed: int = 0, offset: int = 0) -> list[Pair]:
    """``n`` seed-deterministic pairs; ``offset`` selects a disjoint index range (held-out sets)."""
    return [make_pair(seed, offset + i, size) for i in range(n)]
