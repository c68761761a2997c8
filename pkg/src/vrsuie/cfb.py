"""Cross-feature bridge for U-Net skip connections.

The encoder feature attends to itself inside non-overlapping windows and to
the (channel-aligned) decoder feature globally; a sigmoid gate computed from
both attended maps blends the raw encoder feature with the upsampled
decoder feature.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.tensor import ParameterError, ShapeError, Tensor, concat, reshape, sigmoid, transpose
from .nn import Conv2d, Module


@dataclass
class BridgeConfig:
    channels: int
    decoder_channels: int
    window: int = 4
    heads: int = 1
    enabled: bool = True

    def __post_init__(self):
        if self.window < 1:
            raise ParameterError("window size must be >= 1")
        if self.heads != 1:
            raise ParameterError("only single-head attention is implemented")


def _tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return transpose(reshape(x, (b, c, h * w)), (0, 2, 1))


def _untokens(t: Tensor, h: int, w: int) -> Tensor:
    b, _, c = t.shape
    return reshape(transpose(t, (0, 2, 1)), (b, c, h, w))


def _partition(x: Tensor, ws: int) -> Tensor:
    b, c, h, w = x.shape
    t = reshape(x, (b, c, h // ws, ws, w // ws, ws))
    t = transpose(t, (0, 2, 4, 3, 5, 1))
    return reshape(t, (b * (h // ws) * (w // ws), ws * ws, c))


def _merge(t: Tensor, b: int, c: int, h: int, w: int, ws: int) -> Tensor:
    x = reshape(t, (b, h // ws, w // ws, ws, ws, c))
    x = transpose(x, (0, 5, 1, 3, 2, 4))
    return reshape(x, (b, c, h, w))


def window_self_attention(f_h: Tensor, q: Conv2d, k: Conv2d, v: Conv2d, window: int) -> Tensor:
    """Attention inside ``window`` x ``window`` tiles, scale 1/sqrt(C).

    Extents that are not multiples of the window are reflect-padded first;
    padded pixels act as keys and are cropped from the output.
    """
    b, c, h, w = f_h.shape
    ph, pw = (-h) % window, (-w) % window
    qs, ks, vs = q(f_h), k(f_h), v(f_h)
    if ph or pw:
        qs, ks, vs = (ops.pad2d(t, 0, ph, 0, pw, "reflect") for t in (qs, ks, vs))
    hp, wp = h + ph, w + pw
    out = ops.attention(_partition(qs, window), _partition(ks, window), _partition(vs, window),
                        ops.default_scale(c))
    out = _merge(out, b, c, hp, wp, window)
    if ph or pw:
        out = out[:, :, :h, :w]
    return out


def cross_attention(f_h: Tensor, f_l1: Tensor, q: Conv2d, k: Conv2d, v: Conv2d) -> Tensor:
    """Encoder pixels query the aligned decoder tokens; output has the encoder extent."""
    b, c, h, w = f_h.shape
    if f_l1.shape[:2] != (b, c):
        raise ShapeError(f"aligned decoder feature {f_l1.shape} does not match encoder {f_h.shape}")
    out = ops.attention(_tokens(q(f_h)), _tokens(k(f_l1)), _tokens(v(f_l1)), ops.default_scale(c))
    return _untokens(out, h, w)


def gated_fusion(f_h: Tensor, f_h_att: Tensor, f_l1_att: Tensor, f_l1: Tensor, gate: Conv2d) -> Tensor:
    """W * f_h + (1 - W) * up(f_l1), W = sigmoid(gate([f_h_att, f_l1_att]))."""
    h, w = f_h.shape[2:]
    weight = sigmoid(gate(concat([f_h_att, f_l1_att], axis=1)))
    up = ops.bilinear_resize(f_l1, h, w)
    return weight * f_h + (1.0 - weight) * up


class CrossFeatureBridge(Module):
    def __init__(self, cfg: BridgeConfig, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        c = cfg.channels
        self.align = Conv2d(cfg.decoder_channels, c, 1, rng=rng, dtype=dtype)
        if cfg.enabled:
            self.q = Conv2d(c, c, 1, rng=rng, dtype=dtype)
            self.k = Conv2d(c, c, 1, rng=rng, dtype=dtype)
            self.v = Conv2d(c, c, 1, rng=rng, dtype=dtype)
            self.gate = Conv2d(2 * c, c, 1, rng=rng, dtype=dtype)

    def forward(self, f_h: Tensor, f_l: Tensor) -> Tensor:
        if f_h.shape[1] != self.cfg.channels or f_l.shape[1] != self.cfg.decoder_channels:
            raise ShapeError(f"bridge expects ({self.cfg.channels}, {self.cfg.decoder_channels}) channels, "
                             f"got {f_h.shape[1]} and {f_l.shape[1]}")
        f_l1 = self.align(f_l)
        if not self.cfg.enabled:
            return f_h + ops.bilinear_resize(f_l1, *f_h.shape[2:])
        f_h_att = window_self_attention(f_h, self.q, self.k, self.v, self.cfg.window)
        f_l1_att = cross_attention(f_h, f_l1, self.q, self.k, self.v)
        return gated_fusion(f_h, f_h_att, f_l1_att, f_l1, self.gate)
