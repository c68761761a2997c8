"""Mamba-Conv Mixer block.

Pre-norm residual layout: y1 = x + Mixer(LN(x)), y = y1 + MLP(LN(y1)).
The mixer splits channels in half; the first half goes through the
value-reordered scan, the second through a per-sample dynamic depthwise
convolution, and a fusion unit merges the two.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ops
from .core.tensor import ParameterError, ShapeError, Tensor, concat, tsum
from .mvgl import DEFAULT_RATIOS, KL_EPS, MVGL, PriorMap, upsample_prior
from .nn import Conv2d, GroupNorm, LayerNorm2d, Module, Parameter
from .scan import ScanParams, four_way_scan, reordered_scan

MIXERS = ("both", "scan", "conv")
SCAN_ORDERS = ("value", "reversed", "four_way")
GUIDANCE = ("a", "b", "c", "d")


@dataclass
class BlockConfig:
    channels: int
    mlp_ratio: int = 2
    d_state: int = 8
    k: int = 1
    groups: int = 4  # experts in the kernel bank
    reduction: int = 4
    mixer: str = "both"
    scan_order: str = "value"
    dynamic_conv: bool = True
    guidance: str = "d"
    ratios: tuple = field(default=DEFAULT_RATIOS)
    kl_eps: float = KL_EPS
    scan_impl: str = "sequential"

    def __post_init__(self):
        if self.channels < 2 or self.channels % 2:
            raise ParameterError(f"block channels must be even, got {self.channels}")
        if self.mixer not in MIXERS:
            raise ParameterError(f"mixer must be one of {MIXERS}")
        if self.scan_order not in SCAN_ORDERS:
            raise ParameterError(f"scan_order must be one of {SCAN_ORDERS}")
        if self.guidance not in GUIDANCE:
            raise ParameterError(f"guidance must be one of {GUIDANCE}")
        if self.groups < 1 or self.k < 1 or self.d_state < 1 or self.mlp_ratio < 1:
            raise ParameterError("groups, k, d_state and mlp_ratio must be >= 1")

    @property
    def scan_channels(self) -> int:
        return {"both": self.channels // 2, "scan": self.channels, "conv": 0}[self.mixer]

    @property
    def conv_channels(self) -> int:
        return self.channels - self.scan_channels

    @property
    def learns_value(self) -> bool:
        return self.scan_order != "four_way" and self.guidance != "a"


# -- dynamic convolution ---------------------------------------------------------
class DynamicConv(Module):
    """Softmax-weighted mixture of G depthwise 3x3 expert kernels, weights from pooled input."""

    def __init__(self, channels: int, groups: int = 4, reduction: int = 4, rng=None, dtype=np.float64,
                 dynamic: bool = True):
        if channels % reduction:
            raise ParameterError(f"dynamic conv: {channels} channels not divisible by reduction {reduction}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.groups = groups
        self.dynamic = dynamic
        self.bank = Parameter(rng.uniform(-1 / 3, 1 / 3, (groups, channels, 3, 3)), dtype=dtype)
        if dynamic:
            self.reduce = Conv2d(channels, channels // reduction, 1, rng=rng, dtype=dtype)
            self.expand = Conv2d(channels // reduction, groups * channels, 1, rng=rng, dtype=dtype)

    def weights(self, x2: Tensor) -> Tensor:
        """Softmax attention over experts, shape (B, G, C)."""
        b = x2.shape[0]
        pooled = x2.mean(axis=(2, 3), keepdims=True)
        logits = self.expand(self.reduce(pooled)).reshape(b, self.groups, self.channels)
        return ops.softmax(logits, axis=1)

    def kernels(self, x2: Tensor) -> Tensor:
        """Per-sample depthwise kernels, shape (B, C, 3, 3)."""
        att = self.weights(x2)
        b = x2.shape[0]
        mix = att.reshape(b, self.groups, self.channels, 1, 1) * self.bank.reshape(1, *self.bank.shape)
        return tsum(mix, axis=1)

    def forward(self, x2: Tensor) -> Tensor:
        if x2.shape[1] != self.channels:
            raise ShapeError(f"dynamic conv expects {self.channels} channels, got {x2.shape[1]}")
        if not self.dynamic:
            static = self.bank[0].reshape(self.channels, 1, 3, 3)
            return ops.conv2d(x2, static, None, 1, 1, self.channels)
        return ops.depthwise_conv2d_per_sample(x2, self.kernels(x2), padding=1)


def dynamic_kernel(x2: Tensor, bank: DynamicConv) -> Tensor:
    return bank.kernels(x2)


def dynamic_conv(x2: Tensor, bank: DynamicConv) -> Tensor:
    return bank(x2)


# -- fusion -----------------------------------------------------------------
def _norm_groups(channels: int, preferred: int = 4) -> int:
    return math.gcd(channels, preferred)


class FusionUnit(Module):
    """concat -> (3x3 depthwise, 1x1, GN, GELU, 1x1, GN, GELU) + residual."""

    def __init__(self, channels: int, rng=None, dtype=np.float64, zero: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        g = _norm_groups(channels)
        self.dw = Conv2d(channels, channels, 3, groups=channels, rng=rng, dtype=dtype, zero=zero)
        self.pw1 = Conv2d(channels, channels, 1, rng=rng, dtype=dtype, zero=zero)
        self.gn1 = GroupNorm(g, channels, dtype=dtype)
        self.pw2 = Conv2d(channels, channels, 1, rng=rng, dtype=dtype, zero=zero)
        self.gn2 = GroupNorm(g, channels, dtype=dtype)

    def fuse(self, f_cat: Tensor) -> Tensor:
        h = self.dw(f_cat)
        h = ops.gelu(self.gn1(self.pw1(h)))
        return ops.gelu(self.gn2(self.pw2(h)))

    def forward(self, f_g: Tensor | None, f_l: Tensor | None) -> Tensor:
        parts = [t for t in (f_g, f_l) if t is not None]
        if len(parts) == 2 and f_g.shape[2:] != f_l.shape[2:]:
            raise ShapeError(f"fusion inputs differ in extent: {f_g.shape} vs {f_l.shape}")
        f_cat = concat(parts, axis=1) if len(parts) == 2 else parts[0]
        return self.fuse(f_cat) + f_cat


def fusion_unit(f_g: Tensor, f_l: Tensor, unit: FusionUnit) -> Tensor:
    return unit(f_g, f_l)


# -- scan path -----------------------------------------------------------------
class ScanPath(ScanParams):
    """Recurrence parameters plus the value-map branch that orders the scan."""

    def __init__(self, cfg: BlockConfig, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        c = cfg.scan_channels
        super().__init__(c, cfg.d_state, rng, dtype)
        self.order = cfg.scan_order
        self.impl = cfg.scan_impl
        self.guidance = cfg.guidance
        if cfg.learns_value:
            self.mvgl = MVGL(c, cfg.k, cfg.guidance, cfg.ratios, cfg.kl_eps, rng, dtype)
        self.last_value: np.ndarray | None = None

    def forward(self, x1: Tensor, prior: PriorMap | None = None, temperature: float | None = None,
                ranking: PriorMap | None = None) -> tuple[Tensor, Tensor | None]:
        h, w = x1.shape[2:]
        if self.order == "four_way":
            self.last_value = None
            return four_way_scan(x1, self, self.impl), None
        loss = None
        if self.guidance == "a":
            if ranking is None:
                raise ParameterError("guidance 'a' ranks by a lifted prior; none was given")
            value = upsample_prior(ranking, h, w)
        else:
            out = self.mvgl(x1, prior, temperature)
            value, loss = out.value, out.loss
        self.last_value = np.array(value)
        direction = "reversed" if self.order == "reversed" else "forward"
        return reordered_scan(x1, value, self, direction, self.impl), loss


class MLP(Module):
    def __init__(self, channels: int, ratio: int = 2, rng=None, dtype=np.float64, zero: bool = False):
        self.norm = LayerNorm2d(channels, dtype=dtype)
        self.fc1 = Conv2d(channels, channels * ratio, 1, rng=rng, dtype=dtype, zero=zero)
        self.fc2 = Conv2d(channels * ratio, channels, 1, rng=rng, dtype=dtype, zero=zero)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(self.norm(x))))


class MCMBlock(Module):
    def __init__(self, cfg: BlockConfig, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        c = cfg.channels
        self.split = LayerNorm2d(c, dtype=dtype)
        if cfg.scan_channels:
            self.scan = ScanPath(cfg, rng, dtype)
        if cfg.conv_channels:
            self.dyn = DynamicConv(cfg.conv_channels, cfg.groups, cfg.reduction, rng, dtype, cfg.dynamic_conv)
        self.fuse = FusionUnit(c, rng, dtype)
        self.mlp = MLP(c, cfg.mlp_ratio, rng, dtype)

    @property
    def carries_guidance(self) -> bool:
        return self.cfg.scan_channels > 0 and self.cfg.learns_value

    def mixer(self, xn: Tensor, prior=None, temperature=None, ranking=None) -> tuple[Tensor, Tensor | None]:
        c1 = self.cfg.scan_channels
        f_g = f_l = loss = None
        if c1:
            x1 = xn if c1 == self.cfg.channels else xn[:, :c1]
            f_g, loss = self.scan(x1, prior, temperature, ranking)
        if self.cfg.conv_channels:
            x2 = xn if not c1 else xn[:, c1:]
            f_l = self.dyn(x2)
        return self.fuse(f_g, f_l), loss

    def forward(self, x: Tensor, prior: PriorMap | None = None, temperature: float | None = None,
                ranking: PriorMap | None = None) -> tuple[Tensor, Tensor | None]:
        if x.shape[1] != self.cfg.channels:
            raise ShapeError(f"block expects {self.cfg.channels} channels, got {x.shape[1]}")
        mixed, loss = self.mixer(self.split(x), prior, temperature, ranking)
        y1 = x + mixed
        return y1 + self.mlp(y1), loss


def mcm_forward(x: Tensor, block: MCMBlock, prior=None, temperature=None, ranking=None):
    return block(x, prior, temperature, ranking)
