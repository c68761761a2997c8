"""U-Net assembly: patch embed, three encoder scales, bottleneck, mirrored
decoder with a cross-feature bridge on every skip, zero-initialized head
added to the input as a global residual.

Stages are numbered 0..6: encoder scales 0-2, bottleneck 3, decoder scales
4-6 (deepest first). Blocks are numbered globally in forward order.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .cfb import BridgeConfig, CrossFeatureBridge
from .core import ops
from .core.tensor import ParameterError, ShapeError, Tensor, clip
from .mcm import GUIDANCE, MIXERS, SCAN_ORDERS, BlockConfig, MCMBlock
from .mvgl import DEFAULT_RATIOS, KL_EPS, PRIOR_SIZE, PriorMap, _sobel_magnitude
from .nn import Conv2d, Module, ModuleList

N_STAGES = 7
STAGE_NAMES = ("enc1", "enc2", "enc3", "bottleneck", "dec3", "dec2", "dec1")


@dataclass
class NetConfig:
    base_channels: int = 32
    enc_depths: tuple = (2, 2, 2)
    bottleneck_depth: int = 2
    dec_depths: tuple = (2, 2, 2)
    mlp_ratio: int = 2
    d_state: int = 8
    groups: int = 4
    reduction: int = 4
    k: int = 1
    window: int = 4
    mixer: str = "both"
    scan_order: str = "value"
    dynamic_conv: bool = True
    cfb: bool = True
    guidance: str = "d"
    ratios: tuple = field(default=DEFAULT_RATIOS)
    kl_eps: float = KL_EPS
    scan_impl: str = "sequential"

    def __post_init__(self):
        self.enc_depths = tuple(int(d) for d in self.enc_depths)
        self.dec_depths = tuple(int(d) for d in self.dec_depths)
        self.ratios = tuple(float(r) for r in self.ratios)
        if self.base_channels < 2 or self.base_channels % 2:
            raise ParameterError(f"base_channels must be a positive even number, got {self.base_channels}")
        if len(self.enc_depths) != 3 or len(self.dec_depths) != 3:
            raise ParameterError("enc_depths and dec_depths must list three stage depths")
        if min(self.enc_depths + self.dec_depths + (self.bottleneck_depth,)) < 0:
            raise ParameterError("stage depths must be non-negative")
        if self.mixer not in MIXERS or self.scan_order not in SCAN_ORDERS or self.guidance not in GUIDANCE:
            raise ParameterError(f"invalid mixer/scan_order/guidance: {self.mixer}/{self.scan_order}/{self.guidance}")
        if self.window < 1:
            raise ParameterError("window must be >= 1")

    def block_config(self, channels: int) -> BlockConfig:
        return BlockConfig(channels, self.mlp_ratio, self.d_state, self.k, self.groups, self.reduction,
                           self.mixer, self.scan_order, self.dynamic_conv, self.guidance, self.ratios,
                           self.kl_eps, self.scan_impl)

    def stage_channels(self) -> list[int]:
        c = self.base_channels
        return [c, 2 * c, 4 * c, 4 * c, 4 * c, 2 * c, c]

    def stage_depths(self) -> list[int]:
        return list(self.enc_depths) + [self.bottleneck_depth] + list(self.dec_depths)[::-1]

    @property
    def uses_mvgl(self) -> bool:
        return self.mixer != "conv" and self.scan_order != "four_way" and self.guidance != "a"

    def with_(self, **kw) -> NetConfig:
        return replace(self, **kw)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def input_ranking(x: np.ndarray, size: int = PRIOR_SIZE) -> PriorMap:
    """Gradient-proxy ranking computed from the network input (no reference image).

    Only used by the non-learned guidance ablation, which ranks pixels
    directly by a coarse map at inference as well as in training.
    """
    x = np.asarray(x, dtype=np.float64)
    grids = []
    for img in x:
        gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
        pooled = ops.adaptive_avg_pool2d(Tensor(_sobel_magnitude(gray)), size, size).data
        spread = pooled.max() - pooled.min()
        grids.append((pooled - pooled.min()) / spread if spread > 1e-12 else np.zeros_like(pooled))
    return PriorMap(np.stack(grids), "input-gradient")


class UIENet(Module):
    def __init__(self, cfg: NetConfig, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        c = cfg.base_channels
        chans = cfg.stage_channels()
        self.embed = Conv2d(3, c, 3, rng=rng, dtype=dtype)
        self.down = ModuleList([Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1, rng=rng, dtype=dtype)
                                for i in range(3)])
        self.block = ModuleList()
        self.stage_of_block: list[int] = []
        decoder_cfb = []
        for stage, (ch, depth) in enumerate(zip(chans, cfg.stage_depths())):
            if stage >= 4:
                level = 6 - stage
                decoder_cfb.append((level, ch, chans[stage - 1]))
            for _ in range(depth):
                self.block.append(MCMBlock(cfg.block_config(ch), rng, dtype))
                self.stage_of_block.append(stage)
        # cfb{level}: level 0 is the full-resolution skip
        by_level = {lvl: (ce, cd) for lvl, ce, cd in decoder_cfb}
        self.cfb = ModuleList([CrossFeatureBridge(BridgeConfig(by_level[lvl][0], by_level[lvl][1], cfg.window,
                                                               enabled=cfg.cfb), rng, dtype)
                               for lvl in range(3)])
        self.head = Conv2d(c, 3, 3, rng=rng, dtype=dtype, zero=True)

    @property
    def multiple(self) -> int:
        return 8

    def stage_blocks(self, stage: int) -> list[MCMBlock]:
        return [b for b, s in zip(self.block, self.stage_of_block) if s == stage]

    def _stage_priors(self, priors) -> list[PriorMap | None]:
        if priors is None or isinstance(priors, PriorMap):
            return [priors] * N_STAGES
        priors = list(priors)
        if len(priors) != N_STAGES:
            raise ParameterError(f"expected one prior per stage ({N_STAGES}), got {len(priors)}")
        return priors

    def forward(self, x: Tensor, priors=None, temperature: float | None = None) -> tuple[Tensor, list[Tensor]]:
        """Returns the enhanced image and the per-block guidance loss terms."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) input, got {x.shape}")
        h, w = x.shape[2:]
        if h % self.multiple or w % self.multiple:
            raise ShapeError(f"input extent {h}x{w} must be divisible by {self.multiple}")
        stage_priors = self._stage_priors(priors)
        ranking = input_ranking(x.data) if self.cfg.guidance == "a" and self.cfg.mixer != "conv" else None
        terms: list[Tensor] = []
        pending = list(zip(self.block, self.stage_of_block))

        def run_stage(feat, stage):
            for blk, s in pending:
                if s == stage:
                    feat, loss = blk(feat, stage_priors[stage], temperature, ranking)
                    if loss is not None:
                        terms.append(loss)
            return feat

        feat = self.embed(x)
        skips = []
        for stage in range(3):
            feat = run_stage(feat, stage)
            skips.append(feat)
            feat = self.down[stage](feat)
        feat = run_stage(feat, 3)
        for stage in range(4, 7):
            level = 6 - stage
            feat = self.cfb[level](skips[level], feat)
            feat = run_stage(feat, stage)
        out = clip(x + self.head(feat), 0.0, 1.0)
        return out, terms

    def value_maps(self) -> dict[int, np.ndarray]:
        """Ranking key used by the first scanning block of each stage in the last forward."""
        maps = {}
        for blk, stage in zip(self.block, self.stage_of_block):
            scan = getattr(blk, "scan", None)
            if stage not in maps and scan is not None and scan.last_value is not None:
                maps[stage] = scan.last_value
        return maps


def build_unet(cfg: NetConfig, seed: int = 0, dtype=np.float64) -> UIENet:
    return UIENet(cfg, np.random.default_rng(seed), dtype)


def count_parameters(cfg: NetConfig) -> int:
    return build_unet(cfg).num_parameters()
