"""Training loop over seeded synthetic pairs.

Every iteration appends one JSON line (iter, T, L1, Lssim, Ledge, Lmvgl,
total, lr) to ``train.log``. Batch composition depends only on (seed,
iteration), so a run resumed from a checkpoint continues exactly where the
uninterrupted run would have.
"""
from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, prior_sources
from .core.tensor import NumericError, Tensor, no_grad
from .data import Pair, make_pairs
from .losses import loss_total
from .metrics import metrics
from .mvgl import PriorMap, TemperatureSchedule, load_prior, prior_from_reference
from .net import N_STAGES, UIENet, build_unet
from .optim import AdamW, CosineSchedule
from .scan import deterministic_mode

LOG_FILE = "train.log"
METRICS_FILE = "metrics.json"


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training aborted at iteration {step}: {reason}")
        self.step = step
        self.reason = reason


@dataclass
class TrainResult:
    out_dir: Path
    steps: int
    params: int
    eval_metrics: dict[str, float] = field(default_factory=dict)
    input_metrics: dict[str, float] = field(default_factory=dict)


@contextlib.contextmanager
def serial_reductions():
    """Limit BLAS to one thread when deterministic mode is on (needs threadpoolctl)."""
    if not deterministic_mode():
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(1):
        yield


def build_model(cfg: Config) -> UIENet:
    return build_unet(cfg.net_config(), cfg.seed, cfg.np_dtype)


def batch_indices(cfg: Config, it: int) -> list[int]:
    """Epoch-wise shuffled sample indices for iteration ``it``."""
    out = []
    for j in range(cfg.batch_size):
        pos = it * cfg.batch_size + j
        epoch, slot = divmod(pos, cfg.n_train)
        out.append(int(np.random.default_rng([cfg.seed, 1, epoch]).permutation(cfg.n_train)[slot]))
    return out


class PriorSource:
    """Per-stage priors for a batch: reference-gradient proxies, files, or nothing."""

    def __init__(self, cfg: Config, pairs: list[Pair]):
        self.sources = prior_sources(cfg, N_STAGES)
        self.active = cfg.net_config().uses_mvgl
        self._files: dict[str, PriorMap] = {}
        self._auto: list[np.ndarray] = []
        if not self.active:
            return
        if "auto" in self.sources:
            self._auto = [prior_from_reference(p.clean).grid for p in pairs]
        for src in self.sources:
            if src not in ("auto", "none") and src not in self._files:
                self._files[src] = load_prior(src)

    def __call__(self, idx: list[int]) -> list[PriorMap | None] | None:
        if not self.active:
            return None
        auto = PriorMap(np.stack([self._auto[i] for i in idx]), "reference-gradient") if self._auto else None
        out = []
        for src in self.sources:
            out.append(auto if src == "auto" else None if src == "none" else self._files[src])
        return out


def evaluate(model: UIENet, pairs: list[Pair], dtype) -> tuple[dict[str, float], dict[str, float]]:
    """Mean metrics of the model output and of the degraded input against the clean images."""
    if not pairs:
        return {}, {}
    was_training = model.training
    model.eval()
    outs, ins = [], []
    with no_grad():
        for p in pairs:
            y, _ = model(Tensor(p.degraded[None].astype(dtype)))
            outs.append(metrics(y.data[0], p.clean))
            ins.append(metrics(p.degraded, p.clean))
    model.train(was_training)
    mean = lambda rows: {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}  # noqa: E731
    return mean(outs), mean(ins)


def _log_line(it: int, temperature, comps, lr: float) -> str:
    rec = {"iter": it, "T": temperature, "L1": comps.l1, "Lssim": comps.ssim, "Ledge": comps.edge,
           "Lmvgl": comps.mvgl, "total": comps.total, "lr": lr}
    return json.dumps(rec) + "\n"


def train(cfg: Config, out_dir, resume=None, on_step: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Train ``cfg`` into ``out_dir``; ``resume`` is a checkpoint directory to continue from.

    Raises :class:`TrainingAborted` on a non-finite loss after saving the
    last good parameters.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = cfg.np_dtype
    model = build_model(cfg)
    opt = AdamW(model.named_parameters(), cfg.lr, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    start = 0
    log_path = out_dir / LOG_FILE
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config.hash() != cfg.hash():
            raise ValueError("resume checkpoint was trained with a different config")
        model.load_state_dict(ckpt.model_state())
        opt.load_state_dict(ckpt.optimizer_state(), ckpt.step, ckpt.skipped)
        start = ckpt.step
        kept = log_path.read_text().splitlines(keepends=True)[:start] if log_path.exists() else []
        log_path.write_text("".join(kept))
    else:
        log_path.write_text("")

    train_pairs = make_pairs(cfg.n_train, cfg.image_size, cfg.seed)
    eval_pairs = make_pairs(cfg.n_eval, cfg.image_size, cfg.seed, offset=cfg.n_train)
    degraded = np.stack([p.degraded for p in train_pairs]).astype(dtype)
    clean = np.stack([p.clean for p in train_pairs]).astype(dtype)
    priors = PriorSource(cfg, train_pairs)
    schedule = TemperatureSchedule(cfg.half_point, cfg.t_start, cfg.t_end)
    lr_sched = CosineSchedule(cfg.lr, cfg.lr_min, cfg.iterations)
    uses_mvgl = cfg.net_config().uses_mvgl
    weights = cfg.weights()

    def checkpoint(step: int) -> None:
        save_checkpoint(out_dir, cfg, step, model.state_dict(), opt.state_dict(), opt.skipped)

    with serial_reductions(), open(log_path, "a") as log:
        for it in range(start, cfg.iterations):
            idx = batch_indices(cfg, it)
            temperature = schedule(it) if uses_mvgl else None
            model.zero_grad()
            try:
                out, terms = model(Tensor(degraded[idx]), priors(idx), temperature)
                total, comps = loss_total(out, Tensor(clean[idx]), terms, weights, cfg.edge_eps)
                if not math.isfinite(comps.total):
                    raise NumericError(f"non-finite loss {comps.total}")
                total.backward()
            except NumericError as exc:
                log.flush()
                checkpoint(it)
                raise TrainingAborted(it + 1, str(exc)) from exc
            lr = lr_sched(it)
            opt.step(lr)
            log.write(_log_line(it + 1, temperature, comps, lr))
            if cfg.ckpt_every and (it + 1) % cfg.ckpt_every == 0 and it + 1 < cfg.iterations:
                log.flush()
                checkpoint(it + 1)
            if on_step is not None:
                log.flush()
                on_step(it + 1, {"total": comps.total})
    checkpoint(cfg.iterations)

    eval_m, input_m = evaluate(model, eval_pairs, dtype)
    (out_dir / METRICS_FILE).write_text(json.dumps({"model": eval_m, "input": input_m,
                                                    "params": model.num_parameters()}, sort_keys=True) + "\n")
    return TrainResult(out_dir, cfg.iterations, model.num_parameters(), eval_m, input_m)


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
