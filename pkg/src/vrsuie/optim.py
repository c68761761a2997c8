"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core.tensor import ParameterError


@dataclass(frozen=True)
class CosineSchedule:
    """lr_max at step 0 decaying to lr_min at step ``total - 1``."""

    lr_max: float = 1e-4
    lr_min: float = 1e-6
    total: int = 2000

    def __call__(self, step: int) -> float:
        if self.total <= 1:
            return self.lr_min
        progress = min(max(step, 0), self.total - 1) / (self.total - 1)
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = dict(named_params)
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ParameterError(f"betas must lie in [0, 1), got {betas}")
        self.lr = lr
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.skipped = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def grads_finite(self) -> bool:
        return all(p.grad is None or np.isfinite(p.grad).all() for p in self.params.values())

    def step(self, lr: float | None = None) -> bool:
        """Apply one update; returns False (and counts a skip) on non-finite gradients."""
        if not self.grads_finite():
            self.skipped += 1
            warnings.warn(f"non-finite gradient; optimizer step skipped ({self.skipped} so far)",
                          RuntimeWarning, stacklevel=2)
            return False
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p.data -= (lr * self.weight_decay) * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for name in self.params:
            state[f"opt.m.{name}"] = self.m[name]
            state[f"opt.v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], step_count: int, skipped: int = 0) -> None:
        for name, p in self.params.items():
            self.m[name] = np.array(state[f"opt.m.{name}"], dtype=p.dtype)
            self.v[name] = np.array(state[f"opt.v.{name}"], dtype=p.dtype)
        self.step_count = step_count
        self.skipped = skipped
