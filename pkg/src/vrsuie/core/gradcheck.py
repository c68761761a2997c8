"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NumericError, ParameterError, Tensor, no_grad


class GradCheckError(AssertionError):
    """Analytic gradients could not be evaluated."""


def _scalarize(out: Tensor, proj: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return out.reshape(())
    return (out * Tensor(proj)).sum()


def grad_check_report(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
                      seed: int = 0) -> list[float]:
    """Per-tensor max of |analytic - numeric| / (|analytic| + |numeric| + 1e-8).

    ``fn`` re-evaluates the op from the current contents of ``tensors``.
    Non-scalar outputs are reduced with a fixed random projection so that
    every output element contributes.
    """
    if not 1e-5 <= h <= 1e-3:
        raise ParameterError(f"finite-difference step {h} outside [1e-5, 1e-3]")
    for t in tensors:
        if t.dtype != np.float64:
            raise ParameterError("grad_check needs float64 tensors")
        # perturbations are applied through a flat view
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None

    out = fn()
    op = out.op
    proj = None
    if out.size != 1:
        proj = np.random.default_rng(seed).standard_normal(out.shape)
    try:
        _scalarize(out, proj).backward()
    except NumericError as exc:
        raise GradCheckError(f"{op}: {exc}") from exc
    analytic = []
    for t in tensors:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(g).all():
            raise GradCheckError(f"{op}: non-finite analytic gradient")
        analytic.append(g.copy())

    errors = []
    with no_grad():
        for t, ga in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = _scalarize(fn(), proj).item()
                flat[i] = orig - h
                fm = _scalarize(fn(), proj).item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                err = abs(gflat[i] - num) / (abs(gflat[i]) + abs(num) + 1e-8)
                worst = max(worst, err)
            errors.append(worst)
    return errors


def grad_check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5, seed: int = 0) -> float:
    return max(grad_check_report(fn, tensors, h, seed), default=0.0)
