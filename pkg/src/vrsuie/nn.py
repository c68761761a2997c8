"""Parameter containers and the small set of layers the network is built from."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .core import ops
from .core.tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=np.float64):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)


class Module:
    """Attribute-registered parameters and submodules.

    Parameter names are dotted attribute paths; items of a :class:`ModuleList`
    stored under ``attr`` are named ``attr0``, ``attr1``, ...
    """

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, ModuleList):
                for i, m in enumerate(value):
                    yield f"{key}{i}", m
            elif isinstance(value, (Module, Parameter)):
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def to(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules=()):
        self._items = list(modules)

    def _children(self):
        for i, m in enumerate(self._items):
            yield str(i), m

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def append(self, m: Module) -> None:
        self._items.append(m)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype, gain: float = 1.0) -> Parameter:
    bound = gain / math.sqrt(max(fan_in, 1))
    return Parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 1, stride: int = 1, padding: int | None = None,
                 groups: int = 1, bias: bool = True, rng: np.random.Generator | None = None,
                 dtype=np.float64, zero: bool = False, gain: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (cout, cin // groups, kernel, kernel)
        fan_in = (cin // groups) * kernel * kernel
        if zero:
            self.weight = Parameter(np.zeros(shape), dtype=dtype)
        else:
            self.weight = uniform_init(rng, shape, fan_in, dtype, gain)
        if bias:
            self.bias = Parameter(np.zeros(cout), dtype=dtype)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, getattr(self, "bias", None), self.stride, self.padding, self.groups)


class LayerNorm2d(Module):
    """Per-pixel normalization over channels with a learned affine."""

    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float64):
        self.weight = Parameter(np.ones(channels), dtype=dtype)
        self.bias = Parameter(np.zeros(channels), dtype=dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5, dtype=np.float64):
        self.weight = Parameter(np.ones(channels), dtype=dtype)
        self.bias = Parameter(np.zeros(channels), dtype=dtype)
        self.groups = groups
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.groups, self.weight, self.bias, self.eps)
