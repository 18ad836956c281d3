"""Parameter containers and the handful of layers the network is built from."""

from __future__ import annotations

import copy
from typing import Iterator

import numpy as np

from .tensor import Tensor, default_dtype
from .tensor import functional as F

LEAKY_SLOPE = 0.01


class Parameter(Tensor):
    """A leaf tensor that a :class:`Module` owns and an optimizer updates."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Attribute-registered parameter tree, in the spirit of ``torch.nn.Module``.

    Parameters and sub-modules are discovered from instance attributes (and
    lists of modules) in assignment order, which fixes a deterministic
    parameter order for optimizers and checkpoints.
    """

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        """Deep copy with every parameter converted to ``dtype``."""
        twin = copy.deepcopy(self)
        for p in twin.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return twin

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def kaiming(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    std = np.sqrt(2.0 / ((1 + LEAKY_SLOPE ** 2) * fan_in))
    return rng.normal(0.0, std, size=shape)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1,
                 padding: int | None = None, bias: bool = True,
                 rng: np.random.Generator | None = None, init_scale: float = 1.0):
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding
        fan_in = cin * kernel ** 3
        self.weight = Parameter(init_scale * kaiming(rng, (cout, cin, kernel, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, bias: bool = True,
                 rng: np.random.Generator | None = None, init_scale: float = 1.0):
        rng = rng or np.random.default_rng(0)
        std = init_scale / np.sqrt(n_in)
        self.weight = Parameter(rng.normal(0.0, std, size=(n_out, n_in)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int | None = None, eps: float = 1e-5):
        self.groups = groups or min(8, channels)
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class ConvNormAct(Module):
    """conv -> group norm -> leaky ReLU."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1,
                 rng: np.random.Generator | None = None):
        self.conv = Conv3d(cin, cout, kernel, stride, rng=rng)
        self.norm = GroupNorm(cout)

    def forward(self, x: Tensor) -> Tensor:
        return F.leaky_relu(self.norm(self.conv(x)), LEAKY_SLOPE)


def zero_parameters(module: Module) -> None:
    """Set every parameter of ``module`` to zero (used by regression anchors)."""
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


def fill_parameters(module: Module, value: float) -> None:
    for p in module.parameters():
        p.data = np.full_like(p.data, value)


__all__ = ["Parameter", "Module", "Conv3d", "Linear", "GroupNorm", "LayerNorm", "ConvNormAct",
           "kaiming", "zero_parameters", "fill_parameters", "default_dtype"]
