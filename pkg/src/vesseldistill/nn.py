"""Parameter containers and layers built on :mod:`vesseldistill.tensor`."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Dict, Iterator, Tuple

import numpy as np

from .errors import DimensionError
from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: parameters and sub-modules are discovered from attributes in assignment order."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.name == "param":
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise DimensionError(
                f"state dict mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}"
            )
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise DimensionError(f"{name}: expected shape {p.data.shape}, got {arr.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True, name="param")


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, slope: float = 0.01) -> np.ndarray:
    gain = math.sqrt(2.0 / (1.0 + slope ** 2))
    return rng.standard_normal(shape) * (gain / math.sqrt(fan_in))


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel_size: int = 3, stride: int = 1,
                 padding=None, rng: np.random.Generator = None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        k = kernel_size
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = parameter(kaiming_normal(rng, (cout, cin, k, k, k), cin * k ** 3))
        self.bias = parameter(np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv3(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 4, eps: float = 1e-5):
        self.groups = min(groups, channels)
        self.eps = eps
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class ConvNormAct(Module):
    """3x3x3 convolution, group normalisation, leaky ReLU."""

    def __init__(self, cin, cout, stride=1, groups=4, slope=0.01, rng=None):
        self.slope = slope
        self.conv = Conv3d(cin, cout, 3, stride, rng=rng)
        self.norm = GroupNorm(cout, groups)

    def __call__(self, x):
        return T.leaky_relu(self.norm(self.conv(x)), self.slope)


class AttentionBlock(Module):
    """Residual single-head self-attention over the voxels of a feature map."""

    def __init__(self, dim: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        scale = 1.0 / math.sqrt(dim)
        self.wq = parameter(rng.standard_normal((dim, dim)) * scale)
        self.wk = parameter(rng.standard_normal((dim, dim)) * scale)
        self.wv = parameter(rng.standard_normal((dim, dim)) * scale)
        self.wo = parameter(rng.standard_normal((dim, dim)) * scale * 0.5)

    def __call__(self, x: Tensor) -> Tensor:
        B, C, D, H, W = x.shape
        tokens = T.transpose(T.reshape(x, (B, C, D * H * W)), (0, 2, 1))
        mixed = T.self_attention(tokens, self.wq, self.wk, self.wv, self.wo)
        back = T.reshape(T.transpose(mixed, (0, 2, 1)), (B, C, D, H, W))
        return x + back


def count_parameters(model: Module) -> int:
    """Exact number of trainable scalars in ``model``."""
    return int(sum(p.data.size for p in model.parameters()))
