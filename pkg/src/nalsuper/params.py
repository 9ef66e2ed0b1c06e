"""Parameter containers shared by the network modules."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class Conv:
    weight: Tensor  # [C_out, C_in, k, k], or [C, 1, k, k] when depthwise
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class DepthwiseConv(Conv):
    def __call__(self, x: Tensor) -> Tensor:
        return T.depthwise_conv2d(x, self.weight, self.bias)


def conv(c_in: int, c_out: int, k: int, rng: np.random.Generator | None, dtype=np.float64) -> Conv:
    """Fan-in uniform init; ``rng=None`` gives an all-zero layer."""
    shape = (c_out, c_in, k, k)
    return Conv(*_init(shape, c_in * k * k, c_out, rng, dtype))


def depthwise(channels: int, k: int, rng: np.random.Generator | None, dtype=np.float64) -> DepthwiseConv:
    return DepthwiseConv(*_init((channels, 1, k, k), k * k, channels, rng, dtype))


def _init(shape, fan_in, n_bias, rng, dtype):
    if rng is None:
        w = np.zeros(shape, dtype=dtype)
        b = np.zeros(n_bias, dtype=dtype)
    else:
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=shape).astype(dtype)
        b = rng.uniform(-bound, bound, size=n_bias).astype(dtype)
    return Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk nested dataclasses/lists and yield ``(dotted.path, tensor)`` pairs."""
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.metadata.get("frozen"):
                continue
            yield from named_parameters(getattr(obj, f.name), _join(prefix, f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, _join(prefix, str(i)))


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name
