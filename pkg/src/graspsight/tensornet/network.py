"""Parameter tables, layer descriptors and sequential execution."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class Conv2d:
    name: str
    stride: int = 1
    pad: int = 1


@dataclass(frozen=True)
class Dense:
    name: str


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Sigmoid:
    pass


@dataclass(frozen=True)
class MaxPool2x2:
    pass


@dataclass(frozen=True)
class Upsample2x:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Conv2d, Dense, ReLU, Sigmoid, MaxPool2x2, Upsample2x, Flatten]


class Network:
    """Named parameter table plus helpers shared by every model.

    Subclasses declare parameters with :meth:`add_conv` / :meth:`add_dense`
    and describe their computation with lists of layer descriptors run by
    :meth:`run`.
    """

    arch = "network"

    def __init__(self, dtype=np.float32):
        self.params: dict[str, Tensor] = {}
        self.dtype = np.dtype(dtype)
        self.hparams: dict[str, float | Sequence[float]] = {}

    # construction ------------------------------------------------------------
    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_conv(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator) -> None:
        # He-uniform: U(-b, b) with b = sqrt(6 / fan_in)
        bound = math.sqrt(6.0 / (cin * k * k))
        self.add_param(f"{name}.w", rng.uniform(-bound, bound, size=(cout, cin, k, k)))
        self.add_param(f"{name}.b", np.zeros(cout))

    def add_dense(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
        bound = math.sqrt(6.0 / fan_in)
        self.add_param(f"{name}.w", rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        self.add_param(f"{name}.b", np.zeros(fan_out))

    # execution ---------------------------------------------------------------
    def run(self, layers: Sequence[Layer], x: Tensor) -> Tensor:
        for layer in layers:
            x = self.apply(layer, x)
        return x

    def apply(self, layer: Layer, x: Tensor) -> Tensor:
        if isinstance(layer, Conv2d):
            return T.conv2d(x, self.params[f"{layer.name}.w"], self.params[f"{layer.name}.b"],
                            layer.stride, layer.pad)
        if isinstance(layer, Dense):
            return T.dense(x, self.params[f"{layer.name}.w"], self.params[f"{layer.name}.b"])
        if isinstance(layer, ReLU):
            return T.relu(x)
        if isinstance(layer, Sigmoid):
            return T.sigmoid(x)
        if isinstance(layer, MaxPool2x2):
            return T.maxpool2x2(x)
        if isinstance(layer, Upsample2x):
            return T.upsample2x(x)
        if isinstance(layer, Flatten):
            return T.flatten(x)
        raise TypeError(f"unknown layer descriptor {layer!r}")

    def input(self, array: np.ndarray) -> Tensor:
        return Tensor(np.asarray(array, dtype=self.dtype))

    # bookkeeping -------------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "Network":
        """Cast every parameter in place (float64 for gradient checks)."""
        self.dtype = np.dtype(dtype)
        for p in self.params.values():
            p.data = p.data.astype(self.dtype)
            p.grad = None
        return self

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise KeyError(f"state is missing parameter {name!r}")
            value = state[name]
            if value.shape != p.shape:
                raise ValueError(f"parameter {name!r}: expected shape {p.shape}, got {value.shape}")
            p.data = np.array(value, dtype=self.dtype)


def backward(network: Network, loss: Tensor) -> None:
    """Run reverse mode from ``loss``; parameters it does not reach get zero grads."""
    network.zero_grad()
    loss.backward()
    for p in network.params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
