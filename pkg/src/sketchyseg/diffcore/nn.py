"""Parameter containers and small layers built on :mod:`tensor`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import DiffValue


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def parameter(data, name: str) -> DiffValue:
    return DiffValue(data, requires_grad=True, name=name)


class ParamSet:
    """Ordered name -> parameter mapping shared by every trainable block."""

    def __init__(self):
        self._params: dict[str, DiffValue] = {}

    def add(self, name: str, data) -> DiffValue:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name}")
        p = parameter(data, name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> DiffValue:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, arr in state.items():
            if k not in self._params:
                raise KeyError(f"unknown parameter {k}")
            if self._params[k].shape != arr.shape:
                raise T.ShapeError(f"{k}: checkpoint shape {arr.shape} != {self._params[k].shape}")
            self._params[k].data = np.array(arr, dtype=np.float64)

    def merged(self, *others: "ParamSet") -> "ParamSet":
        out = ParamSet()
        for ps in (self,) + others:
            for k, v in ps.items():
                if k in out._params:
                    raise KeyError(f"duplicate parameter {k}")
                out._params[k] = v
        return out


class Linear:
    def __init__(self, params: ParamSet, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, bias: bool = True, zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else glorot_uniform(rng, d_in, d_out)
        self.weight = params.add(f"{name}.weight", w)
        self.bias = params.add(f"{name}.bias", np.zeros(d_out)) if bias else None

    def __call__(self, x) -> DiffValue:
        return T.linear(x, self.weight, self.bias)


class MLP:
    """Linear layers with ReLU between them (no activation after the last)."""

    def __init__(self, params: ParamSet, name: str, widths: list[int],
                 rng: np.random.Generator, zero_last: bool = False):
        self.layers = [
            Linear(params, f"{name}.{i}", a, b, rng,
                   zero=zero_last and i == len(widths) - 2)
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]

    def __call__(self, x) -> DiffValue:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class LayerNorm:
    def __init__(self, params: ParamSet, name: str, dim: int):
        self.gamma = params.add(f"{name}.gamma", np.ones(dim))
        self.beta = params.add(f"{name}.beta", np.zeros(dim))

    def __call__(self, x) -> DiffValue:
        return T.layer_norm(x, self.gamma, self.beta)
