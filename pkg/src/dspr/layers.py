"""Parameter containers and the dense layer used by every stream."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import Tensor, matmul


def uniform(rng: np.random.Generator, shape, fan_in: int, name: str) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def const(value, shape, name: str) -> Tensor:
    return Tensor(np.full(shape, float(value)), requires_grad=True, name=name)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, W)
    return y if b is None else y + b


class Params:
    """Ordered name -> Tensor registry with prefix-aware merging."""

    def __init__(self):
        self._items: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._items:
            raise KeyError(f"duplicate parameter {name!r}")
        t.name = name
        self._items[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def items(self):
        return self._items.items()

    def values(self):
        return self._items.values()

    def n_scalars(self) -> int:
        return int(sum(t.size for t in self._items.values()))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self._items.items())

    def load_state_dict(self, state, strict: bool = True) -> None:
        missing = [k for k in self._items if k not in state]
        extra = [k for k in state if k not in self._items]
        if strict and (missing or extra):
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, t in self._items.items():
            if k not in state:
                continue
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: expected shape {t.shape}, found {arr.shape}")
            t.data = arr.copy()

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None
