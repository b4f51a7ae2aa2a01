"""Named parameter storage and the Adam optimizer."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, StateError
from .tensor import Tensor, get_default_dtype


class ParameterStore:
    """Ordered map of trainable tensors plus Adam moments and step counter."""

    def __init__(self, dtype=None):
        self.dtype = np.dtype(dtype or get_default_dtype())
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        p = Tensor(arr, requires_grad=True)
        self.params[name] = p
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self) -> list[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def adam_step(store: ParameterStore, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> ParameterStore:
    """One bias-corrected Adam update, in place. Clears grads afterwards."""
    missing = [n for n, p in store.items() if p.grad is None]
    if missing:
        raise StateError(f"parameter {missing[0]!r} has no gradient")
    t = store.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = p.grad
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(p.dtype, copy=False)
        p.grad = None
    store.t = t
    return store
