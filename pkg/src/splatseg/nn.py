"""Parameter containers shared by the point encoder and the fusion network."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import Tensor, conv2d, matmul, add


class Module:
    """Flat, ordered name -> Tensor parameter registry."""

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def linear(self, rng: np.random.Generator, name: str, fan_in: int, fan_out: int) -> None:
        bound = np.sqrt(6.0 / fan_in)
        self.param(f"{name}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self.param(f"{name}.bias", np.zeros(fan_out))

    def conv(self, rng: np.random.Generator, name: str, c_in: int, c_out: int, k: int) -> None:
        fan_in = c_in * k * k
        bound = np.sqrt(6.0 / fan_in)
        self.param(f"{name}.weight", rng.uniform(-bound, bound, size=(c_out, c_in, k, k)))
        self.param(f"{name}.bias", np.zeros(c_out))

    def apply_linear(self, name: str, x: Tensor) -> Tensor:
        return add(matmul(x, self.params[f"{name}.weight"]), self.params[f"{name}.bias"])

    def apply_conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        w = self.params[f"{name}.weight"]
        pad = w.shape[-1] // 2
        return conv2d(x, w, self.params[f"{name}.bias"], stride=stride, padding=pad)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], prefix: str = "") -> None:
        for name, t in self.params.items():
            key = prefix + name
            if key not in state:
                raise KeyError(f"checkpoint is missing parameter {key!r}")
            arr = np.asarray(state[key], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {key!r}: checkpoint shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None
