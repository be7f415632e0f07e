"""Adam / AdamW with bias correction, plus a linear warm-up schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam with coupled L2 weight decay (the decay term joins the gradient)."""

    kind = "Adam"

    def __init__(self, params: Mapping[str, Tensor] | Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if isinstance(params, Mapping):
            self.params = dict(params)
        else:
            self.params = {p.name or f"param{i}": p for i, p in enumerate(params)}
        b1, b2 = betas
        if not (0.0 < b1 < 1.0 and 0.0 < b2 < 1.0):
            raise ValueError(f"betas must lie in (0, 1), got {betas}")
        self.state = OptimizerState(self.kind, lr, b1, b2, eps, weight_decay)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _decay(self, p: Tensor, g: np.ndarray) -> np.ndarray:
        wd = self.state.weight_decay
        return g + wd * p.data if wd else g

    def step(self) -> None:
        st = self.state
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradError(f"parameter {name!r} has no gradient")
        st.step_count += 1
        t = st.step_count
        bc1 = 1.0 - st.beta1 ** t
        bc2 = 1.0 - st.beta2 ** t
        for name, p in self.params.items():
            g = self._decay(p, p.grad)
            m = st.m[name]
            v = st.v[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data - st.lr * mhat / (np.sqrt(vhat) + st.eps)
        self.zero_grad()


class AdamW(Adam):
    """Adam with decoupled weight decay applied directly to the weights."""

    kind = "AdamW"

    def _decay(self, p: Tensor, g: np.ndarray) -> np.ndarray:
        wd = self.state.weight_decay
        if wd:
            p.data = p.data * (1.0 - self.state.lr * wd)
        return g


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear ramp from base_lr/warmup_steps up to base_lr; ``step`` is 0-based."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)


def bias_corrected_first_step(lr: float, g: float, eps: float) -> float:
    """Closed-form Adam first step: -lr * g / (|g| + eps)."""
    return -lr * g / (math.fabs(g) + eps)
