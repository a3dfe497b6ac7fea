"""Adam with a step-halving learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, Tensor


@dataclass
class OptimizerState:
    lr0: float
    halve_every: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        """Learning rate for the next update: halved every ``halve_every`` updates."""
        if self.halve_every <= 0:
            return self.lr0
        return self.lr0 * 0.5 ** (self.step // self.halve_every)


class Adam:
    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 4e-4,
        halve_every: int = 2000,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.state = OptimizerState(lr0=lr, halve_every=halve_every, beta1=betas[0], beta2=betas[1], eps=eps)
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: OptimizerState) -> None:
    """In-place bias-corrected Adam update of every parameter."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
    lr = state.lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter '{name}' {p.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data, dtype=DTYPE))
        v = state.v.setdefault(name, np.zeros_like(p.data, dtype=DTYPE))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
