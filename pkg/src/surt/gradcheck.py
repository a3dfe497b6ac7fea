"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


class NonDeterminismError(RuntimeError):
    """The checked function returned different values for identical inputs."""


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> float:
    """Compare the gradient of the scalar ``f()`` w.r.t. ``params`` obtained by
    backpropagation with central differences.

    Returns the maximum over checked coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.  With
    ``max_coords`` only a random subset of coordinates per parameter is
    perturbed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError("finite_difference_check needs a scalar function")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        with no_grad():
            return float(f().data)

    base = value()
    if value() != base or float(out.data) != base:
        raise NonDeterminismError("function value changed between identical evaluations")

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        a_flat = a.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            an = a_flat[i]
            err = abs(an - num) / max(abs(an), abs(num), floor)
            worst = max(worst, err)
    return worst


@dataclass
class FDReport:
    max_rel_err: float
    n_checked: int
    n_unreliable: int

    @property
    def unreliable_fraction(self) -> float:
        total = self.n_checked + self.n_unreliable
        return self.n_unreliable / total if total else 0.0


def finite_difference_report(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
    consistency: float = 1e-4,
    floor: float = 1e-8,
) -> FDReport:
    """Like :func:`finite_difference_check`, but screens the numeric oracle.

    Each coordinate is differenced at ``eps`` and ``eps / 10``.  Where the
    two estimates disagree by more than ``consistency`` (relative), the
    function is not smooth at this scale (a ReLU or max-pool switch lies
    within ``eps``, or the gradient is so small that the difference is
    roundoff) and central differences are no oracle there; such coordinates
    are counted as unreliable instead of compared.  A wrong
    analytic gradient still shows up, since both estimates then agree with
    each other but not with it.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError("finite_difference_report needs a scalar function")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        with no_grad():
            return float(f().data)

    if value() != float(out.data):
        raise NonDeterminismError("function value changed between identical evaluations")

    def central(flat, i, h) -> float:
        orig = flat[i]
        flat[i] = orig + h
        fp = value()
        flat[i] = orig - h
        fm = value()
        flat[i] = orig
        return (fp - fm) / (2.0 * h)

    worst, checked, unreliable = 0.0, 0, 0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            n1 = central(flat, i, eps)
            n2 = central(flat, i, eps / 10)
            if abs(n1 - n2) > consistency * max(abs(n1), abs(n2), floor):
                unreliable += 1
                continue
            checked += 1
            an = a_flat[i]
            worst = max(worst, abs(an - n1) / max(abs(an), abs(n1), floor))
    return FDReport(worst, checked, unreliable)
