"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float

    @property
    def worst(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def worst_index(self) -> tuple[int, ...]:
        return np.unravel_index(int(self.rel_error.argmax()), self.rel_error.shape)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    @property
    def failing(self) -> list[tuple[int, ...]]:
        return [tuple(int(i) for i in ix) for ix in np.argwhere(self.rel_error >= self.tol)]


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-4,
               tol: float = 1e-4, floor: float = 1.0) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``point`` with central differences.

    The per-coordinate error is ``|a - n| / max(|a|, |n|, floor)``; the unit
    floor keeps near-zero coordinates from dominating.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    try:
        with Tape() as tape:
            y = f(x)
            if not np.isfinite(y.data).all():
                raise GradCheckError("grad_check: f is non-finite at the point")
            analytic = tape.backward(y, params=[x])[x].copy()
    except NonFiniteError as exc:
        raise GradCheckError(f"grad_check: f is non-finite at the point ({exc})") from exc

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for k in range(x0.size):
        xp = x0.copy().reshape(-1)
        xp[k] += eps
        fp = float(f(Tensor(xp.reshape(x0.shape))).data)
        xp[k] -= 2 * eps
        fm = float(f(Tensor(xp.reshape(x0.shape))).data)
        flat[k] = (fp - fm) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return GradCheckReport(analytic, numeric, np.abs(analytic - numeric) / denom, tol)
