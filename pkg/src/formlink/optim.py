"""Adam optimizer over float64 parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new parameter arrays and state.

    Moments are zero-initialized when ``state`` is fresh.
    """
    if len(params) != len(grads):
        raise ContractError(f"adam_step: {len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ContractError(f"adam_step: param shape {p.shape} != grad shape {g.shape}")
    m = state.m or [np.zeros_like(p) for p in params]
    v = state.v or [np.zeros_like(p) for p in params]
    for p, mi in zip(params, m):
        if p.shape != mi.shape:
            raise ContractError(f"adam_step: moment shape {mi.shape} != param shape {p.shape}")

    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        mi = beta1 * mi + (1.0 - beta1) * g
        vi = beta2 * vi + (1.0 - beta2) * (g * g)
        new_params.append(p - lr * (mi / c1) / (np.sqrt(vi / c2) + eps))
        new_m.append(mi)
        new_v.append(vi)
    return new_params, AdamState(t, new_m, new_v)


class Adam:
    """Stateful wrapper that updates a fixed, ordered list of tensors in place."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adam_step([p.data for p in self.params], grads, self.state,
                                    self.lr, self.beta1, self.beta2, self.eps)
        for p, value in zip(self.params, new):
            p.data = value
            p.grad = None
