"""Parameter containers shared by the feature, grouping and linking networks."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from .tensor import Tensor, add_bias, layer_norm, matmul


def named_stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for sub-stream ``name`` of a run seed.

    Names are hashed with blake2b so streams survive reordering of the code
    that consumes them.
    """
    key = int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")
    return np.random.default_rng([int(seed), key, *(int(e) for e in extra)])


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def normal_init(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Module:
    """Walks tensor attributes and sub-modules in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = uniform_init(rng, d_in, (d_in, d_out))
        self.bias = uniform_init(rng, d_in, (d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return add_bias(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)
