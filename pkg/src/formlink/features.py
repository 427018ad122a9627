"""Per-word text-layout features: windowed text encoding plus coordinate projection."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .linker import TransformerLayer
from .nn import Linear, Module, normal_init
from .tensor import ContractError, Tensor, concat, relu, take_rows


@dataclass(frozen=True)
class WindowConfig:
    length: int = 512
    stride: int = 256

    def __post_init__(self):
        if not 1 <= self.stride <= self.length:
            raise ValueError(f"window stride {self.stride} must lie in [1, {self.length}]")


def make_spans(n: int, cfg: WindowConfig) -> list[tuple[int, int]]:
    """Half-open windows starting at 0, stride, 2*stride, ... while start < n."""
    spans: list[tuple[int, int]] = []
    for start in range(0, max(n, 0), cfg.stride):
        span = (start, min(start + cfg.length, n))
        if not spans or spans[-1] != span:
            spans.append(span)
    return spans


def select_span(i: int, spans: Sequence[tuple[int, int]], cfg: WindowConfig | None = None) -> int:
    """Index of the containing span that minimizes max(head, tail) distance of word ``i``.

    head = i - start, tail = end - 1 - i; ties go to the smallest span index.
    """
    best, best_cost = -1, None
    for j, (start, end) in enumerate(spans):
        if start <= i < end:
            cost = max(i - start, end - 1 - i)
            if best_cost is None or cost < best_cost:
                best, best_cost = j, cost
    if best < 0:
        raise ContractError(f"select_span: no span contains word {i}")
    return best


class TextEncoder(Protocol):
    dim: int

    def encode(self, tokens: Sequence[str]) -> Tensor: ...

    def parameters(self) -> list[Tensor]: ...


def hash_token(token: str, buckets: int) -> int:
    """Bucket of the lowercased token under 64-bit blake2b."""
    digest = hashlib.blake2b(token.lower().encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % buckets


class HashedTextEncoder(Module):
    """Hashed token embeddings + learned positions + one transformer layer."""

    def __init__(self, rng: np.random.Generator, dim: int = 64, buckets: int = 4096,
                 max_len: int = 512, heads: int = 4):
        self.dim = dim
        self.buckets = buckets
        self.table = normal_init(rng, (buckets, dim))
        self.position = normal_init(rng, (max_len, dim))
        self.layer = TransformerLayer(rng, dim, heads)

    def encode(self, tokens: Sequence[str]) -> Tensor:
        if len(tokens) > self.position.shape[0]:
            raise ContractError(f"encode: span of {len(tokens)} exceeds {self.position.shape[0]} positions")
        ids = [hash_token(t, self.buckets) for t in tokens]
        x = take_rows(self.table, ids) + take_rows(self.position, np.arange(len(tokens)))
        return self.layer(x)


def encode_text(tokens: Sequence[str], encoder: TextEncoder, cfg: WindowConfig) -> Tensor:
    """n x d_TX textual features; word i is read from its min-max window."""
    n = len(tokens)
    if n <= cfg.length:
        # the first window already holds the whole page
        return encoder.encode(list(tokens))
    spans = make_spans(n, cfg)
    choice = [select_span(i, spans) for i in range(n)]
    used = sorted(set(choice))
    outputs, offsets, pos = [], {}, 0
    for j in used:
        start, end = spans[j]
        try:
            outputs.append(encoder.encode(list(tokens[start:end])))
        except Exception as exc:
            raise RuntimeError(f"text encoder failed on span [{start}, {end})") from exc
        offsets[j] = pos - start
        pos += end - start
    stacked = concat(outputs, axis=0) if len(outputs) > 1 else outputs[0]
    return take_rows(stacked, [offsets[j] + i for i, j in enumerate(choice)])


class LayoutProjection(Module):
    def __init__(self, rng: np.random.Generator, dim: int = 128):
        self.proj = Linear(rng, 4, dim)

    def __call__(self, geo) -> Tensor:
        return project_coords(geo, self)


def project_coords(geo, params: LayoutProjection) -> Tensor:
    """relu(geo W + b) for normalized (x1, y1, x2, y2) rows."""
    return relu(params.proj(geo if isinstance(geo, Tensor) else Tensor(geo)))


def concat_features(text: Tensor, layout: Tensor) -> Tensor:
    if text.shape[0] != layout.shape[0]:
        raise ContractError(f"concat_features: {text.shape[0]} text rows vs {layout.shape[0]} layout rows")
    return concat([text, layout], axis=-1)
