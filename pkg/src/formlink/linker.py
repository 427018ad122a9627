"""Entity encoding, asymmetric link scoring, negative sampling and ranking."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .nn import LayerNorm, Linear, Module, normal_init, uniform_init
from .tensor import (
    ContractError,
    Tensor,
    add,
    concat,
    logsumexp,
    matmul,
    mul,
    relu,
    softmax,
    sum_,
    take_rows,
    transpose,
)

MASKED = -1e30


class TransformerLayer(Module):
    """Pre-norm encoder layer: multi-head self-attention then a ReLU feed-forward."""

    def __init__(self, rng: np.random.Generator, d: int, heads: int = 4, ff_mult: int = 4):
        if d % heads:
            raise ContractError(f"TransformerLayer: width {d} not divisible by {heads} heads")
        self.heads = heads
        self.ln1 = LayerNorm(d)
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.o = Linear(rng, d, d)
        self.ln2 = LayerNorm(d)
        self.ff1 = Linear(rng, d, ff_mult * d)
        self.ff2 = Linear(rng, ff_mult * d, d)
        self.last_attention: list[np.ndarray] = []

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        q, k, v = self.q(h), self.k(h), self.v(h)
        dh = x.shape[-1] // self.heads
        scale = 1.0 / np.sqrt(dh)
        outs, self.last_attention = [], []
        for i in range(self.heads):
            cols = slice(i * dh, (i + 1) * dh)
            scores = mul(matmul(q[:, cols], transpose(k[:, cols])), scale)
            if mask is not None:
                scores = add(scores, mask)
            attn = softmax(scores)
            self.last_attention.append(attn.data)
            outs.append(matmul(attn, v[:, cols]))
        x = x + self.o(concat(outs) if len(outs) > 1 else outs[0])
        return x + self.ff2(relu(self.ff1(self.ln2(x))))


def block_mask(lengths: Sequence[int]) -> np.ndarray:
    """Additive attention mask confining each block of positions to itself."""
    total = int(sum(lengths))
    mask = np.full((total, total), MASKED)
    pos = 0
    for n in lengths:
        mask[pos:pos + n, pos:pos + n] = 0.0
        pos += n
    return mask


class EntityEncoder(Module):
    """m transformer layers over ``[alpha, f_i .. f_j, beta]`` read out at alpha."""

    def __init__(self, rng: np.random.Generator, d: int, layers: int = 3, heads: int = 4,
                 ff_mult: int = 4, max_len: int = 512, positions: bool = True):
        self.alpha = normal_init(rng, (1, d))
        self.beta = normal_init(rng, (1, d))
        self.position = normal_init(rng, (max_len, d)) if positions else None
        self.layers = [TransformerLayer(rng, d, heads, ff_mult) for _ in range(layers)]
        self.final_norm = LayerNorm(d)

    @property
    def attention(self) -> list[list[np.ndarray]]:
        return [layer.last_attention for layer in self.layers]

    def __call__(self, features: Tensor, spans: Sequence[tuple[int, int]]) -> Tensor:
        """Encode every span of ``features`` in one masked pass; returns (len(spans), d)."""
        if not spans:
            raise ContractError("encode_entities: no spans")
        pieces, lengths, heads = [], [], []
        for start, end in spans:
            if end <= start:
                raise ContractError(f"encode_entity: empty span [{start}, {end})")
            heads.append(sum(lengths))
            pieces += [self.alpha, features[start:end], self.beta]
            lengths.append(end - start + 2)
        x = concat(pieces, axis=0)
        if self.position is not None:
            limit = self.position.shape[0] - 1
            idx = np.concatenate([np.minimum(np.arange(n), limit) for n in lengths])
            x = x + take_rows(self.position, idx)
        mask = block_mask(lengths) if len(lengths) > 1 else None
        for layer in self.layers:
            x = layer(x, mask)
        return self.final_norm(take_rows(x, heads))


def encode_entity(span_features: Tensor, encoder: EntityEncoder) -> Tensor:
    """Feature vector (d,) of a single entity given its k x d word features."""
    k = span_features.shape[0] if span_features.data.ndim == 2 else 0
    if k < 1:
        raise ContractError("encode_entity: empty span")
    return encoder(span_features, [(0, k)])[0]


class Relation(Module):
    def __init__(self, rng: np.random.Generator, d: int):
        self.M = uniform_init(rng, d, (d, d))


def score_link(f_src: Tensor, f_dst: Tensor, M: Tensor) -> Tensor:
    """Bilinear score F_src M F_dst^T of the directed link src -> dst."""
    for f in (f_src, f_dst):
        if f.data.ndim != 1 or f.shape[0] != M.shape[0] or M.shape[0] != M.shape[1]:
            raise ContractError(f"score_link: incompatible shapes {f.shape} and {M.shape}")
    return matmul(matmul(f_src, M), f_dst)


def score_matrix(F: Tensor, M: Tensor) -> Tensor:
    """S[i, j] = score of link i -> j for all entity pairs."""
    return matmul(matmul(F, M), transpose(F))


def sample_negatives(target: int, positives: Sequence[int], candidates: Sequence[int], k: int,
                     rng: np.random.Generator) -> list[int]:
    """Up to ``k`` distinct candidates that are neither the target nor a gold source."""
    banned = set(positives) | {target}
    eligible = [c for c in candidates if c not in banned]
    if len(eligible) <= k:
        return eligible
    picked = rng.choice(len(eligible), size=k, replace=False)
    return [eligible[i] for i in picked]


def neg_sampling_loss(scores: Tensor, cases: Sequence[tuple[int, int, Sequence[int]]]) -> Tensor:
    """Summed softmax cross-entropy of each positive source against its negatives.

    ``scores`` is an entity-by-entity score matrix (row = source); each case is
    ``(source, target, negatives)`` in row/column indices.
    """
    if not cases:
        return Tensor(0.0)
    n = scores.shape[0]
    targets = [j for _, j, _ in cases]
    cols = take_rows(transpose(scores), targets)  # row c holds scores of all sources -> target c
    mask = np.full((len(cases), n), MASKED)
    onehot = np.zeros((len(cases), n))
    for c, (i, _, negs) in enumerate(cases):
        if not len(negs):
            raise ContractError("neg_sampling_loss: empty negative set")
        mask[c, i] = 0.0
        mask[c, list(negs)] = 0.0
        onehot[c, i] = 1.0
    return sum_(logsumexp(add(cols, mask))) - sum_(mul(cols, onehot))


def rank_candidates(target: int, candidates: Sequence[int], scores) -> list[tuple[int, float]]:
    """Candidates sorted by descending score of candidate -> target, ties by ascending id.

    ``scores`` maps ``(source, target)`` to a score: a 2-D array indexed by id or
    any callable.
    """
    get = scores if callable(scores) else (lambda s, t: float(scores[s, t]))
    scored = [(c, float(get(c, target))) for c in candidates if c != target]
    return sorted(scored, key=lambda cs: (-cs[1], cs[0]))
