"""BiLSTM-CRF word grouping with BIES tags."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .dataset import TAG_INDEX, TAGS
from .nn import Linear, Module, uniform_init
from .tensor import (
    ContractError,
    Tensor,
    add,
    add_bias,
    concat,
    logsumexp,
    matmul,
    mul,
    sigmoid,
    sum_,
    tanh,
    transpose,
)

N_TAGS = len(TAGS)


class LSTMDirection(Module):
    """Gate layout along the 4h axis: input, forget, output, cell candidate."""

    def __init__(self, rng: np.random.Generator, d_in: int, hidden: int):
        self.hidden = hidden
        self.w_in = uniform_init(rng, d_in, (d_in, 4 * hidden))
        self.w_rec = uniform_init(rng, hidden, (hidden, 4 * hidden))
        self.bias = uniform_init(rng, hidden, (4 * hidden,))

    def __call__(self, x: Tensor, reverse: bool = False) -> Tensor:
        n, h = x.shape[0], self.hidden
        xw = add_bias(matmul(x, self.w_in), self.bias)
        order = range(n - 1, -1, -1) if reverse else range(n)
        states = [None] * n
        h_t = c_t = None
        for t in order:
            z = xw[t:t + 1]
            if h_t is not None:
                z = z + matmul(h_t, self.w_rec)
            gates = sigmoid(z[:, :3 * h])
            cand = tanh(z[:, 3 * h:])
            i_g, f_g, o_g = gates[:, :h], gates[:, h:2 * h], gates[:, 2 * h:]
            c_t = mul(i_g, cand) if c_t is None else mul(f_g, c_t) + mul(i_g, cand)
            h_t = mul(o_g, tanh(c_t))
            states[t] = h_t
        return concat(states, axis=0) if n > 1 else states[0]


class BiLSTM(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, hidden: int, layers: int = 2):
        self.layers = []
        for layer in range(layers):
            width = d_in if layer == 0 else 2 * hidden
            self.layers += [LSTMDirection(rng, width, hidden), LSTMDirection(rng, width, hidden)]

    def __call__(self, features: Tensor) -> Tensor:
        return bilstm_forward(features, self)


def bilstm_forward(features: Tensor, params: BiLSTM) -> Tensor:
    """Hidden states (n, 2*hidden); layer k+1 reads layer k's concatenated output."""
    if features.data.ndim != 2 or features.shape[0] < 1:
        raise ContractError(f"bilstm_forward: expected (n >= 1, d) features, got {features.shape}")
    x = features
    for fwd, bwd in zip(params.layers[::2], params.layers[1::2]):
        x = concat([fwd(x), bwd(x, reverse=True)], axis=-1)
    return x


class CRF(Module):
    def __init__(self, rng: np.random.Generator, d_in: int):
        self.emission = Linear(rng, d_in, N_TAGS)
        self.transitions = Tensor(np.zeros((N_TAGS, N_TAGS)), requires_grad=True)
        self.start = Tensor(np.zeros(N_TAGS), requires_grad=True)
        self.end = Tensor(np.zeros(N_TAGS), requires_grad=True)

    def emissions(self, hidden: Tensor) -> Tensor:
        return self.emission(hidden)


def _tag_ids(tags: Sequence) -> np.ndarray:
    ids = np.array([TAG_INDEX[t] if isinstance(t, str) else int(t) for t in tags], dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= N_TAGS):
        raise ContractError(f"tag index out of range in {list(tags)}")
    return ids


def crf_partition(emissions: Tensor, crf: CRF) -> Tensor:
    """log Z by the forward algorithm in log space."""
    n = emissions.shape[0]
    if n < 1:
        raise ContractError("crf_partition: empty sequence")
    trans_t = transpose(crf.transitions)  # [next, prev]
    alpha = add(crf.start, emissions[0])
    for t in range(1, n):
        alpha = add(logsumexp(add_bias(trans_t, alpha), axis=-1), emissions[t])
    return logsumexp(add(alpha, crf.end), axis=-1)


def path_score(emissions: Tensor, tags: Sequence, crf: CRF) -> Tensor:
    y = _tag_ids(tags)
    n = emissions.shape[0]
    if len(y) != n:
        raise ContractError(f"path_score: {len(y)} tags for {n} positions")
    emit_mask = np.zeros((n, N_TAGS))
    emit_mask[np.arange(n), y] = 1.0
    counts = np.zeros((N_TAGS, N_TAGS))
    np.add.at(counts, (y[:-1], y[1:]), 1.0)
    first, last = np.zeros(N_TAGS), np.zeros(N_TAGS)
    first[y[0]] = 1.0
    last[y[-1]] = 1.0
    return (sum_(mul(emissions, emit_mask)) + sum_(mul(crf.transitions, counts))
            + sum_(mul(crf.start, first)) + sum_(mul(crf.end, last)))


def crf_loss(emissions: Tensor, tags: Sequence, crf: CRF) -> Tensor:
    """Negative log-likelihood log Z - score(gold)."""
    return crf_partition(emissions, crf) - path_score(emissions, tags, crf)


def viterbi_decode(emissions, crf: CRF) -> list[int]:
    """Best tag path; ties resolve toward the lower tag index."""
    e = emissions.data if isinstance(emissions, Tensor) else np.asarray(emissions, dtype=np.float64)
    T, start, end = crf.transitions.data, crf.start.data, crf.end.data
    n = e.shape[0]
    if n == 0:
        return []
    score = start + e[0]
    back = np.zeros((n, N_TAGS), dtype=np.intp)
    for t in range(1, n):
        cand = score[:, None] + T  # [prev, next]
        back[t] = cand.argmax(axis=0)
        score = cand[back[t], np.arange(N_TAGS)] + e[t]
    best = int((score + end).argmax())
    path = [best]
    for t in range(n - 1, 0, -1):
        best = int(back[t, best])
        path.append(best)
    return path[::-1]


def tags_to_spans(tags: Sequence) -> list[tuple[int, int]]:
    """Half-open entity spans from BIES tags, repairing invalid sequences.

    An I or E with no open span opens one; B or S closes any open span first;
    a span still open at the end closes at the last position.
    """
    names = [t if isinstance(t, str) else TAGS[int(t)] for t in tags]
    spans: list[tuple[int, int]] = []
    open_at: int | None = None
    for i, tag in enumerate(names):
        if tag in ("B", "S") and open_at is not None:
            spans.append((open_at, i))
            open_at = None
        if tag == "S":
            spans.append((i, i + 1))
        elif tag == "B":
            open_at = i
        else:
            if open_at is None:
                open_at = i
            if tag == "E":
                spans.append((open_at, i + 1))
                open_at = None
    if open_at is not None:
        spans.append((open_at, len(names)))
    return spans


def grouping_accuracy(gold, predicted) -> float:
    """Micro-averaged tag accuracy.

    Accepts two flat tag sequences, or two equal-length lists of per-page
    sequences (pooled over all positions).
    """
    if len(gold) != len(predicted):
        raise ContractError(f"grouping_accuracy: length {len(gold)} vs {len(predicted)}")
    if gold and not isinstance(gold[0], (str, int, np.integer)):
        pairs = list(zip(gold, predicted))
    else:
        pairs = [(gold, predicted)]
    hits = total = 0
    for g, p in pairs:
        if len(g) != len(p):
            raise ContractError(f"grouping_accuracy: length {len(g)} vs {len(p)}")
        hits += int((_tag_ids(g) == _tag_ids(p)).sum())
        total += len(g)
    return hits / total if total else 0.0

