import itertools

import numpy as np
import pytest

from formlink.dataset import TAGS, tags_from_entities
from formlink.gradcheck import grad_check
from formlink.grouper import (
    CRF,
    BiLSTM,
    bilstm_forward,
    crf_loss,
    crf_partition,
    grouping_accuracy,
    path_score,
    tags_to_spans,
    viterbi_decode,
)
from formlink.tensor import ContractError, Tape, Tensor, sum_

from .oracles import enum_argmax, enum_log_partition, random_partition, score_of


def random_crf(rng, scale=2.0):
    crf = CRF(rng, 3)
    crf.transitions.data = rng.normal(scale=scale, size=(4, 4))
    crf.start.data = rng.normal(scale=scale, size=4)
    crf.end.data = rng.normal(scale=scale, size=4)
    return crf


def params_of(crf):
    return crf.transitions.data, crf.start.data, crf.end.data


def test_partition_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(40):
        n = int(rng.integers(1, 6))
        crf = random_crf(rng)
        e = rng.normal(scale=2, size=(n, 4))
        got = float(crf_partition(Tensor(e), crf).data)
        assert got == pytest.approx(enum_log_partition(e, *params_of(crf)), abs=1e-8)


def test_loss_is_negative_log_probability():
    rng = np.random.default_rng(1)
    for _ in range(40):
        n = int(rng.integers(1, 6))
        crf = random_crf(rng)
        e = rng.normal(scale=2, size=(n, 4))
        tags = list(rng.integers(0, 4, size=n))
        want = enum_log_partition(e, *params_of(crf)) - score_of(tags, e, *params_of(crf))
        assert float(crf_loss(Tensor(e), tags, crf).data) == pytest.approx(want, abs=1e-8)
        assert float(path_score(Tensor(e), tags, crf).data) == pytest.approx(
            score_of(tags, e, *params_of(crf)), abs=1e-10)


def test_viterbi_matches_enumeration():
    rng = np.random.default_rng(2)
    for _ in range(60):
        n = int(rng.integers(1, 6))
        crf = random_crf(rng)
        e = rng.normal(scale=2, size=(n, 4))
        path = viterbi_decode(e, crf)
        best_path, best = enum_argmax(e, *params_of(crf))
        assert score_of(path, e, *params_of(crf)) == pytest.approx(best, abs=1e-10)


def test_viterbi_ties_prefer_lower_tags():
    crf = CRF(np.random.default_rng(0), 3)
    assert viterbi_decode(np.zeros((4, 4)), crf) == [0, 0, 0, 0]


def test_tags_to_spans_examples():
    assert tags_to_spans("BIES") == [(0, 3), (3, 4)]
    assert tags_to_spans("IIE") == [(0, 3)]
    assert tags_to_spans("BBS") == [(0, 1), (1, 2), (2, 3)]
    assert tags_to_spans("BI") == [(0, 2)]
    assert tags_to_spans("EE") == [(0, 1), (1, 2)]
    assert tags_to_spans("") == []


def test_round_trip_on_partitions():
    rng = np.random.default_rng(3)
    for _ in range(300):
        n = int(rng.integers(1, 40))
        spans = random_partition(rng, n)
        assert tags_to_spans(tags_from_entities(spans, n)) == spans


def test_every_sequence_repairs_to_a_partition():
    for n in range(1, 6):
        for seq in itertools.product(TAGS, repeat=n):
            spans = tags_to_spans(seq)
            assert spans[0][0] == 0 and spans[-1][1] == n
            assert all(a < b for a, b in spans)
            assert all(spans[k][1] == spans[k + 1][0] for k in range(len(spans) - 1))


def test_crf_loss_gradients():
    rng = np.random.default_rng(4)
    for _ in range(3):
        crf = random_crf(rng, 1.0)
        tags = list(rng.integers(0, 4, size=5))
        report = grad_check(lambda t: crf_loss(t, tags, crf), rng.normal(size=(5, 4)))
        assert report.passed, report.worst


def test_bilstm_shapes_and_direction():
    rng = np.random.default_rng(5)
    lstm = BiLSTM(rng, 6, 5, layers=2)
    x = rng.normal(size=(7, 6))
    h = bilstm_forward(Tensor(x), lstm).data
    assert h.shape == (7, 10)
    # changing the last word leaves the forward half of earlier positions unchanged
    x2 = x.copy()
    x2[-1] += 1.0
    h2 = bilstm_forward(Tensor(x2), lstm).data
    single = BiLSTM(np.random.default_rng(5), 6, 5, layers=1)
    a = bilstm_forward(Tensor(x), single).data
    b = bilstm_forward(Tensor(x2), single).data
    np.testing.assert_array_equal(a[:-1, :5], b[:-1, :5])
    assert not np.allclose(a[0, 5:], b[0, 5:])
    assert not np.allclose(h, h2)


def test_bilstm_rejects_empty():
    with pytest.raises(ContractError):
        bilstm_forward(Tensor(np.zeros((0, 3))), BiLSTM(np.random.default_rng(0), 3, 2))


def test_bilstm_gradient():
    rng = np.random.default_rng(6)
    lstm = BiLSTM(rng, 3, 2, layers=2)
    w = rng.normal(size=(4, 4))
    report = grad_check(lambda t: sum_(bilstm_forward(t, lstm) * Tensor(w)), rng.normal(size=(4, 3)))
    assert report.passed, report.worst


def test_crf_learns_fixed_sequence():
    from formlink.optim import Adam

    rng = np.random.default_rng(7)
    crf = CRF(rng, 3)
    x = Tensor(rng.normal(size=(6, 3)))
    tags = [0, 1, 2, 3, 0, 2]
    opt = Adam(crf.parameters(), lr=0.1)
    for _ in range(100):
        with Tape() as tape:
            tape.backward(crf_loss(crf.emissions(x), tags, crf))
        opt.step()
    assert viterbi_decode(crf.emissions(x), crf) == tags


def test_grouping_accuracy():
    assert grouping_accuracy("BIES", "BIEE") == 0.75
    assert grouping_accuracy([["B", "E"], ["S"]], [["B", "I"], ["S"]]) == pytest.approx(2 / 3)
    with pytest.raises(ContractError):
        grouping_accuracy("BI", "B")
