import numpy as np
import pytest
from hypothesis import given, strategies as st

from mdlstm_det.metrics import (EvalReport, deteval, format_kv, format_table, iou, iou_fmeasure,
                                iou_matrix, nms)


def random_boxes(rng, n):
    xy = rng.random((n, 2))
    wh = rng.uniform(0.01, 0.5, (n, 2))
    return np.hstack([xy, wh])


def test_iou_examples():
    a = (0.0, 0.0, 1.0, 1.0)
    assert iou(a, a) == 1.0
    assert iou(a, (2.0, 2.0, 1.0, 1.0)) == 0.0
    assert iou(a, (0.5, 0.0, 1.0, 1.0)) == pytest.approx(1 / 3, abs=1e-15)
    assert iou(a, (1.0, 0.0, 1.0, 1.0)) == 0.0  # touching edges


def test_iou_symmetry_and_range_on_many_pairs():
    rng = np.random.default_rng(0)
    a, b = random_boxes(rng, 10_000), random_boxes(rng, 10_000)
    ab = np.array([iou(p, q) for p, q in zip(a, b)])
    ba = np.array([iou(q, p) for p, q in zip(a, b)])
    np.testing.assert_array_equal(ab, ba)
    assert ((ab >= 0) & (ab <= 1)).all()
    assert all(iou(p, p) == pytest.approx(1.0, abs=1e-15) for p in a[:1000])
    m = iou_matrix(a[:50], b[:60])
    np.testing.assert_allclose(m, [[iou(p, q) for q in b[:60]] for p in a[:50]], rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("thr", [0.3, 0.5, 0.7, 1.0])
def test_perfect_hypotheses(thr):
    refs = random_boxes(np.random.default_rng(1), 5)
    rep = iou_fmeasure(refs, np.ones(5), refs, thr)
    assert rep.precision == rep.recall == rep.f_measure == 1.0
    det = deteval(refs, refs)
    assert det.f_measure == rep.f_measure == 1.0


def test_counting_example():
    refs = np.array([[0.1, 0.1, 0.2, 0.1], [0.5, 0.5, 0.2, 0.1]])
    hyps = np.vstack([refs, [[0.8, 0.8, 0.1, 0.1]]])
    rep = iou_fmeasure(hyps, np.ones(3), refs, 0.5)
    assert rep.precision == pytest.approx(2 / 3)
    assert rep.recall == 1.0
    assert rep.f_measure == pytest.approx(0.8)
    assert rep.insertions == 1 and rep.deletions == 0


def test_empty_cases():
    refs = np.array([[0.1, 0.1, 0.2, 0.1]])
    rep = iou_fmeasure(np.zeros((0, 4)), np.zeros(0), refs)
    assert (rep.precision, rep.recall, rep.f_measure) == (0.0, 0.0, 0.0)
    assert deteval(np.zeros((0, 4)), refs).recall == 0.0


def test_confidence_threshold_drops_hypotheses():
    refs = np.array([[0.1, 0.1, 0.2, 0.1]])
    hyps = np.vstack([refs, [[0.6, 0.6, 0.1, 0.1]]])
    rep = iou_fmeasure(hyps, np.array([0.9, 0.2]), refs, 0.5, conf_threshold=0.5)
    assert rep.n_hyps == 1 and rep.precision == 1.0


def test_one_hypothesis_per_reference():
    refs = np.array([[0.0, 0.0, 1.0, 1.0]])
    hyps = np.array([[0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 0.9]])
    rep = iou_fmeasure(hyps, None, refs, 0.5)
    assert rep.matched == 1 and rep.insertions == 1


def test_greedy_takes_highest_iou_first():
    refs = np.array([[0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 0.6]])
    hyps = np.array([[0.0, 0.0, 1.0, 0.7]])
    rep = iou_fmeasure(hyps, None, refs, 0.5)
    assert rep.matched == 1
    assert iou(refs[1], hyps[0]) > iou(refs[0], hyps[0])


def test_monotone_in_iou_threshold_over_many_sets():
    rng = np.random.default_rng(2)
    thresholds = [0.1, 0.3, 0.5, 0.7, 0.9]
    for _ in range(10_000):
        refs = random_boxes(rng, int(rng.integers(0, 5)))
        hyps = np.clip(refs + rng.normal(0, 0.05, refs.shape), 0.001, None) if len(refs) else refs
        hyps = np.vstack([hyps, random_boxes(rng, int(rng.integers(0, 3)))])
        counts = [iou_fmeasure(hyps, None, refs, t).matched for t in thresholds]
        assert all(a >= b for a, b in zip(counts, counts[1:]))


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 6), k=st.integers(0, 6))
def test_f_measure_bounds(seed, n, k):
    rng = np.random.default_rng(seed)
    rep = iou_fmeasure(random_boxes(rng, k), None, random_boxes(rng, n), 0.3)
    assert 0.0 <= rep.f_measure <= 1.0
    assert (rep.f_measure == 0.0) == (rep.matched == 0)


def test_deteval_split_line():
    ref = np.array([[0.0, 0.0, 1.0, 0.1]])
    hyps = np.array([[0.0, 0.0, 0.5, 0.1], [0.5, 0.0, 0.5, 0.1]])
    rep = deteval(hyps, ref)
    assert rep.recall_sum == 0.8
    assert rep.recall == 0.8
    assert rep.precision == 1.0


def test_deteval_merge():
    refs = np.array([[0.0, 0.0, 0.5, 0.1], [0.5, 0.0, 0.5, 0.1]])
    hyp = np.array([[0.0, 0.0, 1.0, 0.1]])
    rep = deteval(hyp, refs)
    assert rep.recall == 1.0
    assert rep.precision == 0.8


def test_deteval_rejects_poor_overlap():
    ref = np.array([[0.0, 0.0, 1.0, 0.1]])
    assert deteval(np.array([[0.0, 0.0, 0.6, 0.1]]), ref).recall == 0.0  # area recall 0.6 < 0.8
    assert deteval(np.array([[0.0, 0.0, 1.0, 0.3]]), ref).recall == 0.0  # area precision 1/3 < 0.4


def test_deteval_warns_on_zero_area():
    ref = np.array([[0.0, 0.0, 1.0, 0.1]])
    with pytest.warns(UserWarning, match="zero-area"):
        rep = deteval(np.array([[0.0, 0.0, 1.0, 0.1], [0.2, 0.2, 0.0, 0.1]]), ref)
    assert rep.n_hyps == 1 and rep.f_measure == 1.0


def test_nms():
    boxes = np.array([[0.0, 0.0, 1.0, 1.0], [0.05, 0.0, 1.0, 1.0], [3.0, 3.0, 1.0, 1.0]])
    assert nms(boxes, np.array([0.6, 0.9, 0.5]), 0.5).tolist() == [1, 2]
    assert nms(boxes, np.array([0.6, 0.9, 0.5]), 0.99).tolist() == [0, 1, 2]


def test_report_addition_and_formatting():
    a = EvalReport(2, 3, 2, 2, {"iou_threshold": 0.5})
    b = EvalReport(1, 0, 0, 0, {"iou_threshold": 0.5})
    s = a + b
    assert (s.n_refs, s.n_hyps, s.recall) == (3, 3, pytest.approx(2 / 3))
    assert "0.6667" in format_table([("iou@0.5", s)])
    kv = format_kv([("iou@0.5", s)])
    assert "iou@0.5.iou_threshold=0.5" in kv and "iou@0.5.n_refs=3" in kv
