import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mdlstm_det.matching import (MatchCostParams, TooManyTargets, cost_matrix, match_bruteforce,
                                 match_hungarian, pair_cost_delta, solve_assignment)


def random_instance(rng, n, m):
    boxes = rng.random((m, 4))
    conf = rng.uniform(0.01, 0.99, m)
    targets = rng.random((n, 4))
    return boxes, conf, targets


@pytest.mark.parametrize("l,c,t,expected", [
    ([0.1, 0.2, 0.3, 0.4], 0.5, [0.1, 0.2, 0.3, 0.4], 0.0),
    ([0.1, 0.2, 0.3, 0.4], 0.9, [0.1, 0.2, 0.3, 0.4], math.log(0.1 / 0.9)),
    ([0.2, 0.2, 0.3, 0.4], 0.5, [0.1, 0.2, 0.3, 0.4], 10.0),
])
def test_pair_cost_examples(l, c, t, expected):
    assert pair_cost_delta(l, c, t, 1000.0) == pytest.approx(expected, abs=1e-9)


def test_pair_cost_rejects_bad_confidence():
    for c in (0.0, 1.0, 1.5):
        with pytest.raises(ValueError):
            pair_cost_delta([0] * 4, c, [0] * 4, 1.0)
    with pytest.raises(ValueError):
        MatchCostParams(alpha_match=0.0)


def test_cost_matrix_agrees_with_pair_cost(rng):
    boxes, conf, targets = random_instance(rng, 3, 5)
    cm = cost_matrix(boxes, conf, targets, 7.0)
    for n in range(3):
        for m in range(5):
            assert cm[n, m] == pytest.approx(pair_cost_delta(boxes[m], conf[m], targets[n], 7.0), rel=1e-12)


def test_dominant_predictor_is_chosen():
    targets = np.array([[0.5, 0.5, 0.1, 0.1]])
    boxes = np.array([[0.9, 0.9, 0.1, 0.1], [0.5, 0.5, 0.1, 0.1], [0.1, 0.1, 0.3, 0.3]])
    conf = np.array([0.9, 0.6, 0.9])
    r = match_hungarian(boxes, conf, targets)
    assert r.pairs == [(0, 1)]
    assert r.unmatched_predictors == {0, 2}


def test_anti_diagonal_two_by_two():
    cost = np.array([[5.0, 1.0], [1.0, 5.0]])
    assert sorted(solve_assignment(cost)) == [(0, 1), (1, 0)]


def test_no_targets():
    boxes = np.random.default_rng(0).random((4, 4))
    r = match_hungarian(boxes, np.full(4, 0.5), np.zeros((0, 4)))
    assert r.pairs == [] and r.unmatched_predictors == {0, 1, 2, 3} and r.total_cost == 0.0


def test_too_many_targets():
    with pytest.raises(TooManyTargets, match="3 targets but only 2"):
        match_hungarian(np.zeros((2, 4)), np.full(2, 0.5), np.zeros((3, 4)))
    with pytest.raises(TooManyTargets):
        match_bruteforce(np.zeros((2, 4)), np.full(2, 0.5), np.zeros((3, 4)))


def test_bruteforce_refuses_large_instances():
    with pytest.raises(ValueError, match="too large"):
        match_bruteforce(np.zeros((12, 4)), np.full(12, 0.5), np.zeros((9, 4)))


@pytest.mark.parametrize("seed", range(30))
def test_hungarian_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 9))
    n = int(rng.integers(0, min(m, 6) + 1))
    boxes, conf, targets = random_instance(rng, n, m)
    alpha = float(rng.choice([1.0, 10.0, 1000.0]))
    h = match_hungarian(boxes, conf, targets, alpha)
    b = match_bruteforce(boxes, conf, targets, alpha)
    assert h.total_cost == pytest.approx(b.total_cost, rel=1e-9, abs=1e-9)
    assert len(h.pairs) == n and len({j for _, j in h.pairs}) == n
    assert h.unmatched_predictors == set(range(m)) - {j for _, j in h.pairs}


def test_bruteforce_tie_breaks_lexicographically():
    r = match_bruteforce(np.zeros((3, 4)), np.full(3, 0.5), np.zeros((2, 4)))
    assert r.pairs == [(0, 0), (1, 1)]


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 5), extra=st.integers(0, 3))
def test_permutation_invariance(seed, n, extra):
    rng = np.random.default_rng(seed)
    m = n + extra
    boxes, conf, targets = random_instance(rng, n, m)
    base = match_hungarian(boxes, conf, targets)
    pt, pm = rng.permutation(n), rng.permutation(m)
    shuffled = match_hungarian(boxes[pm], conf[pm], targets[pt])
    assert shuffled.total_cost == pytest.approx(base.total_cost, rel=1e-9, abs=1e-9)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 4), extra=st.integers(0, 3))
def test_raising_confidence_of_matched_predictor_keeps_it(seed, n, extra):
    rng = np.random.default_rng(seed)
    boxes, conf, targets = random_instance(rng, n, n + extra)
    before = match_hungarian(boxes, conf, targets)
    _, m = before.pairs[0]
    conf = conf.copy()
    conf[m] = min(0.999, conf[m] + 0.5 * (1 - conf[m]))
    after = match_hungarian(boxes, conf, targets)
    assert m in {j for _, j in after.pairs}
    assert after.total_cost <= before.total_cost + 1e-9


@pytest.mark.parametrize("n,m", [(60, 1320), (200, 400)])
def test_large_instance_is_optimal_against_perturbation(n, m):
    rng = np.random.default_rng(n)
    cost = rng.random((n, m))
    pairs = solve_assignment(cost)
    total = sum(cost[i, j] for i, j in pairs)
    assert len(pairs) == n and len({j for _, j in pairs}) == n
    # no single swap of two rows' columns, nor a move to a free column, improves it
    col = dict(pairs)
    free = sorted(set(range(m)) - set(col.values()))
    for i in range(0, n, 7):
        assert cost[i, col[i]] <= cost[i, free].min() + 1e-12
        for k in range(n):
            swap = cost[i, col[k]] + cost[k, col[i]]
            assert cost[i, col[i]] + cost[k, col[k]] <= swap + 1e-12
    assert total == pytest.approx(math.fsum(cost[i, j] for i, j in pairs))


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 4), extra=st.integers(0, 3),
       push=st.floats(0.0, 0.5))
def test_moving_matched_predictor_away_never_lowers_cost(seed, n, extra, push):
    # only the matched pair's distance grows; every other cost entry is held fixed
    rng = np.random.default_rng(seed)
    boxes, conf, targets = random_instance(rng, n, n + extra)
    cost = cost_matrix(boxes, conf, targets, 1000.0)
    pairs = solve_assignment(cost)
    t, m = pairs[0]
    d = boxes[m] - targets[t]
    far = cost.copy()
    far[t, m] = 1000.0 * np.dot((1 + push) * d, (1 + push) * d) + (cost[t, m] - 1000.0 * np.dot(d, d))
    before = math.fsum(cost[i, j] for i, j in pairs)
    after = math.fsum(far[i, j] for i, j in solve_assignment(far))
    assert after >= before - 1e-9
