import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from stagepred.metrics import BUCKET_LABELS, DegenerateInputError, error_stats, nearest_rank, prr


def test_three_pair_example():
    s = error_stats([(2, 1), (1, 2), (3, 3)])
    assert s.mae == pytest.approx(2 / 3)
    assert s.mqe == pytest.approx(5 / 3)
    assert s.n == 3


def test_perfect_predictions():
    s = error_stats([(x, x) for x in (0.5, 3.0, 70.0, 400.0)])
    assert s.mae == 0.0 and s.p90_ae == 0.0
    assert s.mqe == s.p50_qe == s.p90_qe == 1.0


def test_single_pair():
    s = error_stats([(10.0, 40.0)])
    assert (s.mae, s.mqe, s.p50_ae, s.p50_qe) == (30.0, 4.0, 30.0, 4.0)
    assert s.buckets["10-60s"]["n"] == 1


def test_nonpositive_value_names_pair():
    with pytest.raises(ValueError, match="pair 1"):
        error_stats([(1.0, 1.0), (0.0, 2.0)])


def test_nearest_rank_rule():
    v = [15, 20, 35, 40, 50]
    assert [nearest_rank(v, q) for q in (5, 30, 40, 50, 100)] == [15, 20, 20, 35, 50]


@given(st.lists(st.tuples(st.floats(1e-3, 1e5), st.floats(1e-3, 1e5)), min_size=1, max_size=100))
def test_buckets_partition_pairs(pairs):
    s = error_stats(pairs)
    assert sum(s.buckets[k]["n"] for k in BUCKET_LABELS) == s.n == len(pairs)
    assert s.p50_qe >= 1.0 and s.mqe >= 1.0


# -- PRR -----------------------------------------------------------------------


def _area(seq, total):
    # brute force: trapezoids over k/n, one point per rejected item
    n, acc, prev, area = len(seq), 0.0, 0.0, 0.0
    for x in seq:
        acc += x / total
        area += (prev + acc) / 2 / n
        prev = acc
    return area


def test_perfect_rank_is_one():
    assert prr([3, 2, 1], [30, 20, 10]) == pytest.approx(1.0, abs=1e-12)


def test_anti_ranked_five_elements():
    e = [5.0, 4.0, 3.0, 2.0, 1.0]
    u = [1.0, 2.0, 3.0, 4.0, 5.0]
    total = sum(e)
    oracle = _area(sorted(e, reverse=True), total) - 0.5
    cand = _area(sorted(e), total) - 0.5
    assert cand / oracle < 0
    assert prr(e, u) == pytest.approx(cand / oracle, abs=1e-12)
    assert prr(e, u) == pytest.approx(-1.0, abs=1e-12)


def test_random_scores_average_zero():
    rng = np.random.default_rng(0)
    e = rng.exponential(size=200)
    scores = [prr(e, rng.permutation(200)) for _ in range(1000)]
    assert abs(np.mean(scores)) <= 0.05


def test_degenerate_oracle():
    with pytest.raises(DegenerateInputError):
        prr([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        prr([1.0], [1.0])


def test_ties_in_uncertainty_break_by_error():
    # equal scores: the tie-break orders by error, so this still scores 1
    assert prr([1.0, 3.0, 2.0], [5.0, 5.0, 5.0]) == pytest.approx(1.0)


errs = st.lists(st.floats(0, 100, allow_nan=False), min_size=2, max_size=50)


@given(errs, st.data())
def test_invariant_under_monotone_transform(e, data):
    assume(len(set(e)) > 1)
    # integer scores keep both transforms strictly monotone in floating point
    u = np.asarray(data.draw(st.lists(st.integers(-50, 50), min_size=len(e), max_size=len(e))), dtype=float)
    a = prr(e, u)
    assert prr(e, np.exp(u / 10) * 3.0 + 1.0) == pytest.approx(a, abs=1e-9)
    assert prr(e, u**3 - 2.0) == pytest.approx(a, abs=1e-9)


@given(errs)
def test_never_beats_oracle(e):
    assume(len(set(e)) > 1)
    rng = np.random.default_rng(len(e))
    assert prr(e, rng.normal(size=len(e))) <= 1.0 + 1e-12
    assert prr(e, e) == pytest.approx(1.0)
