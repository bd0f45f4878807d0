import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import ortho_group

from trajsim.geo import DomainError
from trajsim.metrics import (
    MetricsReport, cosine_scores, evaluate, jaccard_scores, metric_hr, metric_mrr,
    metric_ndcg, metric_rmk, random_embeddings,
)
from trajsim.oracles import DistanceMatrix, RankLists, ground_truth_topk


def lists(rows, n=100):
    return RankLists(np.array(rows, dtype=np.int64), n)


def test_perfect_ranking():
    t = lists([[3, 1, 4, 5], [9, 2, 6, 0]])
    assert metric_hr(t, t, 4) == metric_mrr(t, t) == metric_ndcg(t, t, 4) == 1.0


def test_disjoint():
    p, t = lists([[0, 1, 2]]), lists([[3, 4, 5]])
    assert metric_hr(p, t, 3) == metric_ndcg(p, t, 3) == metric_rmk(p, t, 2, 3) == 0.0


def test_hr_partial_overlap():
    assert metric_hr(lists([[1, 2, 3, 9]]), lists([[1, 2, 3, 4]]), 4) == 0.75


def test_rmk_examples():
    truth = lists([[0, 1, 2, 3, 4] + list(range(50, 65))])
    pred = lists([[0, 2, 4] + list(range(20, 37))])
    assert metric_rmk(pred, truth, 5, 20) == 0.6
    pred_all = lists([[4, 3, 2, 1, 0] + list(range(20, 35))])
    assert metric_rmk(pred_all, truth, 5, 20) == 1.0
    with pytest.raises(DomainError):
        metric_rmk(pred, truth, 20, 5)


def test_mrr_examples():
    truth = lists([[7], [8]])
    assert metric_mrr(lists([[8, 7, 1], [7, 8, 1]]), truth) == 0.5
    assert metric_mrr(lists([[7, 0, 1, 2], [0, 1, 2, 8]]), truth) == 0.625


def test_mrr_missing_item_uses_candidate_count():
    assert metric_mrr(lists([[1, 2]], n=40), lists([[5]], n=40)) == 1 / 40


def test_ndcg_single_hit_at_rank_two():
    got = metric_ndcg(lists([[9, 1]]), lists([[0, 1]]), 2)
    expect = (1 / math.log2(3)) / (1 / math.log2(2) + 1 / math.log2(3))
    assert abs(got - expect) < 1e-9
    assert got == pytest.approx(0.3869, abs=1e-4)


def test_ndcg_zero_k():
    t = lists([[1, 2]])
    with pytest.raises(DomainError):
        metric_ndcg(t, t, 0)


def test_hr_exceeding_list_is_error():
    t = lists([[1, 2]])
    with pytest.raises(DomainError):
        metric_hr(t, t, 3)


@given(st.integers(0, 2**31 - 1))
def test_hr_equals_rkk(seed):
    r = np.random.default_rng(seed)
    n, q = 30, 5
    pred = lists([r.permutation(n)[:20] for _ in range(q)], n)
    truth = lists([r.permutation(n)[:20] for _ in range(q)], n)
    for k in (1, 5, 10, 20):
        assert metric_hr(pred, truth, k) == metric_rmk(pred, truth, k, k)


@pytest.mark.parametrize("n", [3, 4, 5])
def test_mrr_ndcg_maximal_only_at_truth(n):
    truth = lists([list(range(n))], n)
    for perm in itertools.permutations(range(n)):
        pred = lists([list(perm)], n)
        k = n - 1
        is_truth = list(perm[:1]) == [0]
        assert (metric_mrr(pred, truth) == 1.0) == is_truth
        full = set(perm[:k]) == set(range(k))
        assert (metric_ndcg(pred, truth, k) == 1.0) == full


def _truth_from_points(r, n):
    x = r.normal(size=(n, 3))
    D = np.linalg.norm(x[:, None] - x[None], axis=2)
    return ground_truth_topk(DistanceMatrix("dtw", D), n - 1)


def test_one_hot_neighbour_embeddings_hit():
    r = np.random.default_rng(0)
    n = 12
    truth = _truth_from_points(r, n)
    # query i points at its true nearest neighbour; candidates are their own one-hot
    queries = np.eye(n)[truth.indices[:, 0]]
    rep = evaluate(queries, np.eye(n), truth, ks=(1,), rm=(), exclude=np.arange(n))
    assert rep.hr[1] == 1.0


def test_random_embeddings_hr1_near_chance():
    r = np.random.default_rng(1)
    n = 41
    truth = _truth_from_points(r, n)
    hrs = [evaluate(e, e, truth, ks=(1,), rm=(), exclude=np.arange(n)).hr[1]
           for e in (random_embeddings(n, 16, s) for s in range(200))]
    assert np.mean(hrs) == pytest.approx(1 / (n - 1), abs=0.01)


@given(st.integers(0, 2**31 - 1))
def test_rotation_invariance(seed):
    r = np.random.default_rng(seed)
    n, d = 15, 6
    truth = _truth_from_points(r, n)
    e = r.normal(size=(n, d))
    rot = ortho_group.rvs(d, random_state=seed % (2**32))
    a = evaluate(e, e, truth, ks=(1, 5), rm=((5, 10),), exclude=np.arange(n))
    b = evaluate(e @ rot, e @ rot, truth, ks=(1, 5), rm=((5, 10),), exclude=np.arange(n))
    for (ka, va), (kb, vb) in zip(a.items(), b.items()):
        assert ka == kb and va == pytest.approx(vb, abs=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_report_values_in_unit_interval(seed):
    r = np.random.default_rng(seed)
    n = 25
    truth = _truth_from_points(r, n)
    rep = evaluate(r.normal(size=(n, 4)), r.normal(size=(n, 4)), truth, ks=(1, 5, 10, 20), rm=((5, 20),),
                   exclude=np.arange(n))
    assert all(0.0 <= v <= 1.0 for _, v in rep.items())


def test_dimension_mismatch():
    with pytest.raises(DomainError):
        cosine_scores(np.ones((2, 3)), np.ones((2, 4)))


def test_report_text_and_json():
    rep = MetricsReport(hr={1: 0.5, 10: 1 / 3}, rmk={(5, 20): 0.25}, mrr=0.123456, ndcg={1: 0.5})
    assert rep.to_text() == "HR@1 = 0.5000\nHR@10 = 0.3333\nR5@20 = 0.2500\nMRR = 0.1235\nNDCG@1 = 0.5000\n"
    assert json.loads(rep.to_json())["R5@20"] == 0.25


def test_oversized_ks_skipped():
    r = np.random.default_rng(2)
    truth = _truth_from_points(r, 8)
    rep = evaluate(r.normal(size=(8, 3)), r.normal(size=(8, 3)), truth, exclude=np.arange(8))
    assert set(rep.hr) == {1, 5} and rep.rmk == {}


def test_jaccard():
    s = jaccard_scores([[1, 2, 3]], [[1, 2, 3], [3, 4], [9]])
    assert s.tolist() == [[1.0, 0.25, 0.0]]
