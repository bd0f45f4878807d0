import numpy as np
import pytest
from hypothesis import given, strategies as st

from reference import dfd_recursive, dtw_recursive, edwp_tree
from trajsim.geo import DomainError
from trajsim.oracles import (
    DistanceMatrix, Measure, cross_matrix, dfd, distance, dtw, edwp, ground_truth_topk,
    pairwise_matrix, rank_rows,
)

coord = st.floats(-1000, 1000, allow_nan=False)
traj = st.lists(st.tuples(coord, coord), min_size=2, max_size=7).map(np.array)


def test_dtw_examples():
    a = np.array([[0.0, 0.0], [2.0, 0.0]])
    assert dtw(a, a) == 0.0
    assert dtw([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0
    assert dtw(a, [[0, 0], [1, 0], [2, 0]]) == 1.0


def test_dtw_example_by_path_enumeration():
    a = np.array([[0.0, 0.0], [2.0, 0.0]])
    b = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    costs = [sum(np.linalg.norm(a[i] - b[j]) for i, j in path) for path in _all_paths(2, 3)]
    assert dtw(a, b) == min(costs) == 1.0


def _all_paths(n, m):
    def extend(path):
        i, j = path[-1]
        if (i, j) == (n - 1, m - 1):
            yield path
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                yield from extend(path + [(i + di, j + dj)])

    return list(extend([(0, 0)]))


def test_dfd_examples():
    a = np.array([[0.0, 0.0], [2.0, 0.0]])
    b = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    assert dfd(a, a) == 0.0
    couplings = [max(np.linalg.norm(a[i] - b[j]) for i, j in p) for p in _all_paths(2, 3)]
    assert dfd(a, b) == min(couplings) == 1.0


@given(st.tuples(coord, coord), traj)
def test_dfd_single_point(p, b):
    assert dfd([p], b) == pytest.approx(np.max(np.linalg.norm(b - np.array(p), axis=1)), rel=1e-12)


def test_edwp_examples():
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    b = np.array([[0.0, 1.0], [1.0, 1.0]])
    assert edwp(a, a) == 0.0
    assert edwp(a, b) == 4.0 == edwp_tree(a, b)


def test_edwp_insertion_beats_replacement():
    # a has one long segment, b samples it at its midpoint: a projection split matches exactly
    a = np.array([[0.0, 0.0], [2.0, 0.0]])
    b = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    assert edwp(a, b) == 0.0
    assert edwp(b, a) == 0.0


@pytest.mark.parametrize("fn, n", [(dtw, 0), (dfd, 0), (edwp, 1)])
def test_too_short_inputs(fn, n):
    with pytest.raises(DomainError):
        fn(np.zeros((n, 2)), np.zeros((3, 2)))


@given(traj, traj)
def test_matches_references(a, b):
    assert dtw(a, b) == dtw_recursive(a, b)
    assert dfd(a, b) == dfd_recursive(a, b)
    ref = edwp_tree(a, b)
    assert edwp(a, b) == pytest.approx(ref, rel=1e-9, abs=1e-9)


@given(traj, traj, st.sampled_from(list(Measure)))
def test_axioms(a, b, m):
    assert distance(a, a, m) == 0.0
    ab, ba = distance(a, b, m), distance(b, a, m)
    assert ab >= 0.0
    assert ab == pytest.approx(ba, rel=1e-9, abs=1e-9)


@given(traj, traj)
def test_dfd_hausdorff_lower_bound(a, b):
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    assert dfd(a, b) >= max(d.min(axis=1).max(), d.min(axis=0).max()) - 1e-9


def _random_path(rng, n, m):
    i = j = 0
    path = [(0, 0)]
    while (i, j) != (n - 1, m - 1):
        moves = [(di, dj) for di, dj in ((1, 0), (0, 1), (1, 1)) if i + di < n and j + dj < m]
        di, dj = moves[rng.integers(len(moves))]
        i, j = i + di, j + dj
        path.append((i, j))
    return path


def test_dtw_path_minimality(rng):
    for _ in range(100):
        a = rng.normal(0, 100, size=(int(rng.integers(1, 12)), 2))
        b = rng.normal(0, 100, size=(int(rng.integers(1, 12)), 2))
        path = _random_path(rng, len(a), len(b))
        assert dtw(a, b) <= sum(np.linalg.norm(a[i] - b[j]) for i, j in path) + 1e-9


def test_pairwise_single():
    D = pairwise_matrix([np.zeros((3, 2))], "dtw")
    assert D.values.tolist() == [[0.0]]


@pytest.mark.parametrize("measure", list(Measure))
def test_pairwise_thread_invariance(rng, measure):
    trajs = [rng.normal(0, 100, size=(int(rng.integers(2, 15)), 2)) for _ in range(12)]
    ref = pairwise_matrix(trajs, measure, threads=1).values.tobytes()
    for t in (2, 8):
        assert pairwise_matrix(trajs, measure, threads=t).values.tobytes() == ref


def test_pairwise_entries_recomputed(rng):
    trajs = [rng.normal(0, 100, size=(int(rng.integers(2, 20)), 2)) for _ in range(50)]
    D = pairwise_matrix(trajs, "dtw", threads=4).values
    assert np.all(np.diag(D) == 0) and np.array_equal(D, D.T)
    for _ in range(20):
        i, j = rng.integers(50, size=2)
        assert D[i, j] == dtw(trajs[i], trajs[j])


def test_cross_matrix_matches_pairwise(rng):
    trajs = [rng.normal(0, 100, size=(5, 2)) for _ in range(6)]
    np.testing.assert_array_equal(cross_matrix(trajs, trajs, "dfd"), pairwise_matrix(trajs, "dfd").values)


def test_threads_env(monkeypatch, rng):
    from trajsim.oracles import resolve_threads
    monkeypatch.setenv("TRAJSIM_THREADS", "3")
    assert resolve_threads() == 3
    assert resolve_threads(5) == 5


def test_distance_matrix_validation():
    with pytest.raises(DomainError):
        DistanceMatrix("dtw", np.array([[0.0, -1.0], [-1.0, 0.0]]))
    with pytest.raises(DomainError):
        Measure.parse("lcss")


def test_topk_two():
    D = DistanceMatrix("dtw", np.array([[0.0, 3.0], [3.0, 0.0]]))
    assert ground_truth_topk(D, 1).indices.tolist() == [[1], [0]]


def test_topk_ties_by_index():
    n = 5
    D = DistanceMatrix("dtw", np.ones((n, n)) - np.eye(n))
    lists = ground_truth_topk(D, n - 1).indices
    for i in range(n):
        assert lists[i].tolist() == [j for j in range(n) if j != i]


@given(st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_topk_matches_full_sort(n, seed):
    r = np.random.default_rng(seed)
    v = r.integers(0, 4, size=(n, n)).astype(float)  # small range forces ties
    v = v + v.T
    np.fill_diagonal(v, 0)
    k = int(r.integers(1, n))
    lists = ground_truth_topk(DistanceMatrix("dtw", v), k).indices
    for i in range(n):
        naive = sorted((j for j in range(n) if j != i), key=lambda j: (v[i, j], j))[:k]
        assert lists[i].tolist() == naive
        assert len(set(lists[i].tolist())) == k and i not in lists[i]


def test_topk_errors():
    D = DistanceMatrix("dtw", np.zeros((3, 3)))
    with pytest.raises(DomainError):
        ground_truth_topk(D, 0)
    with pytest.raises(DomainError):
        ground_truth_topk(D, 3)


def test_rank_rows_descending():
    out = rank_rows(np.array([[0.1, 0.9, 0.9, 0.5]]), 3, descending=True)
    assert out.indices.tolist() == [[1, 2, 3]]
