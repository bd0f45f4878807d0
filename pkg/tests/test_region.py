import networkx as nx
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from trajsim.geo import CellVocab, DomainError, GridSpec
from trajsim.io import FormatError, load_visual_table, save_cell_table
from trajsim.region import (
    EmbeddingTable, Node2VecConfig, TransitionGraph, build_transition_graph, node2vec,
    random_walks, synth_visual_table, synth_visual_vectors, train_skipgram,
)


def graph_from(nxg):
    return TransitionGraph(nxg.number_of_nodes(), frozenset((int(u), int(v)) for u, v in nxg.edges()))


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_chain_edges():
    g = build_transition_graph([[1, 2, 3]], 4)
    assert g.edges == {(1, 2), (2, 3)}
    indptr, indices = g.walk_csr()
    und = {(u, int(v)) for u in range(4) for v in indices[indptr[u]:indptr[u + 1]]}
    assert und == {(1, 2), (2, 3), (2, 1), (3, 2)}


def test_duplicate_trajectory_same_graph():
    assert build_transition_graph([[1, 2, 3]], 4) == build_transition_graph([[1, 2, 3], [1, 2, 3]], 4)


@given(st.lists(st.lists(st.integers(0, 9), min_size=1, max_size=12), min_size=1, max_size=10))
def test_edges_match_pair_scan(seqs):
    expect = set()
    for s in seqs:
        for k in range(len(s) - 1):
            if s[k] != s[k + 1]:
                expect.add((s[k], s[k + 1]))
    assert build_transition_graph(seqs, 10).edges == expect


def test_cell_out_of_range():
    with pytest.raises(DomainError):
        build_transition_graph([[0, 5]], 5)


def test_single_edge_walks_alternate():
    g = build_transition_graph([[0, 1]], 2)
    walks = random_walks(g, Node2VecConfig(walk_length=4, walks_per_node=5))
    assert len(walks) == 10
    for w in walks:
        assert len(w) == 4
        assert all(w[k] != w[k + 1] for k in range(3))


def test_isolated_node_singleton_walk():
    g = TransitionGraph(3, frozenset({(0, 1)}))
    walks = random_walks(g, Node2VecConfig(walks_per_node=2))
    assert [w.tolist() for w in walks if w[0] == 2] == [[2], [2]]


def test_uniform_transitions_chi_square():
    # star: from the hub with p = q = 1, every leaf should be equally likely
    k = 8
    g = graph_from(nx.star_graph(k))
    walks = random_walks(g, Node2VecConfig(walks_per_node=1250, walk_length=9))
    counts = np.zeros(k + 1)
    steps = 0
    for w in walks:
        for a, b in zip(w[:-1], w[1:]):
            if a == 0:
                counts[b] += 1
                steps += 1
    assert steps >= 10_000
    assert chisquare(counts[1:]).pvalue > 1e-3


def test_walks_deterministic():
    g = graph_from(nx.karate_club_graph())
    cfg = Node2VecConfig(p=0.5, q=2.0)
    a, b = random_walks(g, cfg), random_walks(g, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = random_walks(g, Node2VecConfig(p=0.5, q=2.0, seed=1))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_return_bias():
    # a tiny p makes walks step straight back to where they came from
    g = graph_from(nx.path_graph(6))
    walks = random_walks(g, Node2VecConfig(p=1e-3, q=1.0, walks_per_node=20, walk_length=10))
    back = total = 0
    for w in walks:
        for k in range(2, len(w)):
            total += 1
            back += w[k] == w[k - 2]
    assert back / total > 0.95


def test_zero_epochs_is_initialization():
    g = graph_from(nx.cycle_graph(6))
    walks = random_walks(g, Node2VecConfig())
    a = train_skipgram(walks, 6, 16, Node2VecConfig(epochs=0))
    b = train_skipgram(walks, 6, 16, Node2VecConfig(epochs=0))
    assert np.array_equal(a.values, b.values)
    c = train_skipgram(walks, 6, 16, Node2VecConfig(epochs=1))
    assert not np.array_equal(a.values, c.values)


def test_skipgram_rejects_zero_dim():
    with pytest.raises(DomainError):
        train_skipgram([np.array([0, 1])], 2, 0, Node2VecConfig())


def test_barbell_separation():
    g = graph_from(nx.barbell_graph(10, 0))
    emb = node2vec(g, 32, Node2VecConfig()).values[:20]
    e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    sims = e @ e.T
    side = np.arange(20) < 10
    same = side[:, None] == side[None, :]
    off = ~np.eye(20, dtype=bool)
    intra, inter = sims[same & off].mean(), sims[~same].mean()
    assert intra - inter >= 0.2
    # one-dimensional projection on the class-mean difference separates the cliques
    w = e[side].mean(0) - e[~side].mean(0)
    proj = e @ w
    thr = (proj[side].mean() + proj[~side].mean()) / 2
    assert np.mean((proj > thr) == side) >= 0.9


def test_first_epoch_loss_decreases():
    g = graph_from(nx.connected_watts_strogatz_graph(50, 4, 0.1, seed=0))
    cfg = Node2VecConfig(epochs=1)
    tab = train_skipgram(random_walks(g, cfg), 50, 32, cfg, loss_every=500)
    log = tab.loss_log
    assert len(log) >= 4
    assert np.mean(log[-2:]) < np.mean(log[:2])


def test_table_lookup_unk():
    t = EmbeddingTable(np.vstack([np.ones((3, 4)), np.zeros((1, 4))]))
    assert np.array_equal(t.lookup([0, 7, -1]), [[1] * 4, [0] * 4, [0] * 4])
    with pytest.raises(DomainError):
        EmbeddingTable(np.full((2, 2), np.nan))


GRID = GridSpec(18)
BASE = int(GRID.cell_ids(np.array([[-8.61, 41.15]]))[0])


def test_visual_rows_deterministic_and_unit():
    ids = BASE + np.arange(50)
    a = synth_visual_vectors(ids, GRID, 32, 5)
    assert np.array_equal(a, synth_visual_vectors(ids, GRID, 32, 5))
    assert np.allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-6)
    assert np.array_equal(a[7], synth_visual_vectors([ids[7]], GRID, 32, 5)[0])


def test_visual_adjacent_cells_correlate(rng):
    n = GRID.n_tiles
    adj, far = [], []
    for _ in range(1000):
        c = BASE + int(rng.integers(-5000, 5000)) * n + int(rng.integers(-5000, 5000))
        v = synth_visual_vectors([c, c + 1, c + 100], GRID, 32, 0)
        adj.append(cos(v[0], v[1]))
        far.append(cos(v[0], v[2]))
    assert np.mean(adj) > np.mean(far)


def test_visual_table_shape():
    vocab = CellVocab(BASE + np.arange(5))
    t = synth_visual_table(vocab, GRID, 16, 0)
    assert t.values.shape == (6, 16) and not t.values[-1].any() and t.role == "visual"


def test_visual_file_empty(tmp_path):
    p = tmp_path / "v.tvis"
    save_cell_table(p, [], np.zeros((0, 8)))
    vocab = CellVocab(np.arange(4))
    assert not load_visual_table(p, vocab, 8).values.any()


def test_visual_file_single_cell(tmp_path):
    p = tmp_path / "v.tvis"
    v = np.arange(8, dtype=np.float32) / 7
    save_cell_table(p, [2], v[None])
    t = load_visual_table(p, CellVocab(np.arange(4)), 8)
    assert np.array_equal(t.lookup([2])[0], v.astype(np.float64))
    assert not t.lookup([0, 1, 3]).any()


def test_visual_file_dimension_and_duplicates(tmp_path):
    p = tmp_path / "v.tvis"
    save_cell_table(p, [1, 2], np.ones((2, 4)))
    with pytest.raises(FormatError):
        load_visual_table(p, CellVocab(np.arange(4)), 8)
    with pytest.raises(DomainError):
        save_cell_table(p, [1, 1], np.ones((2, 4)))
