"""Grid-level context: transition graph, Node2Vec embeddings, visual feature tables."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .geo import CellVocab, DomainError, GridSpec


@dataclass(frozen=True)
class TransitionGraph:
    """Directed, unweighted cell-to-cell transitions over compact ids ``[0, M)``."""

    n_nodes: int
    edges: frozenset  # {(src, dst)}

    def adjacency(self) -> list:
        adj = [[] for _ in range(self.n_nodes)]
        for s, d in sorted(self.edges):
            adj[s].append(d)
        return adj

    def walk_csr(self) -> tuple:
        """Symmetrized CSR (indptr, indices) with sorted neighbour lists."""
        und = set(self.edges) | {(d, s) for s, d in self.edges}
        nbrs = [[] for _ in range(self.n_nodes)]
        for s, d in und:
            nbrs[s].append(d)
        indptr = np.zeros(self.n_nodes + 1, dtype=np.int64)
        for i, ns in enumerate(nbrs):
            indptr[i + 1] = indptr[i] + len(ns)
        indices = np.array([d for ns in nbrs for d in sorted(ns)], dtype=np.int64)
        return indptr, indices


def build_transition_graph(grid_trajs: Sequence, n_nodes: int) -> TransitionGraph:
    """Edge i->j iff some sequence has consecutive compact ids (i, j); ``grid_trajs`` are index sequences."""
    edges = set()
    for seq in grid_trajs:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.size and (seq.max() >= n_nodes or seq.min() < 0):
            raise DomainError(f"cell index outside [0, {n_nodes})")
        for s, d in zip(seq[:-1].tolist(), seq[1:].tolist()):
            if s != d:
                edges.add((s, d))
    return TransitionGraph(int(n_nodes), frozenset(edges))


@dataclass(frozen=True)
class Node2VecConfig:
    walks_per_node: int = 10
    walk_length: int = 40
    window: int = 5
    negatives_per_pair: int = 5
    p: float = 1.0
    q: float = 1.0
    epochs: int = 5
    learning_rate: float = 0.025
    seed: int = 0

    def __post_init__(self):
        for name in ("walks_per_node", "walk_length", "window", "negatives_per_pair"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")
        if self.p <= 0 or self.q <= 0 or self.learning_rate <= 0 or self.epochs < 0:
            raise DomainError("p, q and learning_rate must be positive; epochs non-negative")


@numba.njit(cache=True)
def _has_edge(indptr, indices, u, v):
    lo, hi = indptr[u], indptr[u + 1]
    while lo < hi:
        mid = (lo + hi) // 2
        if indices[mid] < v:
            lo = mid + 1
        else:
            hi = mid
    return lo < indptr[u + 1] and indices[lo] == v


@numba.njit(cache=True)
def _walks(indptr, indices, starts, walks_per_node, walk_length, p, q, seed):
    n = starts.shape[0]
    out = np.full((n * walks_per_node, walk_length), -1, dtype=np.int64)
    row = 0
    for k in range(n):
        node = starts[k]
        # per-node stream: the corpus does not depend on how start nodes are partitioned
        np.random.seed((seed * 1000003 + node * 7919 + 1) % 4294967296)
        for _ in range(walks_per_node):
            out[row, 0] = node
            prev = -1
            cur = node
            for step in range(1, walk_length):
                lo, hi = indptr[cur], indptr[cur + 1]
                deg = hi - lo
                if deg == 0:
                    break
                if prev < 0:
                    nxt = indices[lo + np.random.randint(deg)]
                else:
                    total = 0.0
                    for e in range(lo, hi):
                        x = indices[e]
                        if x == prev:
                            total += 1.0 / p
                        elif _has_edge(indptr, indices, x, prev):
                            total += 1.0
                        else:
                            total += 1.0 / q
                    u = np.random.random() * total
                    acc = 0.0
                    nxt = indices[hi - 1]
                    for e in range(lo, hi):
                        x = indices[e]
                        if x == prev:
                            w = 1.0 / p
                        elif _has_edge(indptr, indices, x, prev):
                            w = 1.0
                        else:
                            w = 1.0 / q
                        acc += w
                        if u < acc:
                            nxt = x
                            break
                out[row, step] = nxt
                prev = cur
                cur = nxt
            row += 1
    return out


def random_walks(g: TransitionGraph, cfg: Node2VecConfig) -> list:
    """Second-order biased walks (``walks_per_node`` per node) on the symmetrized graph.

    Walks stop early at nodes without neighbours; an isolated node yields ``[node]``.
    """
    if g.n_nodes == 0:
        raise DomainError("empty transition graph")
    indptr, indices = g.walk_csr()
    raw = _walks(indptr, indices, np.arange(g.n_nodes, dtype=np.int64),
                 cfg.walks_per_node, cfg.walk_length, float(cfg.p), float(cfg.q), int(cfg.seed))
    return [w[w >= 0] for w in raw]


@numba.njit(cache=True)
def _sgns_epochs(walk_flat, walk_ptr, w_in, w_out, neg_table, window, negatives,
                 lr0, epochs, seed, total_pairs, loss_every, losses):
    np.random.seed(seed % 4294967296)
    d = w_in.shape[1]
    grad = np.zeros(d)
    done = 0
    n_log = 0
    acc_loss = 0.0
    acc_n = 0
    for ep in range(epochs):
        for wi in range(walk_ptr.shape[0] - 1):
            lo, hi = walk_ptr[wi], walk_ptr[wi + 1]
            for c in range(lo, hi):
                center = walk_flat[c]
                a = max(lo, c - window)
                b = min(hi, c + window + 1)
                for o in range(a, b):
                    if o == c:
                        continue
                    ctx = walk_flat[o]
                    lr = lr0 * max(1e-4, 1.0 - done / (total_pairs + 1.0))
                    done += 1
                    grad[:] = 0.0
                    for s in range(negatives + 1):
                        if s == 0:
                            tgt = ctx
                            label = 1.0
                        else:
                            tgt = neg_table[np.random.randint(neg_table.shape[0])]
                            if tgt == ctx:
                                continue
                            label = 0.0
                        dot = 0.0
                        for k in range(d):
                            dot += w_in[center, k] * w_out[tgt, k]
                        if dot > 30.0:
                            sig = 1.0
                        elif dot < -30.0:
                            sig = 0.0
                        else:
                            sig = 1.0 / (1.0 + math.exp(-dot))
                        if label == 1.0:
                            acc_loss -= math.log(max(sig, 1e-12))
                        else:
                            acc_loss -= math.log(max(1.0 - sig, 1e-12))
                        gsc = (label - sig) * lr
                        for k in range(d):
                            grad[k] += gsc * w_out[tgt, k]
                            w_out[tgt, k] += gsc * w_in[center, k]
                    for k in range(d):
                        w_in[center, k] += grad[k]
                    acc_n += 1
                    if acc_n == loss_every and n_log < losses.shape[0]:
                        losses[n_log] = acc_loss / acc_n
                        n_log += 1
                        acc_loss = 0.0
                        acc_n = 0
    return n_log


@dataclass
class EmbeddingTable:
    """``(M + 1, d)`` rows indexed by compact cell id; the last row is UNK."""

    values: np.ndarray
    role: str = "structural"
    loss_log: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] < 1:
            raise DomainError(f"embedding table must be 2-D with an UNK row, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DomainError("embedding table has non-finite entries")
        if self.role not in ("structural", "visual"):
            raise DomainError(f"unknown table role {self.role!r}")
        self.values = v

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def unk(self) -> int:
        return self.values.shape[0] - 1

    def lookup(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        idx = np.where((idx < 0) | (idx >= self.unk), self.unk, idx)
        return self.values[idx]


def train_skipgram(walks: Sequence, n_nodes: int, d: int, cfg: Node2VecConfig, loss_every: int = 1000) -> EmbeddingTable:
    """Skip-gram with negative sampling over a walk corpus (single-threaded, seeded).

    Negatives come from the unigram^0.75 node distribution and the learning rate
    decays linearly to zero over all epochs. The returned table has a zero UNK row.
    """
    if d <= 0:
        raise DomainError(f"embedding dimension must be positive, got {d}")
    if len(walks) == 0:
        raise DomainError("empty walk corpus")
    rng = np.random.default_rng([cfg.seed, 17])
    w_in = (rng.random((n_nodes, d)) - 0.5) / d
    w_out = np.zeros((n_nodes, d))
    flat = np.concatenate([np.asarray(w, dtype=np.int64) for w in walks])
    ptr = np.concatenate([[0], np.cumsum([len(w) for w in walks])]).astype(np.int64)
    counts = np.bincount(flat, minlength=n_nodes).astype(np.float64)
    probs = counts ** 0.75
    probs /= probs.sum()
    table_size = max(1000, 20 * n_nodes)
    neg_table = np.repeat(np.arange(n_nodes, dtype=np.int64), np.round(probs * table_size).astype(np.int64))
    if neg_table.size == 0:
        neg_table = np.arange(n_nodes, dtype=np.int64)
    per_epoch = 0
    for w in walks:
        L = len(w)
        for c in range(L):
            per_epoch += min(L, c + cfg.window + 1) - max(0, c - cfg.window) - 1
    total = per_epoch * cfg.epochs
    losses = np.zeros(max(1, total // loss_every + 1))
    n_log = _sgns_epochs(flat, ptr, w_in, w_out, neg_table, cfg.window, cfg.negatives_per_pair,
                         cfg.learning_rate, cfg.epochs, int(cfg.seed) + 1, float(total), loss_every, losses)
    values = np.vstack([w_in, np.zeros((1, d))])
    return EmbeddingTable(values, "structural", losses[:n_log].tolist())


def node2vec(g: TransitionGraph, d: int, cfg: Node2VecConfig) -> EmbeddingTable:
    return train_skipgram(random_walks(g, cfg), g.n_nodes, d, cfg)


def _anchor_vector(seed: int, ax: int, ay: int, d: int) -> np.ndarray:
    return np.random.default_rng([seed, 2, ax & 0xFFFFFFFF, ay & 0xFFFFFFFF]).standard_normal(d)


def synth_visual_vectors(cell_ids, grid: GridSpec, d: int, seed: int, scale: int = 8, noise: float = 0.3) -> np.ndarray:
    """Unit vectors for raw cell ids from a smooth random field over tile space.

    Each row bilinearly blends Gaussian anchors placed every ``scale`` tiles and
    adds a small per-cell perturbation, all keyed by ``seed`` and tile position.
    """
    ids = np.atleast_1d(np.asarray(cell_ids, dtype=np.int64))
    n = grid.n_tiles
    out = np.empty((len(ids), d))
    cache = {}

    def anchor(ax, ay):
        key = (ax, ay)
        if key not in cache:
            cache[key] = _anchor_vector(seed, ax, ay, d)
        return cache[key]

    for r, c in enumerate(ids.tolist()):
        tx, ty = c % n, c // n
        fx, fy = tx / scale, ty / scale
        ax, ay = int(math.floor(fx)), int(math.floor(fy))
        u, v = fx - ax, fy - ay
        vec = ((1 - u) * (1 - v) * anchor(ax, ay) + u * (1 - v) * anchor(ax + 1, ay)
               + (1 - u) * v * anchor(ax, ay + 1) + u * v * anchor(ax + 1, ay + 1))
        vec = vec / max(np.linalg.norm(vec), 1e-12)
        vec = vec + noise * np.random.default_rng([seed, 3, c & 0xFFFFFFFF, c >> 32]).standard_normal(d) / math.sqrt(d)
        out[r] = vec / np.linalg.norm(vec)
    return out


def synth_visual_table(vocab: CellVocab, grid: GridSpec, d: int, seed: int) -> EmbeddingTable:
    values = np.vstack([synth_visual_vectors(vocab.cell_ids, grid, d, seed), np.zeros((1, d))])
    return EmbeddingTable(values, "visual")


def table_from_cells(vocab: CellVocab, cell_ids, vectors: np.ndarray, d: int, role: str) -> EmbeddingTable:
    """Place per-cell vectors (keyed by raw cell id) into vocab order; missing cells stay zero."""
    values = np.zeros((vocab.size + 1, d))
    for c, v in zip(np.asarray(cell_ids, dtype=np.int64).tolist(), vectors):
        if c in vocab:
            values[vocab.encode([c])[0]] = v
    return EmbeddingTable(values, role)
