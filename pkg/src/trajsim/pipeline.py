"""Glue between the stages: trajectories -> grid/vocab/features -> encoder inputs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .geo import CellVocab, GridSpec, GridTrajectory, map_to_grid
from .oracles import DistanceMatrix, cross_matrix, pairwise_matrix
from .preprocess import GpsTrajectory, NormStats, compute_norm_stats, extract_point_features
from .region import EmbeddingTable, Node2VecConfig, build_transition_graph, node2vec, synth_visual_table


@dataclass
class Prepared:
    """Cleaned trajectories together with everything the encoder needs to consume them."""

    trajs: List[GpsTrajectory]
    grid: GridSpec
    grid_trajs: List[GridTrajectory]
    vocab: CellVocab
    norm: NormStats
    _items: Optional[list] = field(default=None, repr=False)

    def __len__(self):
        return len(self.trajs)

    @property
    def ids(self) -> np.ndarray:
        return np.array([t.id for t in self.trajs], dtype=np.int64)

    def items(self) -> list:
        """``(compact_cell_seq, point_features)`` per trajectory."""
        if self._items is None:
            self._items = [(self.vocab.encode(g.cells), extract_point_features(t, self.norm))
                           for t, g in zip(self.trajs, self.grid_trajs)]
        return self._items

    def xy(self) -> list:
        return [t.xy() for t in self.trajs]

    def subset(self, idx: Sequence[int]) -> "Prepared":
        idx = list(np.asarray(idx, dtype=np.int64))
        sub = Prepared([self.trajs[i] for i in idx], self.grid, [self.grid_trajs[i] for i in idx], self.vocab, self.norm)
        if self._items is not None:
            sub._items = [self._items[i] for i in idx]
        return sub


def prepare(trajs: Sequence[GpsTrajectory], grid: GridSpec, vocab: Optional[CellVocab] = None,
            norm: Optional[NormStats] = None) -> Prepared:
    """Grid-map and featurize; ``vocab``/``norm`` default to statistics of ``trajs`` themselves."""
    trajs = list(trajs)
    grid_trajs = [map_to_grid(t, grid) for t in trajs]
    vocab = vocab if vocab is not None else CellVocab.build(grid_trajs, grid if grid.bbox is not None else None)
    norm = norm if norm is not None else compute_norm_stats(trajs)
    return Prepared(trajs, grid, grid_trajs, vocab, norm)


def prepare_split(trajs: Sequence[GpsTrajectory], grid: GridSpec, train_idx: Sequence[int]) -> Prepared:
    """Like ``prepare`` but with vocabulary and normalization taken from the training split only."""
    trajs = list(trajs)
    grid_trajs = [map_to_grid(t, grid) for t in trajs]
    train = [grid_trajs[i] for i in train_idx]
    vocab = CellVocab.build(train, grid if grid.bbox is not None else None)
    norm = compute_norm_stats([trajs[i] for i in train_idx])
    return Prepared(trajs, grid, grid_trajs, vocab, norm)


def structural_table(prep: Prepared, d: int, cfg: Node2VecConfig, train_idx: Optional[Sequence[int]] = None) -> EmbeddingTable:
    """Node2Vec over the transition graph of the training trajectories (all of ``prep`` by default)."""
    seqs = prep.grid_trajs if train_idx is None else [prep.grid_trajs[i] for i in train_idx]
    g = build_transition_graph([prep.vocab.encode(t.cells) for t in seqs], prep.vocab.size)
    return node2vec(g, d, cfg)


def context_tables(prep: Prepared, d: int, n2v: Node2VecConfig, visual_seed: int,
                   train_idx: Optional[Sequence[int]] = None):
    return structural_table(prep, d, n2v, train_idx), synth_visual_table(prep.vocab, prep.grid, d, visual_seed)


def ground_truth(prep: Prepared, measure, threads: Optional[int] = None) -> DistanceMatrix:
    """Pairwise oracle distances on Web-Mercator coordinates (meters)."""
    return pairwise_matrix(prep.xy(), measure, threads)


def ground_truth_cross(queries: Prepared, candidates: Prepared, measure, threads: Optional[int] = None) -> np.ndarray:
    return cross_matrix(queries.xy(), candidates.xy(), measure, threads)
