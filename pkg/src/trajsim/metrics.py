"""Retrieval metrics: HR@K, Rm@K, MRR, NDCG@K, and embedding-based evaluation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .geo import DomainError
from .oracles import RankLists, rank_rows


def _check(pred: RankLists, truth: RankLists):
    if len(pred) != len(truth):
        raise DomainError(f"{len(pred)} predicted lists vs {len(truth)} ground-truth lists")


def metric_hr(pred: RankLists, truth: RankLists, k: int) -> float:
    """Mean fraction of the ground-truth top-k found in the predicted top-k."""
    return metric_rmk(pred, truth, k, k)


def metric_rmk(pred: RankLists, truth: RankLists, m: int, k: int) -> float:
    """Mean fraction of the ground-truth top-m found in the predicted top-k."""
    _check(pred, truth)
    if m <= 0 or k <= 0:
        raise DomainError("m and K must be positive")
    if m > k:
        raise DomainError(f"m={m} must not exceed K={k}")
    if k > pred.k or m > truth.k:
        raise DomainError(f"K={k} / m={m} exceed list lengths ({pred.k}, {truth.k})")
    hits = 0
    for p, g in zip(pred.indices[:, :k], truth.indices[:, :m]):
        hits += len(set(p.tolist()) & set(g.tolist()))
    return hits / (len(pred) * m)


def reciprocal_ranks(pred: RankLists, truth: RankLists) -> np.ndarray:
    """1/rank of each query's ground-truth nearest item; a missing item counts as rank n."""
    _check(pred, truth)
    out = np.empty(len(pred))
    for i, (p, g) in enumerate(zip(pred.indices, truth.indices[:, 0])):
        hit = np.flatnonzero(p == g)
        rank = int(hit[0]) + 1 if hit.size else pred.n_candidates
        out[i] = 1.0 / rank
    return out


def metric_mrr(pred: RankLists, truth: RankLists) -> float:
    return float(reciprocal_ranks(pred, truth).mean())


def metric_ndcg(pred: RankLists, truth: RankLists, k: int) -> float:
    """Binary-relevance NDCG@k: relevant means inside the ground-truth top-k."""
    _check(pred, truth)
    if k <= 0:
        raise DomainError("K must be positive")
    if k > pred.k or k > truth.k:
        raise DomainError(f"K={k} exceeds list lengths ({pred.k}, {truth.k})")
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    ideal = disc.sum()
    total = 0.0
    for p, g in zip(pred.indices[:, :k], truth.indices[:, :k]):
        rel = np.isin(p, g)
        total += float(disc[rel].sum()) / ideal
    return total / len(pred)


@dataclass
class MetricsReport:
    hr: Dict[int, float] = field(default_factory=dict)
    rmk: Dict[Tuple[int, int], float] = field(default_factory=dict)
    mrr: float = 0.0
    ndcg: Dict[int, float] = field(default_factory=dict)

    def items(self):
        for k, v in sorted(self.hr.items()):
            yield f"HR@{k}", v
        for (m, k), v in sorted(self.rmk.items()):
            yield f"R{m}@{k}", v
        yield "MRR", self.mrr
        for k, v in sorted(self.ndcg.items()):
            yield f"NDCG@{k}", v

    def to_text(self) -> str:
        return "".join(f"{key} = {val:.4f}\n" for key, val in self.items())

    def to_dict(self) -> dict:
        return {key: val for key, val in self.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"


def evaluate_scores(scores: np.ndarray, truth: RankLists, ks: Sequence[int] = (1, 5, 10, 20, 50),
                    rm: Sequence[Tuple[int, int]] = ((5, 20), (10, 50)), exclude=None) -> MetricsReport:
    """Rank candidates by descending score (ties by index) and compute every metric.

    Ks or (m, K) pairs larger than the available lists are skipped.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] != len(truth) or scores.shape[1] != truth.n_candidates:
        raise DomainError(f"score matrix {scores.shape} does not match ground truth "
                          f"({len(truth)} queries, {truth.n_candidates} candidates)")
    avail = scores.shape[1] - (0 if exclude is None else 1)
    pred = rank_rows(scores, avail, exclude=exclude, descending=True)
    report = MetricsReport()
    for k in ks:
        if k <= min(pred.k, truth.k):
            report.hr[k] = metric_hr(pred, truth, k)
            report.ndcg[k] = metric_ndcg(pred, truth, k)
    for m, k in rm:
        if m <= truth.k and k <= pred.k:
            report.rmk[(m, k)] = metric_rmk(pred, truth, m, k)
    report.mrr = metric_mrr(pred, truth)
    return report


def cosine_scores(queries: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    if q.ndim != 2 or c.ndim != 2 or q.shape[1] != c.shape[1]:
        raise DomainError(f"embedding dimension mismatch: {q.shape} vs {c.shape}")
    q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    c = c / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-12)
    return q @ c.T


def evaluate(query_emb: np.ndarray, cand_emb: np.ndarray, truth: RankLists, ks: Sequence[int] = (1, 5, 10, 20, 50),
             rm: Sequence[Tuple[int, int]] = ((5, 20), (10, 50)), exclude=None) -> MetricsReport:
    """Cosine retrieval quality of embeddings against ground-truth rank lists."""
    return evaluate_scores(cosine_scores(query_emb, cand_emb), truth, ks, rm, exclude)


def random_embeddings(n: int, d: int, seed: int) -> np.ndarray:
    e = np.random.default_rng(seed).standard_normal((n, d))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def jaccard_scores(query_cells: Sequence, cand_cells: Sequence) -> np.ndarray:
    """Jaccard similarity of visited-cell sets."""
    qs = [set(np.asarray(c).tolist()) for c in query_cells]
    cs = [set(np.asarray(c).tolist()) for c in cand_cells]
    out = np.zeros((len(qs), len(cs)))
    for i, a in enumerate(qs):
        for j, b in enumerate(cs):
            union = len(a | b)
            out[i, j] = len(a & b) / union if union else 0.0
    return out
