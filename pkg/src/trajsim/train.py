"""Supervised contrastive training with nearest-neighbour positives and in-batch hard negatives."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch

from .geo import DomainError
from .metrics import evaluate
from .model.encoder import ModelConfig, RePoEncoder, collate
from .oracles import DistanceMatrix, ground_truth_topk

log = logging.getLogger(__name__)


class TrainingError(DomainError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    temperature: float = 0.2
    hard_negatives: int = 1
    batch_size: int = 128
    learning_rate: float = 2e-5
    epochs: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    infonce: bool = False  # put the positive inside the denominator (standard InfoNCE)

    def __post_init__(self):
        if self.temperature <= 0:
            raise DomainError("temperature must be positive")
        if self.hard_negatives < 1:
            raise DomainError("hard_negatives must be >= 1")
        if self.hard_negatives >= self.batch_size - 1:
            raise DomainError("hard_negatives must be smaller than batch_size - 1")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise DomainError("epochs must be >= 0 and learning_rate > 0")


def select_positive(D, i: int) -> int:
    """Nearest neighbour of ``i`` under the ground-truth distances (lowest index on ties)."""
    row = np.array(D.values[i] if isinstance(D, DistanceMatrix) else D[i], dtype=np.float64)
    if len(row) < 2:
        raise DomainError("need at least two trajectories to pick a positive")
    row[i] = np.inf
    return int(np.argmin(row))


def all_positives(D: DistanceMatrix) -> np.ndarray:
    return ground_truth_topk(D, 1).indices[:, 0]


def mine_hard_negatives(embeddings, i: int, j_pos: int, k: int) -> np.ndarray:
    """The ``k`` batch members most cosine-similar to member ``i``, excluding ``i`` and ``j_pos``."""
    e = embeddings.detach().cpu().numpy() if isinstance(embeddings, torch.Tensor) else np.asarray(embeddings)
    e = np.asarray(e, dtype=np.float64)
    if len(e) < k + 2:
        raise DomainError(f"batch of {len(e)} too small for {k} hard negatives")
    e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)
    sims = e @ e[i]
    sims[[i, j_pos]] = -np.inf
    return np.argsort(-sims, kind="stable")[:k]


def contrastive_loss(S: torch.Tensor, anchors, positives, negatives, tau: float, infonce: bool = False) -> torch.Tensor:
    """-(1/N) sum_i [S[i, j+]/tau - log sum_{j in N_i} exp(S[i, j]/tau)].

    ``anchors``/``positives`` index rows/columns of ``S``; ``negatives`` is an
    (N, k) index array. By default the positive is not part of the log-sum-exp,
    so the value can be negative; ``infonce=True`` adds it to the denominator.
    """
    anchors = torch.as_tensor(anchors, dtype=torch.long)
    positives = torch.as_tensor(positives, dtype=torch.long)
    negatives = torch.as_tensor(np.asarray(negatives), dtype=torch.long)
    if negatives.dim() != 2 or negatives.shape[1] == 0:
        raise DomainError("each anchor needs a non-empty negative set")
    pos = S[anchors, positives] / tau
    neg = S[anchors[:, None], negatives] / tau
    if infonce:
        neg = torch.cat([pos[:, None], neg], dim=1)
    return -(pos - torch.logsumexp(neg, dim=1)).mean()


@dataclass
class TrainResult:
    model: RePoEncoder
    best_state: dict
    init_state: dict
    epoch_losses: List[float] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    val_hr1: List[float] = field(default_factory=list)
    best_epoch: int = 0

    def best_model(self) -> RePoEncoder:
        m = copy.deepcopy(self.model)
        m.load_state_dict(self.best_state)
        return m


def hr1_self(model: RePoEncoder, items: Sequence, D: DistanceMatrix) -> float:
    """HR@1 of ``items`` retrieving among themselves (self excluded)."""
    if len(items) < 2:
        return float("nan")
    emb = model.embed(items)
    truth = ground_truth_topk(D, 1)
    return evaluate(emb, emb, truth, ks=(1,), rm=(), exclude=np.arange(len(items))).hr[1]


def _batch_members(anchors: np.ndarray, positives: np.ndarray):
    members = list(anchors.tolist())
    where = {m: r for r, m in enumerate(members)}
    pos_rows = []
    for a in anchors.tolist():
        p = int(positives[a])
        if p not in where:
            where[p] = len(members)
            members.append(p)
        pos_rows.append(where[p])
    return members, np.arange(len(anchors)), np.array(pos_rows)


def train(train_items: Sequence, D_train: DistanceMatrix, structural, visual, cfg: TrainConfig,
          model_cfg: ModelConfig, val_items: Optional[Sequence] = None, D_val: Optional[DistanceMatrix] = None,
          model: Optional[RePoEncoder] = None) -> TrainResult:
    """Train the encoder; each step embeds the anchors plus their positives and mines negatives in-batch.

    Items are ``(cell_index_seq, point_features)`` pairs aligned with ``D_train``.
    The retained state is the epoch with the best validation HR@1 (the last
    epoch when no validation data is given).
    """
    n = len(train_items)
    if D_train.n != n:
        raise DomainError(f"distance matrix covers {D_train.n} trajectories, training set has {n}")
    if n < cfg.hard_negatives + 2:
        raise DomainError(f"training set of {n} too small for {cfg.hard_negatives} hard negatives")
    torch.manual_seed(cfg.seed)
    model = model or RePoEncoder(model_cfg, structural, visual)
    init_state = copy.deepcopy(model.state_dict())
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    positives = all_positives(D_train)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model, copy.deepcopy(init_state), init_state)
    best_val = -math.inf
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = rng.permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            anchors = perm[s:s + cfg.batch_size]
            members, a_rows, p_rows = _batch_members(anchors, positives)
            if len(members) < cfg.hard_negatives + 2:
                continue
            batch = collate([train_items[m] for m in members], model.unk)
            emb = model(batch)
            S = emb @ emb.T
            negs = np.stack([mine_hard_negatives(emb, a, p, cfg.hard_negatives) for a, p in zip(a_rows, p_rows)])
            loss = contrastive_loss(S, a_rows, p_rows, negs, cfg.temperature, cfg.infonce)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step} (epoch {epoch})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            value = loss.item()
            losses.append(value)
            result.step_losses.append(value)
            step += 1
        result.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
        model.eval()
        if val_items is not None and D_val is not None and len(val_items) >= 2:
            val = hr1_self(model, val_items, D_val)
        else:
            val = float(epoch)  # no validation data: keep the latest epoch
        result.val_hr1.append(val)
        if val > best_val:
            best_val = val
            result.best_state = copy.deepcopy(model.state_dict())
            result.best_epoch = epoch
        log.info("epoch %d loss %.4f val_hr1 %.4f", epoch, result.epoch_losses[-1], val)
    return result
