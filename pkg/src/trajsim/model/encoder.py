"""Region-wise encoder, point-wise experts, MoE fusion and dual-modal fusion."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..geo import DomainError
from .layers import (
    Linear,
    MultiHeadAttention,
    PositionGroupNorm,
    SameConv1d,
    init_parameters,
    masked_softmax,
    masked_weighted_sum,
    pack,
    pairwise_dot,
    rowwise,
    sinusoidal_positions,
    unpack,
)

N_POINT_FEATURES = 6


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    heads: int = 4
    cnn_kernel: int = 3
    cnn_layers: int = 3
    groupnorm_groups: int = 8
    cde_hidden: int = 32
    cde_solver_steps_per_segment: int = 4
    dropout: float = 0.0
    ffn_mult: int = 4
    router_hidden: int = 32
    leaky_slope: float = 0.01
    query_side: str = "region"  # "point" swaps the cross-attention roles
    seed: int = 0

    def __post_init__(self):
        if self.d <= 0 or self.d % self.heads:
            raise DomainError(f"d={self.d} must be positive and divisible by heads={self.heads}")
        if self.d % self.groupnorm_groups:
            raise DomainError(f"d={self.d} not divisible by groupnorm_groups={self.groupnorm_groups}")
        if not (0 < self.cde_hidden <= self.d):
            raise DomainError(f"cde_hidden must be in (0, d], got {self.cde_hidden}")
        if self.cde_solver_steps_per_segment < 1:
            raise DomainError("cde_solver_steps_per_segment must be >= 1")
        if self.dropout != 0.0:
            raise DomainError("dropout is not supported; use 0")
        if self.query_side not in ("region", "point"):
            raise DomainError(f"query_side must be 'region' or 'point', got {self.query_side!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    cells: torch.Tensor  # (B, n1) compact cell ids, UNK in padding
    cell_mask: torch.Tensor  # (B, n1) bool
    feats: torch.Tensor  # (B, n2, 6)
    point_mask: torch.Tensor  # (B, n2) bool

    def __len__(self):
        return self.cells.shape[0]

    def to(self, dtype):
        return Batch(self.cells, self.cell_mask, self.feats.to(dtype), self.point_mask)


def collate(items: Sequence, unk: int, pad_to: Optional[tuple] = None, dtype=torch.float32) -> Batch:
    """Right-pad ``(cell_index_seq, point_features)`` pairs into a Batch."""
    if len(items) == 0:
        raise DomainError("empty batch")
    n1 = max(len(c) for c, _ in items)
    n2 = max(len(f) for _, f in items)
    if pad_to is not None:
        n1, n2 = max(n1, pad_to[0]), max(n2, pad_to[1])
    b = len(items)
    cells = torch.full((b, n1), unk, dtype=torch.long)
    cmask = torch.zeros(b, n1, dtype=torch.bool)
    feats = torch.zeros(b, n2, N_POINT_FEATURES, dtype=dtype)
    pmask = torch.zeros(b, n2, dtype=torch.bool)
    for i, (c, f) in enumerate(items):
        c = np.asarray(c, dtype=np.int64)
        f = np.asarray(f)
        if len(c) == 0 or len(f) == 0:
            raise DomainError(f"batch element {i}: empty sequence")
        if f.ndim != 2 or f.shape[1] != N_POINT_FEATURES:
            raise DomainError(f"batch element {i}: expected (n2, 6) point features, got {f.shape}")
        cells[i, : len(c)] = torch.from_numpy(c)
        cmask[i, : len(c)] = True
        feats[i, : len(f)] = torch.from_numpy(f).to(dtype)
        pmask[i, : len(f)] = True
    return Batch(cells, cmask, feats, pmask)


class RegionEncoder(nn.Module):
    """Self-attention over structural and visual cell sequences, summed.

    A learnable CLS row is prepended to both sequences before the sinusoidal
    position encoding is added. The two streams have separate attention weights.
    """

    def __init__(self, cfg: ModelConfig, structural: torch.Tensor, visual: torch.Tensor):
        super().__init__()
        if structural.shape[1] != cfg.d or visual.shape[1] != cfg.d:
            raise DomainError("context tables must have dimension d")
        if structural.shape[0] != visual.shape[0]:
            raise DomainError("structural and visual tables must cover the same cells")
        self.register_buffer("structural", structural.detach().clone(), persistent=False)
        self.register_buffer("visual", visual.detach().clone(), persistent=False)
        self.cls = nn.Parameter(torch.zeros(cfg.d))
        self.attn_s = MultiHeadAttention(cfg.d, cfg.heads)
        self.attn_v = MultiHeadAttention(cfg.d, cfg.heads)

    @property
    def unk(self) -> int:
        return self.structural.shape[0] - 1

    def sequences(self, cells, cell_mask):
        if not bool(cell_mask[:, 0].all()):
            raise DomainError("empty grid sequence in batch")
        idx = cells.clamp(0, self.unk).masked_fill(~cell_mask, self.unk)
        b, n1 = idx.shape
        dt = self.cls.dtype
        pe = sinusoidal_positions(n1 + 1, self.cls.shape[0], dt)
        cls = self.cls.expand(b, 1, -1)
        mask = torch.cat([cell_mask.new_ones(b, 1), cell_mask], dim=1)
        es = torch.cat([cls, self.structural.to(dt)[idx]], dim=1) + pe
        ev = torch.cat([cls, self.visual.to(dt)[idx]], dim=1) + pe
        return es, ev, mask

    def forward(self, cells, cell_mask, cls_only: bool = False):
        """Returns (H^r, mask) with H^r of shape (B, n1 + 1, d), or (B, 1, d) if ``cls_only``."""
        es, ev, mask = self.sequences(cells, cell_mask)
        qmask = mask[:, :1] if cls_only else mask
        qs = es[:, :1] if cls_only else es
        qv = ev[:, :1] if cls_only else ev
        h = self.attn_s(qs, qmask, es, mask) + self.attn_v(qv, qmask, ev, mask)
        return h, qmask


class PointProjection(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.linear = Linear(N_POINT_FEATURES, cfg.d)

    def forward(self, feats, mask):
        if feats.shape[-1] != N_POINT_FEATURES:
            raise DomainError(f"expected {N_POINT_FEATURES} feature columns, got {feats.shape[-1]}")
        return rowwise(self.linear, feats, mask)


class LocalityExpert(nn.Module):
    """Stacked Conv -> GroupNorm -> LeakyReLU."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.convs = nn.ModuleList(SameConv1d(cfg.d, cfg.cnn_kernel) for _ in range(cfg.cnn_layers))
        self.norms = nn.ModuleList(PositionGroupNorm(cfg.groupnorm_groups, cfg.d) for _ in range(cfg.cnn_layers))
        self.slope = cfg.leaky_slope

    def forward(self, h, mask):
        for conv, norm in zip(self.convs, self.norms):
            h = rowwise(lambda r: F.leaky_relu(norm(r), self.slope), conv(h, mask), mask)
        return h


class CorrelationExpert(nn.Module):
    """Adaptive graph: A = softmax(relu(E E^T)), output LayerNorm(A E W)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.node = Linear(cfg.d, cfg.d)
        self.w = Linear(cfg.d, cfg.d, bias=False)
        self.norm = nn.LayerNorm(cfg.d)

    def adjacency(self, ep, mask):
        e = rowwise(self.node, ep, mask)
        scores = F.relu(pairwise_dot(e[:, None], e[:, None]))  # (B, 1, L, L)
        return e, masked_softmax(scores, mask)

    def forward(self, ep, mask, return_adjacency: bool = False):
        e, a = self.adjacency(ep, mask)
        ew = rowwise(self.w, e, mask)
        prop = masked_weighted_sum(a, ew[:, None], mask)[:, 0]
        out = rowwise(self.norm, prop, mask)
        return (out, a[:, 0]) if return_adjacency else out


def hermite_derivatives(x: torch.Tensor, steps: int) -> torch.Tensor:
    """dX/dt of the Hermite cubic through rows of ``x`` (knots at 0..L-1).

    Knot slopes are backward differences (forward difference at the first knot),
    so the curve on [k, k+1] depends only on rows up to k + 1. Returns the
    derivative at every RK4 stage time: shape (B, L - 1, steps, 3, d) for the
    start, midpoint and end of each sub-step.
    """
    m = torch.cat([x[:, 1:2] - x[:, 0:1], x[:, 1:] - x[:, :-1]], dim=1)
    x0, x1, m0, m1 = x[:, :-1], x[:, 1:], m[:, :-1], m[:, 1:]
    u = torch.tensor(
        [[(s + f) / steps for f in (0.0, 0.5, 1.0)] for s in range(steps)], dtype=x.dtype
    )  # (steps, 3)
    a = 6 * u * u - 6 * u
    b = 3 * u * u - 4 * u + 1
    c = -6 * u * u + 6 * u
    e = 3 * u * u - 2 * u
    sh = lambda t: t[:, :, None, None, :]
    return (a[..., None] * sh(x0) + b[..., None] * sh(m0) + c[..., None] * sh(x1) + e[..., None] * sh(m1))


class ContinuityExpert(nn.Module):
    """Neural CDE driven by a Hermite spline of the point embeddings, solved with fixed-step RK4.

    The vector field is tanh-MLP end to end: a ReLU hidden layer makes it
    non-smooth and RK4 then drops to roughly second order.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h, d = cfg.cde_hidden, cfg.d
        self.h, self.d = h, d
        self.steps = cfg.cde_solver_steps_per_segment
        self.phi1 = Linear(d, h)
        self.phi2 = Linear(h, h)
        self.f1 = Linear(h, h)
        self.f2 = Linear(h, h * d)
        self.out = Linear(h, d)

    def vector_field(self, z):
        return torch.tanh(self.f2(torch.tanh(self.f1(z)))).view(z.shape[0], self.h, self.d)

    def drift(self, z, dx):
        return (self.vector_field(z) * dx.unsqueeze(1)).sum(-1)

    def states(self, ep, mask, steps: Optional[int] = None):
        """Hidden state at every knot, (B, L, h)."""
        steps = steps or self.steps
        if ep.shape[1] < 2 or not bool(mask[:, 1].all()):
            raise DomainError("continuity expert needs at least 2 points per trajectory")
        z = self.phi2(F.relu(self.phi1(ep[:, 0])))
        xd = hermite_derivatives(ep, steps)
        # one unbind instead of per-stage slicing keeps the backward pass cheap
        xd = xd.permute(1, 2, 3, 0, 4).reshape(-1, 3, ep.shape[0], ep.shape[2]).unbind(0)
        dt = 1.0 / steps
        zs = [z]
        for k in range(ep.shape[1] - 1):
            for s in range(steps):
                d0, dm, d1 = xd[k * steps + s].unbind(0)
                k1 = self.drift(z, d0)
                k2 = self.drift(z + 0.5 * dt * k1, dm)
                k3 = self.drift(z + 0.5 * dt * k2, dm)
                k4 = self.drift(z + dt * k3, d1)
                z = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            zs.append(z)
        return torch.stack(zs, dim=1)

    def forward(self, ep, mask, steps: Optional[int] = None):
        return rowwise(self.out, self.states(ep, mask, steps), mask)


class MoEFusion(nn.Module):
    """Shared router MLP scores each expert per position; softmax weights mix them."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.router = nn.Sequential(Linear(cfg.d, cfg.router_hidden), nn.ReLU(), Linear(cfg.router_hidden, 1, bias=False))  # a shared bias cancels in the softmax

    def weights(self, experts, mask):
        rows = [pack(e, mask) for e in experts]
        logits = torch.cat([self.router(r) for r in rows], dim=-1)
        return rows, torch.softmax(logits, dim=-1)

    def forward(self, e_loc, e_cor, e_con, mask, return_weights: bool = False):
        rows, w = self.weights((e_loc, e_cor, e_con), mask)
        fused = w[:, 0:1] * rows[0] + w[:, 1:2] * rows[1] + w[:, 2:3] * rows[2]
        out = unpack(fused, mask)
        return (out, unpack(w, mask)) if return_weights else out


class DualModalFusion(nn.Module):
    """Cross-attention, then E = FFN(LayerNorm(H^o + Q)) + H^o; row 0 is the embedding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cross = MultiHeadAttention(cfg.d, cfg.heads)
        self.norm = nn.LayerNorm(cfg.d)
        self.ffn = nn.Sequential(Linear(cfg.d, cfg.ffn_mult * cfg.d), nn.GELU(), Linear(cfg.ffn_mult * cfg.d, cfg.d))

    def forward(self, query, query_mask, kv, kv_mask):
        if not bool(kv_mask[:, 0].all()):
            raise DomainError("fusion needs at least one valid key per sequence")
        ho = self.cross(query, query_mask, kv, kv_mask)
        return rowwise(lambda r: self.ffn(self.norm(r)), ho + query, query_mask) + ho


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / torch.sqrt((x * x).sum(-1, keepdim=True))


class RePoEncoder(nn.Module):
    """Full trajectory encoder producing unit-norm CLS embeddings."""

    def __init__(self, cfg: ModelConfig, structural, visual):
        super().__init__()
        self.cfg = cfg
        structural = torch.as_tensor(np.asarray(structural), dtype=torch.float32)
        visual = torch.as_tensor(np.asarray(visual), dtype=torch.float32)
        self.region = RegionEncoder(cfg, structural, visual)
        self.point = PointProjection(cfg)
        self.locality = LocalityExpert(cfg)
        self.correlation = CorrelationExpert(cfg)
        self.continuity = ContinuityExpert(cfg)
        self.moe = MoEFusion(cfg)
        self.fusion = DualModalFusion(cfg)
        if cfg.query_side == "point":
            self.point_cls = nn.Parameter(torch.zeros(cfg.d))
        init_parameters(self, cfg.seed)

    @property
    def unk(self) -> int:
        return self.region.unk

    def point_encode(self, feats, mask):
        ep = self.point(feats, mask)
        return self.moe(self.locality(ep, mask), self.correlation(ep, mask), self.continuity(ep, mask), mask)

    def forward(self, batch: Batch) -> torch.Tensor:
        hp = self.point_encode(batch.feats, batch.point_mask)
        if self.cfg.query_side == "region":
            hr, qmask = self.region(batch.cells, batch.cell_mask, cls_only=True)
            e = self.fusion(hr, qmask, hp, batch.point_mask)
        else:
            hr, rmask = self.region(batch.cells, batch.cell_mask)
            b = hp.shape[0]
            q = torch.cat([self.point_cls.expand(b, 1, -1), hp], dim=1)
            qmask = torch.cat([batch.point_mask.new_ones(b, 1), batch.point_mask], dim=1)
            e = self.fusion(q[:, :1], qmask[:, :1], hr, rmask)
        return l2_normalize(e[:, 0])

    @torch.no_grad()
    def embed(self, items: Sequence, batch_size: int = 128) -> np.ndarray:
        """Embeddings for ``(cell_index_seq, point_features)`` pairs, in input order."""
        dtype = next(self.parameters()).dtype
        out = []
        for s in range(0, len(items), batch_size):
            out.append(self(collate(items[s:s + batch_size], self.unk, dtype=dtype)).cpu().numpy())
        if not out:
            return np.zeros((0, self.cfg.d), dtype=np.float32)
        return np.concatenate(out)
