"""Padding-exact building blocks.

Batches are right-padded with boolean validity masks (valid positions form a
prefix). Two rules keep outputs at valid positions bit-identical however much
padding a batch carries:

* row-wise maps (linear layers, norms) run on the packed matrix of valid rows,
  so the BLAS call never sees padding; linear maps are further cut into
  fixed-height zero-filled blocks, because BLAS kernels pick a different
  summation order depending on how many rows they are handed;
* reductions along the sequence (softmax denominators, attention-weighted sums)
  are fixed-order loops over key positions where padded steps are no-ops.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def pack(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return x[mask]


def unpack(rows: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    out = rows.new_zeros(mask.shape + rows.shape[1:])
    out[mask] = rows
    return out


def rowwise(fn, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Apply ``fn`` to valid rows only; padded rows come back as zeros."""
    return unpack(fn(pack(x, mask)), mask)


ROW_BLOCK = 8


def _blocked_mm(rows: torch.Tensor, wt: torch.Tensor) -> torch.Tensor:
    n = rows.shape[0]
    short = (-n) % ROW_BLOCK
    if short:
        rows = F.pad(rows, (0, 0, 0, short))
    if rows.shape[0] == ROW_BLOCK:
        return (rows @ wt)[:n]
    return torch.cat([blk @ wt for blk in rows.split(ROW_BLOCK)])[:n]


class _StableLinear(torch.autograd.Function):
    # the forward value is what must not depend on the row count; gradients use plain GEMMs
    @staticmethod
    def forward(ctx, rows, weight):
        ctx.save_for_backward(rows, weight)
        return _blocked_mm(rows, weight.t())

    @staticmethod
    def backward(ctx, grad):
        rows, weight = ctx.saved_tensors
        gx = grad @ weight if ctx.needs_input_grad[0] else None
        gw = grad.t() @ rows if ctx.needs_input_grad[1] else None
        return gx, gw


def stable_linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``F.linear`` whose value for a row does not depend on the other rows.

    Every forward GEMM has exactly ``ROW_BLOCK`` rows, so a row gets identical
    arithmetic whether it arrives alone, in a batch, or next to padding.
    """
    lead = x.shape[:-1]
    out = _StableLinear.apply(x.reshape(-1, x.shape[-1]), weight)
    if bias is not None:
        out = out + bias
    return out.reshape(*lead, weight.shape[0])


class Linear(nn.Linear):
    """Drop-in ``nn.Linear`` evaluated with :func:`stable_linear`."""

    def forward(self, x):
        return stable_linear(x, self.weight, self.bias)


def masked_softmax(scores: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to valid keys.

    ``key_mask`` broadcasts against ``scores`` after inserting the query axes,
    i.e. it has shape (B, L) for scores of shape (B, ..., L).
    """
    km = key_mask.view(key_mask.shape[0], *([1] * (scores.dim() - 2)), key_mask.shape[1])
    neg = torch.finfo(scores.dtype).min
    top = scores.masked_fill(~km, neg).amax(-1, keepdim=True).detach()
    e = torch.exp(torch.where(km, scores - top, torch.zeros_like(scores))).masked_fill(~km, 0.0)
    total = e[..., 0]
    for k in range(1, e.shape[-1]):
        total = torch.where(km[..., k], total + e[..., k], total)
    return e / total.unsqueeze(-1)


def masked_weighted_sum(weights: torch.Tensor, values: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
    """``weights @ values`` over valid keys, accumulated in key order.

    weights: (B, H, Lq, L); values: (B, H, L, dh) -> (B, H, Lq, dh).
    """
    km = key_mask[:, None, None, :, None]
    acc = weights[..., 0, None] * values[:, :, None, 0, :]
    for k in range(1, weights.shape[-1]):
        acc = torch.where(km[..., k, :], acc + weights[..., k, None] * values[:, :, None, k, :], acc)
    return acc


def pairwise_dot(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """(B, H, Lq, dh) x (B, H, L, dh) -> (B, H, Lq, L) with per-entry reductions over dh."""
    return torch.stack([(q * k[:, :, None, j, :]).sum(-1) for j in range(k.shape[2])], dim=-1)


def sinusoidal_positions(length: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * i / d)
    pe = torch.zeros(length, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: d // 2])
    return pe.to(dtype)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate q/k/v/out projections."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.d, self.heads, self.dh = d, heads, d // heads
        self.q_proj = Linear(d, d)
        self.k_proj = Linear(d, d, bias=False)  # a key bias shifts all scores equally: no effect
        self.v_proj = Linear(d, d)
        self.out_proj = Linear(d, d)

    def _split(self, x):
        b, l, _ = x.shape
        return x.view(b, l, self.heads, self.dh).transpose(1, 2)

    def forward(self, query, query_mask, key, key_mask, return_weights: bool = False):
        q = self._split(rowwise(self.q_proj, query, query_mask))
        k = self._split(rowwise(self.k_proj, key, key_mask))
        v = self._split(rowwise(self.v_proj, key, key_mask))
        w = masked_softmax(pairwise_dot(q, k) / math.sqrt(self.dh), key_mask)
        ctx = masked_weighted_sum(w, v, key_mask).transpose(1, 2).reshape(query.shape[0], query.shape[1], self.d)
        out = rowwise(self.out_proj, ctx, query_mask)
        return (out, w) if return_weights else out


class PositionGroupNorm(nn.Module):
    """GroupNorm over channel groups, computed independently at every position."""

    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        super().__init__()
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible into {groups} groups")
        self.groups, self.eps = groups, eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, rows):
        n, c = rows.shape
        g = F.layer_norm(rows.view(n, self.groups, c // self.groups), (c // self.groups,), eps=self.eps)
        return g.view(n, c) * self.weight + self.bias


class SameConv1d(nn.Module):
    """Kernel-3 convolution along the sequence with zero padding at both ends of each valid prefix."""

    def __init__(self, channels: int, kernel: int = 3):
        super().__init__()
        if kernel != 3:
            raise ValueError("only kernel size 3 is supported")
        self.weight = nn.Parameter(torch.empty(channels, channels, kernel))
        self.bias = nn.Parameter(torch.empty(channels))

    def forward(self, x, mask):
        x = x * mask.unsqueeze(-1).to(x.dtype)
        zero = x.new_zeros(x.shape[0], 1, x.shape[2])
        prev = torch.cat([zero, x[:, :-1]], dim=1)
        nxt = torch.cat([x[:, 1:], zero], dim=1)
        stacked = torch.cat([prev, x, nxt], dim=-1)
        w = self.weight.permute(0, 2, 1).reshape(self.weight.shape[0], -1)
        return rowwise(lambda r: stable_linear(r, w, self.bias), stacked, mask)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform init driven by a private generator.

    Norm gains start at one and norm shifts at zero; every other tensor draws
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)) where fan_in is taken from the owning layer.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for mod_name, mod in module.named_modules():
            for name, p in mod.named_parameters(recurse=False):
                if isinstance(mod, (nn.LayerNorm, PositionGroupNorm)):
                    p.fill_(1.0 if name == "weight" else 0.0)
                    continue
                if isinstance(mod, nn.Linear):
                    fan_in = mod.in_features
                elif isinstance(mod, SameConv1d):
                    fan_in = mod.weight.shape[1] * mod.weight.shape[2]
                else:
                    fan_in = p.shape[-1] if p.dim() >= 1 else 1
                bound = 1.0 / math.sqrt(max(fan_in, 1))
                p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64).mul(2 * bound).sub(bound).to(p.dtype))
