"""Central finite-difference gradient checks for every differentiable block (float64)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict

import numpy as np
import torch
import torch.nn.functional as F

from ..geo import DomainError
from .encoder import (
    ContinuityExpert,
    CorrelationExpert,
    DualModalFusion,
    LocalityExpert,
    ModelConfig,
    MoEFusion,
    PointProjection,
    RegionEncoder,
    RePoEncoder,
    collate,
    l2_normalize,
)
from .layers import init_parameters

# blocks whose output is affine in every checked parameter
LINEAR_BLOCKS = {"point_project"}


class _Probe:
    """A block, its float64 inputs and the scalar objective sum(output * R)."""

    def __init__(self, params: dict, fn: Callable[[], torch.Tensor]):
        self.params = params
        self.fn = fn
        with torch.no_grad():
            shape = fn().shape
        gen = torch.Generator().manual_seed(1234)
        self.r = torch.randn(shape, generator=gen, dtype=torch.float64)

    def loss(self) -> torch.Tensor:
        return (self.fn() * self.r).sum()


def _lengths(shape, gen):
    b, n = shape
    lens = torch.randint(max(2, n // 2), n + 1, (b,), generator=gen).tolist()
    lens[0] = n
    return lens


def _point_inputs(cfg, shape, seed):
    gen = torch.Generator().manual_seed(seed)
    b, n = shape
    lens = _lengths(shape, gen)
    x = torch.randn(b, n, cfg.d, generator=gen, dtype=torch.float64)
    mask = torch.arange(n)[None, :] < torch.tensor(lens)[:, None]
    return x * mask[..., None], mask


def _items(shape, seed, n_cells):
    rng = np.random.default_rng(seed)
    b, n = shape
    return [(rng.integers(0, n_cells, size=int(rng.integers(1, n + 1))), rng.random((int(rng.integers(2, n + 1)), 6)))
            for _ in range(b)]


def _tables(cfg, n_cells, seed):
    rng = np.random.default_rng(seed + 99)
    s = rng.normal(size=(n_cells + 1, cfg.d)) / math.sqrt(cfg.d)
    v = rng.normal(size=(n_cells + 1, cfg.d)) / math.sqrt(cfg.d)
    s[-1] = 0.0
    v[-1] = 0.0
    return s, v


def _build(block: str, cfg: ModelConfig, shape, seed: int) -> _Probe:
    torch.manual_seed(seed)
    if block == "point_project":
        mod = PointProjection(cfg)
        gen = torch.Generator().manual_seed(seed)
        feats = torch.rand(shape[0], shape[1], 6, generator=gen, dtype=torch.float64)
        mask = torch.ones(shape, dtype=torch.bool)
        mask[1:, -1] = False
        init_parameters(mod, seed)
        mod.double()
        return _Probe(dict(mod.named_parameters()), lambda: mod(feats, mask))
    if block in ("locality", "correlation", "continuity"):
        mod = {"locality": LocalityExpert, "correlation": CorrelationExpert, "continuity": ContinuityExpert}[block](cfg)
        init_parameters(mod, seed)
        mod.double()
        x, mask = _point_inputs(cfg, shape, seed)
        return _Probe(dict(mod.named_parameters()), lambda: mod(x, mask))
    if block == "moe":
        mod = MoEFusion(cfg)
        init_parameters(mod, seed)
        mod.double()
        xs = [_point_inputs(cfg, shape, seed + k)[0] for k in range(3)]
        _, mask = _point_inputs(cfg, shape, seed)
        return _Probe(dict(mod.named_parameters()), lambda: mod(*xs, mask))
    if block == "region":
        n_cells = 12
        s, v = _tables(cfg, n_cells, seed)
        mod = RegionEncoder(cfg, torch.as_tensor(s), torch.as_tensor(v))
        init_parameters(mod, seed)
        mod.double()
        batch = collate(_items(shape, seed, n_cells), n_cells, dtype=torch.float64)
        return _Probe(dict(mod.named_parameters()), lambda: mod(batch.cells, batch.cell_mask)[0])
    if block == "fusion":
        mod = DualModalFusion(cfg)
        init_parameters(mod, seed)
        mod.double()
        q, qmask = _point_inputs(cfg, shape, seed)
        kv, kvmask = _point_inputs(cfg, shape, seed + 1)
        return _Probe(dict(mod.named_parameters()), lambda: mod(q, qmask, kv, kvmask))
    if block == "model":
        n_cells = 12
        s, v = _tables(cfg, n_cells, seed)
        mod = RePoEncoder(cfg, s, v).double()
        batch = collate(_items(shape, seed, n_cells), mod.unk, dtype=torch.float64)
        return _Probe(dict(mod.named_parameters()), lambda: mod(batch))
    if block == "loss":
        from ..train import contrastive_loss

        gen = torch.Generator().manual_seed(seed)
        b = max(shape[0], 4)
        emb = torch.nn.Parameter(torch.randn(b, cfg.d, generator=gen, dtype=torch.float64))
        anchors = torch.arange(b)
        positives = (anchors + 1) % b
        negatives = ((anchors + 2) % b)[:, None]

        def fn():
            e = l2_normalize(emb)
            return contrastive_loss(e @ e.T, anchors, positives, negatives, 0.2)

        return _Probe({"embeddings": emb}, fn)
    if block == "l2norm":
        gen = torch.Generator().manual_seed(seed)
        x = torch.randn(shape[0], cfg.d, generator=gen, dtype=torch.float64)
        return _Probe({}, lambda: l2_normalize(x))
    raise DomainError(f"unknown block {block!r}; known: {', '.join(BLOCKS)}")


# the CDE solves 4 RK4 steps per segment sequentially; 3 segments keep the
# 2 x 1000 forward passes affordable while exercising every code path
DEFAULT_SHAPES = {"continuity": (2, 4)}

BLOCKS = ("point_project", "region", "locality", "correlation", "continuity", "moe", "fusion", "model", "loss", "l2norm")


class _KinkRecorder:
    """Records the sign pattern of every (leaky) ReLU input during a forward pass.

    Patches the three entry points the model uses (``nn.ReLU`` goes through
    ``F.relu``) instead of a TorchFunctionMode, which would tax every op.
    """

    _NAMES = ((F, "relu"), (F, "leaky_relu"), (torch, "relu"))

    def __init__(self):
        self.signs = []
        self._saved = []
        self._depth = 0

    def _wrap(self, fn):
        def recorded(x, *args, **kwargs):
            if self._depth == 0:  # F.relu calls torch.relu internally: record once
                self.signs.append(x.detach() > 0)
            self._depth += 1
            try:
                return fn(x, *args, **kwargs)
            finally:
                self._depth -= 1
        return recorded

    def __enter__(self):
        self._saved = [(mod, name, getattr(mod, name)) for mod, name in self._NAMES]
        for mod, name, fn in self._saved:
            setattr(mod, name, self._wrap(fn))
        return self

    def __exit__(self, *exc):
        for mod, name, fn in self._saved:
            setattr(mod, name, fn)
        return False


def _forward(probe: _Probe):
    with _KinkRecorder() as rec:
        out = probe.fn()
    return out, rec.signs


def _same_branch(a, b) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


@dataclass
class GradCheckResult:
    worst: float
    checked: int
    skipped_kinks: int


def grad_check_detail(block: str, shape=None, seed: int = 0, eps: float = 1e-5, max_params: int = 1000,
                      cfg: ModelConfig | None = None) -> GradCheckResult:
    """Compare autograd against central differences on sampled scalar parameters.

    Parameters are drawn uniformly without replacement across all tensors of the
    block. A draw whose +-eps perturbation flips the sign of any ReLU input
    straddles a kink, where the two-sided difference is not a derivative
    estimate; it is counted and replaced by the next draw.
    """
    if max_params > 1000:
        raise DomainError("at most 1000 sampled parameters")
    cfg = cfg or ModelConfig(d=64, seed=seed)
    shape = shape or DEFAULT_SHAPES.get(block, (2, 6))
    probe = _build(block, cfg, shape, seed)
    if not probe.params:
        return GradCheckResult(0.0, 0, 0)
    names = list(probe.params)
    sizes = np.array([probe.params[n].numel() for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = np.random.default_rng(seed).permutation(int(sizes.sum()))

    for p in probe.params.values():
        p.grad = None
    probe.loss().backward()
    worst, checked, skipped = 0.0, 0, 0
    for f in order:
        if checked == max_params:
            break
        t = int(np.searchsorted(offsets, f, side="right") - 1)
        name, idx = names[t], int(f - offsets[t])
        p = probe.params[name]
        analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[idx])
        if not math.isfinite(analytic):
            raise DomainError(f"non-finite gradient for parameter {name}[{idx}]")
        view = p.data.view(-1)
        orig = float(view[idx])
        with torch.no_grad():
            view[idx] = orig + eps
            up, up_signs = _forward(probe)
            view[idx] = orig - eps
            down, down_signs = _forward(probe)
            view[idx] = orig
        if not _same_branch(up_signs, down_signs):
            skipped += 1
            continue
        # difference outputs before contracting with R: untouched entries cancel exactly
        numeric = float(((up - down) * probe.r).sum()) / (2 * eps)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
        checked += 1
    return GradCheckResult(worst, checked, skipped)


def grad_check(block: str, shape=None, seed: int = 0, eps: float = 1e-5, max_params: int = 1000,
               cfg: ModelConfig | None = None) -> float:
    """Worst relative error |a - n| / max(|a|, |n|, 1e-6); 0.0 for parameter-free blocks."""
    return grad_check_detail(block, shape, seed, eps, max_params, cfg).worst


def grad_check_all(shape=None, seed: int = 0, eps: float = 1e-5, max_params: int = 1000,
                   cfg: ModelConfig | None = None) -> Dict[str, float]:
    return {b: grad_check(b, shape, seed, eps, max_params, cfg) for b in BLOCKS}


def threshold(block: str) -> float:
    return 1e-7 if block in LINEAR_BLOCKS else 1e-4
