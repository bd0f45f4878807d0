"""Trajectory cleaning, normalization statistics and per-point features."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .geo import DomainError, check_lonlat, mercator_project


@dataclass(frozen=True)
class GpsTrajectory:
    id: int
    points: np.ndarray  # (n, 2) lon, lat in degrees

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
            raise DomainError(f"trajectory {self.id}: expected non-empty (n, 2) points")
        check_lonlat(pts)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def xy(self) -> np.ndarray:
        return mercator_project(self.points)


@dataclass(frozen=True)
class CleanConfig:
    dedup_dist_m: float = 5.0
    outlier_factor: float = 5.0
    min_len: int = 10
    max_len: int = 300

    def __post_init__(self):
        if self.dedup_dist_m <= 0 or self.outlier_factor <= 0 or self.min_len <= 0 or self.max_len <= 0:
            raise DomainError("clean config values must be positive")
        if self.min_len > self.max_len:
            raise DomainError(f"min_len {self.min_len} > max_len {self.max_len}")


@dataclass(frozen=True)
class NormStats:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    d_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max and self.d_max > 0):
            raise DomainError(f"degenerate normalization statistics: {self}")


def _step_lengths(xy: np.ndarray) -> np.ndarray:
    diff = np.diff(xy, axis=0)
    return np.sqrt(diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1])


def clean_trajectory(raw, cfg: CleanConfig = CleanConfig(), traj_id: int = 0) -> Optional[GpsTrajectory]:
    """Drop near-duplicate and outlier points; ``None`` means the trajectory is rejected.

    Distances are planar Web-Mercator meters. Duplicates collapse onto the first
    point of a run. An outlier is a point farther than ``outlier_factor`` times the
    median step from each of its neighbours (endpoints have a single neighbour).
    """
    if isinstance(raw, GpsTrajectory):
        traj_id, pts = raw.id, raw.points
    else:
        pts = np.asarray(raw, dtype=np.float64)
    if len(pts) == 0:
        raise DomainError("cannot clean an empty trajectory")
    xy = mercator_project(np.atleast_2d(pts))

    keep = [0]
    for i in range(1, len(xy)):
        dx, dy = xy[i] - xy[keep[-1]]
        if math.sqrt(dx * dx + dy * dy) >= cfg.dedup_dist_m:
            keep.append(i)
    pts, xy = np.atleast_2d(pts)[keep], xy[keep]

    if len(xy) >= 3:
        steps = _step_lengths(xy)
        limit = cfg.outlier_factor * float(np.median(steps))
        prev = np.concatenate([[np.inf], steps])
        nxt = np.concatenate([steps, [np.inf]])
        prev[0], nxt[-1] = nxt[0], prev[-1]
        outlier = (prev > limit) & (nxt > limit)
        pts = pts[~outlier]

    if not (cfg.min_len <= len(pts) <= cfg.max_len):
        return None
    return GpsTrajectory(traj_id, pts)


def clean_dataset(raw_trajs: Iterable[GpsTrajectory], cfg: CleanConfig) -> tuple:
    """Returns (accepted trajectories, rejected ids)."""
    kept, rejected = [], []
    for t in raw_trajs:
        c = clean_trajectory(t, cfg)
        if c is None:
            rejected.append(t.id)
        else:
            kept.append(c)
    return kept, rejected


def compute_norm_stats(dataset: Sequence[GpsTrajectory], percentile: float = 99.0) -> NormStats:
    if len(dataset) == 0:
        raise DomainError("cannot compute normalization statistics of an empty dataset")
    xys = [t.xy() for t in dataset]
    allxy = np.concatenate(xys)
    steps = np.concatenate([_step_lengths(xy) for xy in xys])
    d_max = float(np.percentile(steps, percentile)) if steps.size else 0.0
    return NormStats(
        float(allxy[:, 0].min()), float(allxy[:, 0].max()),
        float(allxy[:, 1].min()), float(allxy[:, 1].max()),
        d_max,
    )


def bearings(xy: np.ndarray) -> np.ndarray:
    """Bearing of each step, clockwise from north, as a fraction of a full turn."""
    diff = np.diff(xy, axis=0)
    theta = np.arctan2(diff[:, 0], diff[:, 1]) % (2.0 * math.pi)
    frac = theta / (2.0 * math.pi)
    return np.where(frac >= 1.0, 0.0, frac)


def extract_point_features(traj: GpsTrajectory, norm: NormStats) -> np.ndarray:
    """(n, 6) rows of (x, y, d_prev, theta_prev, d_next, theta_next), all in [0, 1].

    Boundary rows replicate the adjacent step: the first row's predecessor slots copy
    its successor slots and the last row's successor slots copy its predecessor slots.
    """
    if len(traj) < 2:
        raise DomainError(f"trajectory {traj.id}: at least 2 points needed for bearings")
    xy = traj.xy()
    d = np.clip(_step_lengths(xy) / norm.d_max, 0.0, 1.0)
    th = bearings(xy)
    feats = np.empty((len(xy), 6), dtype=np.float64)
    feats[:, 0] = np.clip((xy[:, 0] - norm.x_min) / (norm.x_max - norm.x_min), 0.0, 1.0)
    feats[:, 1] = np.clip((xy[:, 1] - norm.y_min) / (norm.y_max - norm.y_min), 0.0, 1.0)
    feats[1:, 2], feats[1:, 3] = d, th
    feats[:-1, 4], feats[:-1, 5] = d, th
    feats[0, 2:4] = feats[0, 4:6]
    feats[-1, 4:6] = feats[-1, 2:4]
    return feats


def split_indices(n: int, seed: int, fractions=(0.2, 0.1, 0.7)) -> tuple:
    """Seeded random train/val/test split of ``range(n)``; each part sorted."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    parts = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    return tuple(np.sort(p) for p in parts)
