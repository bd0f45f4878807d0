"""Clustered correlated-random-walk trajectories for desk-scale experiments."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geo import DomainError, mercator_inverse, mercator_project
from .preprocess import GpsTrajectory


@dataclass(frozen=True)
class SyntheticConfig:
    count: int = 100
    min_len: int = 20
    max_len: int = 40
    bbox: tuple = (-8.70, 41.10, -8.55, 41.20)  # lon_min, lat_min, lon_max, lat_max
    step_m: float = 120.0
    step_jitter: float = 0.15
    turn_std: float = 0.35  # radians, route heading change per step
    n_clusters: int = 20
    lateral_m: float = 25.0
    gps_noise_m: float = 6.0


def _cluster_boxes(xy_lo: np.ndarray, xy_hi: np.ndarray, n_clusters: int) -> list:
    side = int(math.ceil(math.sqrt(n_clusters)))
    w = (xy_hi - xy_lo) / side
    boxes = []
    for c in range(n_clusters):
        r, k = divmod(c, side)
        lo = xy_lo + w * np.array([k, r])
        boxes.append((lo, lo + w))
    return boxes


def _route(rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray, n: int, step: float, turn_std: float):
    """Correlated random walk that reflects off the walls of its box."""
    margin = 0.1 * (hi - lo)
    pos = rng.uniform(lo + 2 * margin, hi - 2 * margin)
    heading = rng.uniform(0, 2 * math.pi)
    pts = [pos.copy()]
    for _ in range(n - 1):
        heading += rng.normal(0.0, turn_std)
        nxt = pos + step * np.array([math.sin(heading), math.cos(heading)])
        for ax in range(2):
            if nxt[ax] < lo[ax] + margin[ax] or nxt[ax] > hi[ax] - margin[ax]:
                heading = (-heading if ax == 0 else math.pi - heading)
                nxt = pos + step * np.array([math.sin(heading), math.cos(heading)])
        pos = np.clip(nxt, lo + margin, hi - margin)
        pts.append(pos.copy())
    return np.array(pts)


def _along(route: np.ndarray, s: np.ndarray) -> tuple:
    """Point and unit tangent at arc lengths ``s`` along a polyline."""
    seg = np.diff(route, axis=0)
    seg_len = np.sqrt((seg ** 2).sum(1))
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = np.clip(s, 0.0, cum[-1])
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[k]) / np.where(seg_len[k] > 0, seg_len[k], 1.0)
    pts = route[k] + frac[:, None] * seg[k]
    tang = seg[k] / np.where(seg_len[k] > 0, seg_len[k], 1.0)[:, None]
    return pts, tang


def generate_synthetic(cfg: SyntheticConfig, seed: int) -> list:
    """Deterministic clustered trajectories.

    Cluster routes depend only on ``seed``; trajectory ``i`` depends only on
    ``(seed, i)``, so a larger ``count`` extends a smaller one with the same seed.
    Trajectory ids are ``0..count-1``.
    """
    lo_lon, lo_lat, hi_lon, hi_lat = cfg.bbox
    if not (lo_lon < hi_lon and lo_lat < hi_lat):
        raise DomainError(f"empty bbox {cfg.bbox}")
    if cfg.count < 0 or cfg.n_clusters < 1 or not (2 <= cfg.min_len <= cfg.max_len):
        raise DomainError(f"invalid synthetic config {cfg}")
    if cfg.count == 0:
        return []
    routes = cluster_routes(cfg, seed)

    out = []
    for i in range(cfg.count):
        rng = np.random.default_rng([seed, 1, i])
        route = routes[int(rng.integers(cfg.n_clusters))]
        n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        steps = cfg.step_m * np.clip(1.0 + cfg.step_jitter * rng.standard_normal(n - 1), 0.3, None)
        total = float(np.sqrt((np.diff(route, axis=0) ** 2).sum(1)).sum())
        start = rng.uniform(0.0, max(total - steps.sum(), 0.0))
        s = start + np.concatenate([[0.0], np.cumsum(steps)])
        base, tang = _along(route, s)
        normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
        # AR(1) lateral drift around the route plus independent GPS noise
        lat = np.empty(n)
        lat[0] = rng.normal(0.0, cfg.lateral_m)
        rho = 0.9
        for k in range(1, n):
            lat[k] = rho * lat[k - 1] + math.sqrt(1 - rho * rho) * rng.normal(0.0, cfg.lateral_m)
        xy = base + lat[:, None] * normal + rng.normal(0.0, cfg.gps_noise_m, size=(n, 2))
        out.append(GpsTrajectory(i, mercator_inverse(xy)))
    return out


def cluster_routes(cfg: SyntheticConfig, seed: int) -> list:
    """The per-cluster centroid routes (Mercator meters) used by ``generate_synthetic``."""
    xy_lo = mercator_project(np.array(cfg.bbox[:2]))
    xy_hi = mercator_project(np.array(cfg.bbox[2:]))
    route_len = int(cfg.max_len * 1.5) + 2
    return [
        _route(np.random.default_rng([seed, 0, c]), lo, hi, route_len, cfg.step_m, cfg.turn_std)
        for c, (lo, hi) in enumerate(_cluster_boxes(xy_lo, xy_hi, cfg.n_clusters))
    ]
