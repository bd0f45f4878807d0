"""Web-Mercator projection, slippy-map tiling and cell vocabularies."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

EARTH_RADIUS_M = 6378137.0
MAX_LAT = 85.0511
EQUATOR_M = 2.0 * math.pi * EARTH_RADIUS_M


class DomainError(ValueError):
    """Input outside the domain of a geometric or trajectory operation."""


@dataclass(frozen=True)
class LonLat:
    lon: float
    lat: float

    def __post_init__(self):
        check_lonlat(np.array([[self.lon, self.lat]], dtype=np.float64))


def check_lonlat(points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DomainError(f"expected (n, 2) lon/lat array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise DomainError("non-finite coordinate")
    lon, lat = pts[:, 0], pts[:, 1]
    bad = np.flatnonzero((lon < -180.0) | (lon >= 180.0) | (lat <= -MAX_LAT) | (lat >= MAX_LAT))
    if bad.size:
        i = int(bad[0])
        raise DomainError(f"point {i} out of range: lon={lon[i]!r}, lat={lat[i]!r}")


def mercator_project(points) -> np.ndarray:
    """Project lon/lat degrees to Web-Mercator meters.

    Accepts a single ``LonLat``, a ``(lon, lat)`` pair or an ``(n, 2)`` array and
    returns an array of the same leading shape with columns ``(x, y)``.
    """
    if isinstance(points, LonLat):
        points = (points.lon, points.lat)
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    check_lonlat(pts)
    lon = np.radians(pts[:, 0])
    lat = np.radians(pts[:, 1])
    xy = np.empty_like(pts)
    xy[:, 0] = EARTH_RADIUS_M * lon
    xy[:, 1] = EARTH_RADIUS_M * np.arcsinh(np.tan(lat))  # = ln tan(pi/4 + lat/2), exact at 0
    return xy[0] if single else xy


def mercator_inverse(xy) -> np.ndarray:
    arr = np.asarray(xy, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    out = np.empty_like(arr)
    out[:, 0] = np.degrees(arr[:, 0] / EARTH_RADIUS_M)
    out[:, 1] = np.degrees(2.0 * np.arctan(np.exp(arr[:, 1] / EARTH_RADIUS_M)) - math.pi / 2.0)
    return out[0] if single else out


@dataclass(frozen=True)
class GridSpec:
    """Slippy-map tiling at ``zoom``; ``bbox`` is (lon_min, lat_min, lon_max, lat_max)."""

    zoom: int = 18
    bbox: Optional[tuple] = None

    def __post_init__(self):
        if int(self.zoom) < 1:
            raise DomainError(f"zoom must be >= 1, got {self.zoom}")
        if self.bbox is not None:
            if len(self.bbox) != 4:
                raise DomainError("bbox must be (lon_min, lat_min, lon_max, lat_max)")
            lo_lon, lo_lat, hi_lon, hi_lat = map(float, self.bbox)
            if not (lo_lon < hi_lon and lo_lat < hi_lat):
                raise DomainError(f"empty bbox {self.bbox}")
            check_lonlat(np.array([[lo_lon, lo_lat], [hi_lon, hi_lat]]))
            object.__setattr__(self, "bbox", (lo_lon, lo_lat, hi_lon, hi_lat))

    @property
    def n_tiles(self) -> int:
        return 1 << self.zoom

    @property
    def cell_side_m(self) -> float:
        return EQUATOR_M / self.n_tiles

    def tiles(self, points: np.ndarray) -> np.ndarray:
        """Integer (x_tile, y_tile) for each lon/lat row."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        check_lonlat(pts)
        n = self.n_tiles
        lat = np.radians(pts[:, 1])
        xt = np.floor((pts[:, 0] + 180.0) / 360.0 * n)
        yt = np.floor((1.0 - np.log(np.tan(lat) + 1.0 / np.cos(lat)) / math.pi) / 2.0 * n)
        out = np.stack([xt, yt], axis=1).astype(np.int64)
        return np.clip(out, 0, n - 1)

    def cell_ids(self, points: np.ndarray) -> np.ndarray:
        t = self.tiles(points)
        return t[:, 1] * self.n_tiles + t[:, 0]

    def cell_center(self, cell_ids) -> np.ndarray:
        ids = np.atleast_1d(np.asarray(cell_ids, dtype=np.int64))
        n = self.n_tiles
        xt, yt = ids % n, ids // n
        lon = (xt + 0.5) / n * 360.0 - 180.0
        lat = np.degrees(np.arctan(np.sinh(math.pi * (1.0 - 2.0 * (yt + 0.5) / n))))
        return np.stack([lon, lat], axis=1)

    def bbox_cell_ids(self) -> np.ndarray:
        if self.bbox is None:
            return np.zeros(0, dtype=np.int64)
        lo_lon, lo_lat, hi_lon, hi_lat = self.bbox
        corners = self.tiles(np.array([[lo_lon, hi_lat], [hi_lon, lo_lat]]))
        xs = np.arange(corners[0, 0], corners[1, 0] + 1)
        ys = np.arange(corners[0, 1], corners[1, 1] + 1)
        return (ys[:, None] * self.n_tiles + xs[None, :]).ravel()

    def inside(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        if self.bbox is None:
            return np.ones(len(pts), dtype=bool)
        lo_lon, lo_lat, hi_lon, hi_lat = self.bbox
        return (
            (pts[:, 0] >= lo_lon) & (pts[:, 0] <= hi_lon) & (pts[:, 1] >= lo_lat) & (pts[:, 1] <= hi_lat)
        )


@dataclass(frozen=True)
class GridTrajectory:
    id: int
    cells: np.ndarray  # raw linearized tile ids

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64)
        if cells.ndim != 1 or cells.size == 0:
            raise DomainError(f"grid trajectory {self.id} must have at least one cell")
        if np.any(cells[1:] == cells[:-1]):
            raise DomainError(f"grid trajectory {self.id} has consecutive duplicate cells")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    def __len__(self):
        return len(self.cells)


def collapse_repeats(ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size == 0:
        return ids
    keep = np.ones(len(ids), dtype=bool)
    keep[1:] = ids[1:] != ids[:-1]
    return ids[keep]


def map_to_grid(traj, grid: GridSpec) -> GridTrajectory:
    """Map a GPS trajectory to its sequence of distinct consecutive tile ids."""
    pts = traj.points
    inside = grid.inside(pts)
    if not inside.all():
        i = int(np.flatnonzero(~inside)[0])
        raise DomainError(f"trajectory {traj.id}: point {i} {tuple(pts[i])} outside grid bbox {grid.bbox}")
    return GridTrajectory(traj.id, collapse_repeats(grid.cell_ids(pts)))


@dataclass
class CellVocab:
    """Dense [0, M) indexing of raw cell ids; index M is the UNK slot."""

    cell_ids: np.ndarray
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        ids = np.unique(np.asarray(self.cell_ids, dtype=np.int64))
        self.cell_ids = ids
        self._index = {int(c): i for i, c in enumerate(ids)}

    @classmethod
    def build(cls, grid_trajs: Iterable[GridTrajectory], grid: Optional[GridSpec] = None) -> "CellVocab":
        parts = [g.cells for g in grid_trajs]
        if grid is not None:
            parts.append(grid.bbox_cell_ids())
        ids = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
        return cls(ids)

    @property
    def size(self) -> int:
        return len(self.cell_ids)

    @property
    def unk(self) -> int:
        return len(self.cell_ids)

    def encode(self, cells: Sequence[int]) -> np.ndarray:
        unk = self.unk
        return np.array([self._index.get(int(c), unk) for c in cells], dtype=np.int64)

    def __contains__(self, cell) -> bool:
        return int(cell) in self._index
