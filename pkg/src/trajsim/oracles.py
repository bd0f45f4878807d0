"""Heuristic trajectory distances (DTW, DFD, EDwP) and ground-truth matrices.

Points are planar coordinates (Web-Mercator meters). Kernels are numba-compiled,
release the GIL and accumulate in float64.
"""
from __future__ import annotations

import enum
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .geo import DomainError


class Measure(enum.IntEnum):
    DTW = 1
    DFD = 2
    EDWP = 3

    @classmethod
    def parse(cls, value) -> "Measure":
        if isinstance(value, Measure):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise DomainError(f"unknown measure {value!r}; expected one of DTW, DFD, EDWP") from None


@numba.njit(cache=True, nogil=True)
def _dist(ax, ay, bx, by):
    dx = ax - bx
    dy = ay - by
    return math.sqrt(dx * dx + dy * dy)


@numba.njit(cache=True, nogil=True)
def _dtw_kernel(a, b):
    n, m = a.shape[0], b.shape[0]
    prev = np.full(m, np.inf)
    cur = np.full(m, np.inf)
    for i in range(n):
        for j in range(m):
            d = _dist(a[i, 0], a[i, 1], b[j, 0], b[j, 1])
            if i == 0 and j == 0:
                cur[j] = d
            else:
                left = cur[j - 1] if j > 0 else np.inf
                diag = prev[j - 1] if j > 0 else np.inf
                cur[j] = d + min(prev[j], left, diag)
        prev, cur = cur, prev
    return prev[m - 1]


@numba.njit(cache=True, nogil=True)
def _dfd_kernel(a, b):
    n, m = a.shape[0], b.shape[0]
    prev = np.full(m, np.inf)
    cur = np.full(m, np.inf)
    for i in range(n):
        for j in range(m):
            d = _dist(a[i, 0], a[i, 1], b[j, 0], b[j, 1])
            if i == 0 and j == 0:
                cur[j] = d
            else:
                left = cur[j - 1] if j > 0 else np.inf
                diag = prev[j - 1] if j > 0 else np.inf
                cur[j] = max(d, min(prev[j], left, diag))
        prev, cur = cur, prev
    return prev[m - 1]


@numba.njit(cache=True, nogil=True)
def _project(px, py, sx, sy, ex, ey):
    """Orthogonal projection of p onto segment s-e, clamped to the segment."""
    vx = ex - sx
    vy = ey - sy
    l2 = vx * vx + vy * vy
    if l2 == 0.0:
        return sx, sy
    t = ((px - sx) * vx + (py - sy) * vy) / l2
    if t <= 0.0:
        return sx, sy
    if t >= 1.0:
        return ex, ey
    return sx + t * vx, sy + t * vy


@numba.njit(cache=True, nogil=True)
def _edit_cost(s1x, s1y, e1x, e1y, s2x, s2y, e2x, e2y):
    """Replacement cost of segment (s1, e1) by (s2, e2): Rep * Coverage."""
    rep = _dist(s1x, s1y, s2x, s2y) + _dist(e1x, e1y, e2x, e2y)
    cov = _dist(s1x, s1y, e1x, e1y) + _dist(s2x, s2y, e2x, e2y)
    return rep * cov


@numba.njit(cache=True, nogil=True)
def _edwp_kernel(a, b):
    """Exact EDwP by forward DP over (i, j, modified head).

    A state is (i, j): the remaining suffixes start at a[i] and b[j], except that
    at most one side's head point may have been moved along its first segment by
    earlier insertions. A run of insertions on ``a`` that started at column j0
    fixes a's head, so states are (i, j), (i, j, a-run j0) and (i, j, b-run i0).
    Every transition goes to row i or i + 1, so two rows are kept.
    """
    n, m = a.shape[0], b.shape[0]
    inf = np.inf
    g0 = np.full((2, m), inf)
    ga = np.full((2, m, m), inf)
    hax = np.zeros((2, m, m))
    hay = np.zeros((2, m, m))
    gb = np.full((2, m, n), inf)
    hbx = np.zeros((2, m, n))
    hby = np.zeros((2, m, n))
    g0[0, 0] = 0.0
    for i in range(n):
        cur = i % 2
        nxt = 1 - cur
        for j in range(m):
            for kind in range(3):
                top = 1 if kind == 0 else (j if kind == 1 else i)
                for r in range(top):
                    if kind == 0:
                        g = g0[cur, j]
                        pax, pay = a[i, 0], a[i, 1]
                        pbx, pby = b[j, 0], b[j, 1]
                    elif kind == 1:
                        g = ga[cur, j, r]
                        pax, pay = hax[cur, j, r], hay[cur, j, r]
                        pbx, pby = b[j, 0], b[j, 1]
                    else:
                        g = gb[cur, j, r]
                        pax, pay = a[i, 0], a[i, 1]
                        pbx, pby = hbx[cur, j, r], hby[cur, j, r]
                    if g == inf or i == n - 1 or j == m - 1:
                        continue
                    nax, nay = a[i + 1, 0], a[i + 1, 1]
                    nbx, nby = b[j + 1, 0], b[j + 1, 1]
                    # replace both head segments
                    c = g + _edit_cost(pax, pay, nax, nay, pbx, pby, nbx, nby)
                    if c < g0[nxt, j + 1]:
                        g0[nxt, j + 1] = c
                    # insert on a: split a's head segment at the projection of b[j+1]
                    qx, qy = _project(nbx, nby, pax, pay, nax, nay)
                    c = g + _edit_cost(pax, pay, qx, qy, pbx, pby, nbx, nby)
                    j0 = r if kind == 1 else j
                    if c < ga[cur, j + 1, j0]:
                        ga[cur, j + 1, j0] = c
                        hax[cur, j + 1, j0] = qx
                        hay[cur, j + 1, j0] = qy
                    # insert on b: split b's head segment at the projection of a[i+1]
                    qx, qy = _project(nax, nay, pbx, pby, nbx, nby)
                    c = g + _edit_cost(pax, pay, nax, nay, pbx, pby, qx, qy)
                    i0 = r if kind == 2 else i
                    if c < gb[nxt, j, i0]:
                        gb[nxt, j, i0] = c
                        hbx[nxt, j, i0] = qx
                        hby[nxt, j, i0] = qy
        if i == n - 1:
            return g0[cur, m - 1]
        g0[cur, :] = inf
        ga[cur, :, :] = inf
        gb[cur, :, :] = inf
    return inf


def _as_points(x, name: str, min_len: int) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DomainError(f"{name}: expected (n, 2) points, got shape {arr.shape}")
    if len(arr) < min_len:
        raise DomainError(f"{name}: needs at least {min_len} point(s), got {len(arr)}")
    return arr


def dtw(a, b) -> float:
    """Dynamic time warping: minimum summed point distance over monotone warping paths."""
    return float(_dtw_kernel(_as_points(a, "a", 1), _as_points(b, "b", 1)))


def dfd(a, b) -> float:
    """Discrete Fréchet distance."""
    return float(_dfd_kernel(_as_points(a, "a", 1), _as_points(b, "b", 1)))


def edwp(a, b) -> float:
    """Edit distance with projections, unnormalized (sum of Rep * Coverage).

    O(n m (n + m)) time, O(m (n + m)) memory.
    """
    return float(_edwp_kernel(_as_points(a, "a", 2), _as_points(b, "b", 2)))


_KERNELS = {Measure.DTW: _dtw_kernel, Measure.DFD: _dfd_kernel, Measure.EDWP: _edwp_kernel}
_MIN_LEN = {Measure.DTW: 1, Measure.DFD: 1, Measure.EDWP: 2}


def distance(a, b, measure) -> float:
    measure = Measure.parse(measure)
    return float(_KERNELS[measure](_as_points(a, "a", _MIN_LEN[measure]), _as_points(b, "b", _MIN_LEN[measure])))


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        threads = int(os.environ.get("TRAJSIM_THREADS", "0") or 0)
    if threads <= 0:
        threads = os.cpu_count() or 1
    return threads


@dataclass(frozen=True)
class DistanceMatrix:
    measure: Measure
    values: np.ndarray  # (n, n) float64

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise DomainError(f"distance matrix must be square, got {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise DomainError("distance matrix entries must be finite and non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "measure", Measure.parse(self.measure))

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _run_rows(rows, worker, threads):
    if threads == 1 or len(rows) <= 1:
        for r in rows:
            worker(r)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for fut in [pool.submit(worker, r) for r in rows]:
            fut.result()


def pairwise_matrix(trajs: Sequence, measure, threads: int | None = None) -> DistanceMatrix:
    """Full symmetric matrix; only i < j is computed and mirrored.

    Rows are independent tasks writing disjoint entries, so the result is the
    same for every thread count.
    """
    measure = Measure.parse(measure)
    pts = [_as_points(t, f"trajectory {k}", _MIN_LEN[measure]) for k, t in enumerate(trajs)]
    n = len(pts)
    if n == 0:
        raise DomainError("pairwise_matrix needs at least one trajectory")
    kernel = _KERNELS[measure]
    out = np.zeros((n, n), dtype=np.float64)

    def row(i):
        for j in range(i + 1, n):
            try:
                out[i, j] = kernel(pts[i], pts[j])
            except Exception as exc:  # pragma: no cover - kernels only fail on bad input
                raise DomainError(f"pair ({i}, {j}): {exc}") from exc

    _run_rows(range(n), row, resolve_threads(threads))
    iu = np.triu_indices(n, 1)
    out[(iu[1], iu[0])] = out[iu]
    return DistanceMatrix(measure, out)


def cross_matrix(queries: Sequence, candidates: Sequence, measure, threads: int | None = None) -> np.ndarray:
    """Rectangular (len(queries), len(candidates)) distances."""
    measure = Measure.parse(measure)
    q = [_as_points(t, f"query {k}", _MIN_LEN[measure]) for k, t in enumerate(queries)]
    c = [_as_points(t, f"candidate {k}", _MIN_LEN[measure]) for k, t in enumerate(candidates)]
    kernel = _KERNELS[measure]
    out = np.zeros((len(q), len(c)), dtype=np.float64)

    def row(i):
        for j in range(len(c)):
            out[i, j] = kernel(q[i], c[j])

    _run_rows(range(len(q)), row, resolve_threads(threads))
    return out


@dataclass(frozen=True)
class RankLists:
    """Per query: candidate indices by ascending distance (self excluded)."""

    indices: np.ndarray  # (n_queries, K) int64
    n_candidates: int

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def __len__(self):
        return self.indices.shape[0]


def rank_rows(values: np.ndarray, k_max: int, exclude=None, descending: bool = False) -> RankLists:
    """Top-``k_max`` of each row, ties broken by ascending column index.

    ``exclude[i]`` is a column to drop from row ``i`` (``-1`` for none).
    """
    v = np.asarray(values, dtype=np.float64)
    nq, nc = v.shape
    if k_max <= 0:
        raise DomainError(f"K_max must be positive, got {k_max}")
    avail = nc - (0 if exclude is None else 1)
    if k_max > avail:
        raise DomainError(f"K_max={k_max} exceeds {avail} available candidates")
    key = -v if descending else v.copy()
    if exclude is not None:
        ex = np.asarray(exclude, dtype=np.int64)
        rows = np.flatnonzero(ex >= 0)
        key = key.copy()
        key[rows, ex[rows]] = np.inf
    # stable sort keeps ascending index among equal keys
    order = np.argsort(key, axis=1, kind="stable")[:, :k_max]
    return RankLists(order.astype(np.int64), nc)


def ground_truth_topk(D: DistanceMatrix, k_max: int) -> RankLists:
    if k_max <= 0:
        raise DomainError("K_max must be positive")
    if k_max > D.n - 1:
        raise DomainError(f"K_max={k_max} exceeds n-1={D.n - 1}")
    return rank_rows(D.values, k_max, exclude=np.arange(D.n))
