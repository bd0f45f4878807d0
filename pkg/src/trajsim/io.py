"""Persistence: trajectory CSV, little-endian binary artifacts, metrics reports, GeoJSON."""
from __future__ import annotations

import csv
import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .geo import DomainError
from .oracles import DistanceMatrix, Measure
from .preprocess import GpsTrajectory

CSV_HEADER = ["traj_id", "point_idx", "lon", "lat"]

MAGIC_TDM = b"TDM1"
MAGIC_TEMB = b"TEMB"
MAGIC_TCKP = b"TCKP"
MAGIC_TVIS = b"TVIS"


class FormatError(DomainError):
    pass


# --- trajectory CSV --------------------------------------------------------

def load_trajectories(path) -> List[GpsTrajectory]:
    """Trajectories grouped by ``traj_id`` in order of first appearance."""
    groups: "OrderedDict[int, list]" = OrderedDict()
    last_idx: Dict[int, int] = {}
    first_line: Dict[int, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: empty file, expected header {','.join(CSV_HEADER)}")
        if [h.strip() for h in header] != CSV_HEADER:
            raise FormatError(f"{path}:1: bad header {header!r}, expected {','.join(CSV_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(f"{path}:{line}: expected 4 fields, got {len(row)}")
            try:
                tid, pidx = int(row[0]), int(row[1])
                lon, lat = float(row[2]), float(row[3])
            except ValueError as exc:
                raise FormatError(f"{path}:{line}: cannot parse row {row!r}: {exc}") from None
            if tid in last_idx and pidx <= last_idx[tid]:
                raise FormatError(f"{path}:{line}: point_idx {pidx} of trajectory {tid} "
                                  f"not greater than previous {last_idx[tid]}")
            last_idx[tid] = pidx
            first_line.setdefault(tid, line)
            groups.setdefault(tid, []).append((lon, lat))
    out = []
    for tid, pts in groups.items():
        try:
            out.append(GpsTrajectory(tid, np.array(pts, dtype=np.float64)))
        except DomainError as exc:
            raise FormatError(f"{path}:{first_line[tid]}: {exc}") from None
    return out


def save_trajectories(path, trajs: Sequence[GpsTrajectory]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for t in trajs:
            for k, (lon, lat) in enumerate(t.points):
                w.writerow([t.id, k, repr(float(lon)), repr(float(lat))])


# --- binary helpers ----------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated file (need {self.pos + n} bytes, have {len(self.data)})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.path}: {len(self.data) - self.pos} trailing bytes")


def _open(path, magic: bytes) -> _Reader:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    got = r.take(len(magic)) if len(data) >= len(magic) else data
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    return r


def _write(path, chunks: Sequence[bytes]) -> None:
    Path(path).write_bytes(b"".join(chunks))


# --- TDM1 distance matrix ----------------------------------------------------

def save_distance_matrix(path, D: DistanceMatrix) -> None:
    v = np.asarray(D.values)
    _write(path, [MAGIC_TDM, struct.pack("<BI", int(D.measure), v.shape[0]), v.astype("<f4").tobytes()])


def load_distance_matrix(path) -> DistanceMatrix:
    r = _open(path, MAGIC_TDM)
    mid, n = r.unpack("<BI")
    try:
        measure = Measure(mid)
    except ValueError:
        raise FormatError(f"{path}: unknown measure id {mid}") from None
    v = r.f32(n * n).reshape(n, n)
    r.done()
    if not np.all(np.isfinite(v)):
        raise FormatError(f"{path}: non-finite distances")
    if np.any(np.diag(v) != 0):
        raise FormatError(f"{path}: non-zero diagonal")
    if n and np.max(np.abs(v - v.T)) > 1e-6:
        raise FormatError(f"{path}: matrix is not symmetric")
    return DistanceMatrix(measure, v.astype(np.float64))


# --- TEMB embeddings ---------------------------------------------------------

def save_embeddings(path, ids: Sequence[int], matrix: np.ndarray) -> None:
    m = np.asarray(matrix)
    ids = np.asarray(ids, dtype=np.int64)
    if m.ndim != 2 or len(ids) != m.shape[0]:
        raise DomainError(f"{len(ids)} ids for embedding matrix of shape {m.shape}")
    if np.any(ids < 0):
        raise DomainError("trajectory ids must be non-negative")
    _write(path, [MAGIC_TEMB, struct.pack("<II", *m.shape), m.astype("<f4").tobytes(), ids.astype("<u8").tobytes()])


def load_embeddings(path, expected_dim: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Returns ``(ids, matrix)``."""
    r = _open(path, MAGIC_TEMB)
    n, d = r.unpack("<II")
    if expected_dim is not None and d != expected_dim:
        raise FormatError(f"{path}: embedding dimension {d}, expected {expected_dim}")
    m = r.f32(n * d).reshape(n, d)
    ids = np.frombuffer(r.take(8 * n), dtype="<u8").astype(np.int64)
    r.done()
    return ids, m


# --- TVIS per-cell feature table ---------------------------------------------

def save_cell_table(path, cell_ids: Sequence[int], vectors: np.ndarray) -> None:
    v = np.asarray(vectors)
    ids = np.asarray(cell_ids, dtype=np.int64)
    if v.ndim != 2 or len(ids) != v.shape[0]:
        raise DomainError(f"{len(ids)} cell ids for table of shape {v.shape}")
    if len(np.unique(ids)) != len(ids):
        raise DomainError("duplicate cell ids")
    rec = np.zeros(len(ids), dtype=[("cell", "<u8"), ("vec", "<f4", (v.shape[1],))])
    rec["cell"] = ids
    rec["vec"] = v
    _write(path, [MAGIC_TVIS, struct.pack("<II", *v.shape), rec.tobytes()])


def load_cell_table(path, expected_dim: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Returns ``(cell_ids, vectors)`` in file order."""
    r = _open(path, MAGIC_TVIS)
    count, d = r.unpack("<II")
    if expected_dim is not None and d != expected_dim:
        raise FormatError(f"{path}: feature dimension {d}, expected {expected_dim}")
    dt = np.dtype([("cell", "<u8"), ("vec", "<f4", (d,))])
    rec = np.frombuffer(r.take(dt.itemsize * count), dtype=dt)
    r.done()
    ids = rec["cell"].astype(np.int64)
    uniq, counts = np.unique(ids, return_counts=True)
    if np.any(counts > 1):
        raise FormatError(f"{path}: duplicate cell id {int(uniq[counts > 1][0])}")
    return ids, np.array(rec["vec"], dtype=np.float32).reshape(count, d)


def load_visual_table(path, vocab, d: int):
    """Visual EmbeddingTable in vocabulary order; cells absent from the file keep the zero UNK row."""
    from .region import table_from_cells
    ids, vec = load_cell_table(path, expected_dim=d)
    return table_from_cells(vocab, ids, vec, d, "visual")


# --- TCKP checkpoints --------------------------------------------------------

def save_checkpoint(path, params: Mapping[str, "np.ndarray"], configs: Mapping) -> None:
    """Config echo (JSON) followed by one ``(name, shape, f32 payload)`` record per tensor."""
    echo = json.dumps(configs, sort_keys=True).encode("utf-8")
    chunks = [MAGIC_TCKP, struct.pack("<I", len(echo)), echo, struct.pack("<I", len(params))]
    for name, t in params.items():
        a = np.asarray(t.detach().cpu().numpy() if hasattr(t, "detach") else t)
        nb = name.encode("utf-8")
        payload = a.astype("<f4").tobytes()
        chunks += [struct.pack("<H", len(nb)), nb, struct.pack("<B", a.ndim), struct.pack(f"<{a.ndim}I", *a.shape),
                   struct.pack("<Q", len(payload)), payload]
    _write(path, chunks)


def load_checkpoint(path, expected_names: Optional[Sequence[str]] = None,
                    expected_model_config: Optional[Mapping] = None) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    """Returns ``(configs, params)``; checks names and the model config echo when expectations are given."""
    r = _open(path, MAGIC_TCKP)
    (elen,) = r.unpack("<I")
    try:
        configs = json.loads(r.take(elen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable config echo: {exc}") from None
    (count,) = r.unpack("<I")
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (plen,) = r.unpack("<Q")
        size = int(np.prod(shape)) if ndim else 1
        if plen != 4 * size:
            raise FormatError(f"{path}: record {name!r} payload {plen} bytes does not match shape {shape}")
        params[name] = r.f32(size).reshape(shape)
    r.done()
    if expected_model_config is not None:
        echo = configs.get("model")
        want = json.loads(json.dumps(dict(expected_model_config)))
        if echo != want:
            diff = sorted(k for k in set(want) | set(echo or {}) if (echo or {}).get(k) != want.get(k))
            raise FormatError(f"{path}: model config echo differs from requested config in {diff}")
    if expected_names is not None:
        missing = sorted(set(expected_names) - set(params))
        extra = sorted(set(params) - set(expected_names))
        if missing or extra:
            raise FormatError(f"{path}: parameter mismatch; missing {missing}, extra {extra}")
    return configs, params


# --- metrics and GeoJSON -----------------------------------------------------

def write_metrics(path_txt, report, path_json=None) -> None:
    Path(path_txt).write_text(report.to_text(), encoding="utf-8")
    if path_json is not None:
        Path(path_json).write_text(report.to_json(), encoding="utf-8")


def read_metrics_text(path) -> Dict[str, float]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        key, sep, val = line.partition(" = ")
        if not sep:
            raise FormatError(f"{path}:{n}: expected 'key = value'")
        out[key] = float(val)
    return out


def _line(t: GpsTrajectory, props: dict) -> dict:
    return {"type": "Feature", "properties": props,
            "geometry": {"type": "LineString", "coordinates": [[float(lon), float(lat)] for lon, lat in t.points]}}


def geojson_collection(query: GpsTrajectory, results: Sequence[Tuple[GpsTrajectory, float]]) -> dict:
    feats = [_line(query, {"role": "query", "rank": 0, "distance": 0.0, "traj_id": int(query.id)})]
    for rank, (t, dist) in enumerate(results, 1):
        feats.append(_line(t, {"role": "result", "rank": rank, "distance": float(dist), "traj_id": int(t.id)}))
    return {"type": "FeatureCollection", "features": feats}


def export_geojson(query_id: int, retrieved: Sequence[Tuple[int, float]], trajs: Mapping[int, GpsTrajectory], path) -> dict:
    """Write the query and its ranked results as LineStrings (lon, lat order)."""
    for tid in [query_id] + [r for r, _ in retrieved]:
        if tid not in trajs:
            raise DomainError(f"unknown trajectory id {tid}")
    fc = geojson_collection(trajs[query_id], [(trajs[r], d) for r, d in retrieved])
    Path(path).write_text(json.dumps(fc, indent=1) + "\n", encoding="utf-8")
    return fc
