import numpy as np
import pytest

from trajsim.geo import DomainError, mercator_project
from trajsim.preprocess import CleanConfig, clean_dataset
from trajsim.synthetic import SyntheticConfig, cluster_routes, generate_synthetic


def _bytes(trajs):
    return b"".join(np.int64(t.id).tobytes() + t.points.tobytes() for t in trajs)


def test_same_seed_identical():
    cfg = SyntheticConfig(count=30)
    assert _bytes(generate_synthetic(cfg, 4)) == _bytes(generate_synthetic(cfg, 4))
    assert _bytes(generate_synthetic(cfg, 4)) != _bytes(generate_synthetic(cfg, 5))


def test_zero_count_empty():
    assert generate_synthetic(SyntheticConfig(count=0), 0) == []


def test_empty_bbox_error():
    with pytest.raises(DomainError):
        generate_synthetic(SyntheticConfig(bbox=(-8.6, 41.1, -8.6, 41.2)), 0)


def test_four_clusters_stay_in_quadrants():
    cfg = SyntheticConfig(count=100, n_clusters=4)
    lo = mercator_project(np.array(cfg.bbox[:2]))
    hi = mercator_project(np.array(cfg.bbox[2:]))
    mid = (lo + hi) / 2
    quadrants = set()
    for c, route in enumerate(cluster_routes(cfg, 0)):
        col, row = c % 2, c // 2
        qlo = np.where([col, row], mid, lo)
        qhi = np.where([col, row], hi, mid)
        centroid = route.mean(axis=0)
        assert np.all(centroid >= qlo) and np.all(centroid <= qhi)
        assert np.all(route >= qlo) and np.all(route <= qhi)
        quadrants.add((col, row))
    assert len(quadrants) == 4


def test_output_inside_bbox_and_lengths():
    cfg = SyntheticConfig(count=50)
    trajs = generate_synthetic(cfg, 1)
    assert len(trajs) == 50
    pts = np.concatenate([t.points for t in trajs])
    lon0, lat0, lon1, lat1 = cfg.bbox
    assert np.all((pts[:, 0] >= lon0) & (pts[:, 0] <= lon1) & (pts[:, 1] >= lat0) & (pts[:, 1] <= lat1))
    assert all(cfg.min_len <= len(t) <= cfg.max_len for t in trajs)


def test_survives_cleaning():
    kept, rejected = clean_dataset(generate_synthetic(SyntheticConfig(count=100), 0), CleanConfig())
    assert len(kept) >= 95
