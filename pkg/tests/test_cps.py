"""Core point selection: quotas, forced endpoints, region restriction."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tubecomplete.cps import (
    DENSE,
    SPARSE,
    CoreSelection,
    CpsConfig,
    select_core_points,
    sparse_region_mask,
    split_by_reference,
)
from tubecomplete.errors import ConfigError
from tubecomplete.geometry import PointCloud, density_partition


def fib_sphere(n, radius=1.0):
    k = np.arange(n, dtype=np.float64)
    phi = np.arccos(1.0 - 2.0 * (k + 0.5) / n)
    theta = np.pi * (1.0 + 5.0**0.5) * k
    return radius * np.stack(
        [np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)],
        axis=1,
    )


def sphere_plus_polyline():
    """Dense sphere far from a sparse open polyline with degree-1 extremes.

    End gaps are wider than the interior spacing so the 2x-median-spacing
    radius graph leaves exactly the two extreme points at degree 1.
    """
    gaps = [0.9] + [0.6] * 9 + [0.9]
    xs = 8.0 + np.concatenate([[0.0], np.cumsum(gaps)])
    line = np.stack([xs, np.zeros_like(xs), np.zeros_like(xs)], axis=1)
    pts = np.vstack([fib_sphere(300), line])
    return PointCloud(pts), np.arange(300, 300 + len(line))


def blob_plus_isolated(n_blob=50, n_pairs=4, rng=None):
    """Tight dense blob plus far-apart point pairs; every pair point has
    degree 1 in the sparse region's radius graph, so all count as endpoints."""
    rng = rng or np.random.default_rng(3)
    blob = rng.normal(size=(n_blob, 3)) * 0.05
    centers = np.arange(n_pairs)[:, None] * np.array([15.0, 0.0, 0.0]) + np.array([20.0, 0, 0])
    iso = np.repeat(centers, 2, axis=0)
    iso[0::2, 0] -= 0.15
    iso[1::2, 0] += 0.15
    return PointCloud(np.vstack([blob, iso])), np.arange(n_blob, n_blob + 2 * n_pairs)


def region_sets(cloud, cfg):
    part = density_partition(cloud, k=cfg.k_density)
    return part, set(part.dense_indices.tolist()), set(part.sparse_indices.tolist())


# ---------------------------------------------------------------------------
# CpsConfig / CoreSelection validation
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"n0_fraction": 0.0},
    {"n0_fraction": 1.5},
    {"sparse_boost": 0.5},
    {"k_density": 0},
])
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ConfigError):
        CpsConfig(**kwargs)


def test_selection_rejects_duplicate_indices():
    cloud = PointCloud(np.random.default_rng(0).normal(size=(10, 3)))
    part = density_partition(cloud, k=3)
    with pytest.raises(ConfigError):
        CoreSelection(np.array([0, 1, 1]), (DENSE,) * 3, np.array([]), part)


def test_n0_out_of_range():
    cloud = PointCloud(np.random.default_rng(0).normal(size=(20, 3)))
    with pytest.raises(ConfigError):
        select_core_points(cloud, 0)
    with pytest.raises(ConfigError):
        select_core_points(cloud, 21)


# ---------------------------------------------------------------------------
# Quotas
# ---------------------------------------------------------------------------

def quota_oracle(n, n_dense, n_sparse, n0, boost):
    sparse = min(n_sparse, int(round(n0 * n_sparse / n * boost)))
    dense = min(max(n0 - sparse, 0), n_dense)
    return dense, n0 - dense


@pytest.mark.parametrize("n0", [1, 5, 17, 30, 58])
@pytest.mark.parametrize("boost", [1.0, 2.0, 4.0])
def test_quota_split_matches_formula(n0, boost):
    cloud, _ = blob_plus_isolated()
    cfg = CpsConfig(sparse_boost=boost)
    part = density_partition(cloud, k=cfg.k_density)
    sel = select_core_points(cloud, n0, cfg)
    want_dense, want_sparse = quota_oracle(
        len(cloud), len(part.dense_indices), len(part.sparse_indices), n0, boost)
    got = {DENSE: 0, SPARSE: 0}
    for tag in sel.region_of:
        got[tag] += 1
    assert got[DENSE] == want_dense
    assert got[SPARSE] == want_sparse


def test_quota_conservation_exact():
    cloud, _ = sphere_plus_polyline()
    for n0 in (1, 7, 40, 150, len(cloud)):
        sel = select_core_points(cloud, n0)
        assert len(sel.indices) == n0
        assert len(np.unique(sel.indices)) == n0
        assert len(sel.region_of) == n0


def test_full_budget_selects_everything():
    cloud, _ = blob_plus_isolated()
    sel = select_core_points(cloud, len(cloud))
    assert np.array_equal(np.sort(sel.indices), np.arange(len(cloud)))


# ---------------------------------------------------------------------------
# Region restriction and endpoint priority
# ---------------------------------------------------------------------------

def test_region_tags_match_partition():
    cloud, _ = sphere_plus_polyline()
    cfg = CpsConfig()
    part, dense_set, sparse_set = region_sets(cloud, cfg)
    sel = select_core_points(cloud, 60, cfg)
    for idx, tag in zip(sel.indices, sel.region_of):
        assert (int(idx) in sparse_set) == (tag == SPARSE)
        assert (int(idx) in dense_set) == (tag == DENSE)


def test_polyline_extremes_forced():
    cloud, line_idx = sphere_plus_polyline()
    sel = select_core_points(cloud, 40, CpsConfig(sparse_boost=2.0))
    forced = set(sel.forced.tolist())
    picked = set(sel.indices.tolist())
    first, last = int(line_idx[0]), int(line_idx[-1])
    assert first in forced and last in forced
    assert first in picked and last in picked


def test_forced_subset_of_indices():
    cloud, _ = blob_plus_isolated()
    for n0 in (6, 12, 30):
        sel = select_core_points(cloud, n0, CpsConfig(sparse_boost=2.0))
        assert set(sel.forced.tolist()) <= set(sel.indices.tolist())


def test_isolated_points_forced_when_quota_permits():
    cloud, iso_idx = blob_plus_isolated()
    # boost 4 gives the 8 isolated points a quota of 8: all must appear
    sel = select_core_points(cloud, 15, CpsConfig(sparse_boost=4.0))
    picked = set(sel.indices.tolist())
    part = density_partition(cloud, k=8)
    assert set(iso_idx.tolist()) <= set(part.sparse_indices.tolist())
    assert set(iso_idx.tolist()) <= picked
    assert set(iso_idx.tolist()) <= set(sel.forced.tolist())


def test_forced_overflow_truncated_farthest_first():
    # 3 isolated collinear points, quota 2: keep a farthest-first subset
    rng = np.random.default_rng(5)
    blob = rng.normal(size=(30, 3)) * 0.005
    line = np.array([[10.0, 0, 0], [11.0, 0, 0], [12.0, 0, 0]])
    cloud = PointCloud(np.vstack([blob, line]))
    cfg = CpsConfig(k_density=2, endpoint_radius=0.5, sparse_boost=1.0)
    part = density_partition(cloud, k=2)
    assert np.array_equal(np.sort(part.sparse_indices), np.array([30, 31, 32]))
    sel = select_core_points(cloud, 22, cfg)
    sparse_picks = sorted(int(i) for i, t in zip(sel.indices, sel.region_of)
                          if t == SPARSE)
    assert sparse_picks == [30, 32]  # start plus the farthest survivor
    assert sorted(set(sel.forced.tolist()) & {30, 31, 32}) == [30, 32]


def test_coincident_cloud_degenerates_to_first_indices():
    cloud = PointCloud(np.tile([[1.0, 2.0, 3.0]], (12, 1)))
    sel = select_core_points(cloud, 5, CpsConfig(k_density=3))
    assert np.array_equal(np.sort(sel.indices), np.arange(5))
    assert sel.region_of == (DENSE,) * 5
    assert np.array_equal(sel.forced, np.array([0]))


def test_selection_deterministic():
    cloud, _ = sphere_plus_polyline()
    a = select_core_points(cloud, 50)
    b = select_core_points(cloud, 50)
    assert np.array_equal(a.indices, b.indices)
    assert np.array_equal(a.forced, b.forced)
    assert a.region_of == b.region_of


@settings(deadline=None, max_examples=40)
@given(
    pts=st.lists(
        st.tuples(*[st.floats(-20, 20, allow_nan=False, allow_infinity=False)] * 3),
        min_size=6, max_size=40),
    frac=st.floats(0.1, 1.0),
    boost=st.floats(1.0, 5.0),
)
def test_selection_invariants_random(pts, frac, boost):
    cloud = PointCloud(np.asarray(pts, dtype=np.float64))
    n0 = max(1, int(round(frac * len(cloud))))
    cfg = CpsConfig(k_density=3, sparse_boost=boost)
    sel = select_core_points(cloud, n0, cfg)
    assert len(sel.indices) == n0
    assert len(np.unique(sel.indices)) == n0
    assert set(sel.forced.tolist()) <= set(sel.indices.tolist())
    part = density_partition(cloud, k=3)
    sparse_set = set(part.sparse_indices.tolist())
    for idx, tag in zip(sel.indices, sel.region_of):
        assert (int(idx) in sparse_set) == (tag == SPARSE)


# ---------------------------------------------------------------------------
# split_by_reference / sparse_region_mask
# ---------------------------------------------------------------------------

def test_split_identity_matches_partition():
    cloud, _ = blob_plus_isolated()
    part = density_partition(cloud, k=8)
    dense, sparse = split_by_reference(cloud, cloud, part)
    assert np.array_equal(dense.points, cloud.points[part.dense_indices])
    assert np.array_equal(sparse.points, cloud.points[part.sparse_indices])


def test_split_all_near_sparse_reference():
    ref, iso_idx = blob_plus_isolated()
    part = density_partition(ref, k=8)
    probe = PointCloud(ref.points[iso_idx] + 0.01)
    dense, sparse = split_by_reference(probe, ref, part)
    assert len(dense) == 0
    assert len(sparse) == len(probe)


def test_split_preserves_order_and_labels():
    ref, _ = blob_plus_isolated()
    part = density_partition(ref, k=8)
    rng = np.random.default_rng(9)
    pts = rng.normal(size=(25, 3)) * 8.0
    labels = (rng.random(25) < 0.5).astype(np.uint8)
    dense, sparse = split_by_reference(PointCloud(pts, labels), ref, part)
    mask = sparse_region_mask(pts, ref.points, part)
    assert np.array_equal(dense.points, pts[~mask])
    assert np.array_equal(sparse.points, pts[mask])
    assert np.array_equal(dense.labels, labels[~mask])
    assert np.array_equal(sparse.labels, labels[mask])


def test_mask_matches_bruteforce_nearest_oracle():
    rng = np.random.default_rng(11)
    ref = PointCloud(np.vstack([rng.normal(size=(40, 3)) * 0.1,
                                rng.normal(size=(10, 3)) * 6.0 + 10.0]))
    part = density_partition(ref, k=8)
    is_sparse = np.zeros(len(ref), dtype=bool)
    is_sparse[part.sparse_indices] = True
    pts = rng.normal(size=(30, 3)) * 6.0
    want = np.empty(30, dtype=bool)
    for i, p in enumerate(pts):
        d = np.abs(ref.points - p).__pow__(2).sum(axis=1)
        want[i] = is_sparse[int(np.argmin(d))]
    got = sparse_region_mask(pts, ref.points, part)
    assert np.array_equal(got, want)


def test_mask_empty_reference_rejected():
    cloud, _ = blob_plus_isolated()
    part = density_partition(cloud, k=8)
    with pytest.raises(ConfigError):
        sparse_region_mask(cloud.points, np.empty((0, 3)), part)
