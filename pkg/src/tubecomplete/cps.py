"""Core point selection: density-aware downsampling with endpoint retention.

The selector splits the input into dense and sparse regions, gives the sparse
region a boosted share of the budget, force-includes endpoints and isolated
points of each region, and fills the rest with farthest point sampling that
never crosses region boundaries.  The resulting core cloud seeds the
completion network; the same dense/sparse split feeds the local loss term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import (
    DensityPartition,
    PointCloud,
    build_radius_graph,
    default_graph_radius,
    density_partition,
    farthest_point_sampling,
    graph_endpoints,
    nearest_indices,
)

DENSE = "dense"
SPARSE = "sparse"


@dataclass(frozen=True)
class CpsConfig:
    n0_fraction: float = 0.25
    k_density: int = 8
    sparse_boost: float = 2.0
    endpoint_radius: float | None = None  # None: 2x median spacing per region

    def __post_init__(self):
        if not 0.0 < self.n0_fraction <= 1.0:
            raise ConfigError(f"n0_fraction must be in (0, 1], got {self.n0_fraction}")
        if self.sparse_boost < 1.0:
            raise ConfigError(f"sparse_boost must be >= 1, got {self.sparse_boost}")
        if self.k_density < 1:
            raise ConfigError("k_density must be >= 1")


@dataclass(frozen=True)
class CoreSelection:
    """n0 selected indices, their region tags, and the force-included subset."""

    indices: np.ndarray
    region_of: tuple
    forced: np.ndarray
    partition: DensityPartition

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.intp)
        if len(np.unique(idx)) != len(idx):
            raise ConfigError("core selection indices must be distinct")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "forced", np.asarray(self.forced, dtype=np.intp))


def select_core_points(cloud: PointCloud, n0: int, cfg: CpsConfig = CpsConfig()) -> CoreSelection:
    """Pick n0 core points: boosted sparse quota, forced endpoints, region FPS."""
    n = len(cloud)
    if not 1 <= n0 <= n:
        raise ConfigError(f"n0={n0} out of range for cloud of {n} points")
    part = density_partition(cloud, k=cfg.k_density)
    n_sparse = len(part.sparse_indices)
    n_dense = len(part.dense_indices)

    sparse_quota = min(n_sparse, int(round(n0 * n_sparse / n * cfg.sparse_boost)))
    # clamp the dense remainder into range; any surplus moves back across
    dense_quota = min(max(n0 - sparse_quota, 0), n_dense)
    sparse_quota = n0 - dense_quota

    picks, tags, forced_all = [], [], []
    for region_idx, quota, tag in (
        (part.dense_indices, dense_quota, DENSE),
        (part.sparse_indices, sparse_quota, SPARSE),
    ):
        if quota == 0 or len(region_idx) == 0:
            continue
        local, forced_local = _select_in_region(cloud.points[region_idx], quota, cfg)
        picks.extend(int(region_idx[i]) for i in local)
        tags.extend([tag] * len(local))
        forced_all.extend(int(region_idx[i]) for i in forced_local)

    return CoreSelection(
        np.asarray(picks, dtype=np.intp), tuple(tags),
        np.asarray(sorted(forced_all), dtype=np.intp), part,
    )


def _select_in_region(points: np.ndarray, quota: int, cfg: CpsConfig):
    """quota picks inside one region: forced endpoints first, then seeded FPS."""
    npts = len(points)
    if quota >= npts:
        return np.arange(npts, dtype=np.intp), _region_endpoints(points, cfg)
    forced = _region_endpoints(points, cfg)
    if len(forced) > quota:
        # too many mandatory picks: keep a farthest-first subset of them
        keep = farthest_point_sampling(points[forced], quota, start=0)
        forced = forced[np.sort(keep)]
        return forced, forced
    local = farthest_point_sampling(points, quota, preselected=forced)
    return local, forced


def _region_endpoints(points: np.ndarray, cfg: CpsConfig) -> np.ndarray:
    if len(points) == 1:
        return np.array([0], dtype=np.intp)
    radius = cfg.endpoint_radius
    if radius is None:
        radius = default_graph_radius(points)
    if radius <= 0.0:  # all points coincident
        return np.array([0], dtype=np.intp)
    graph = build_radius_graph(points, radius)
    return graph_endpoints(graph)


def split_by_reference(cloud: PointCloud, reference: PointCloud,
                       partition: DensityPartition):
    """Split `cloud` by the region of each point's nearest reference point.

    Returns (dense subset, sparse subset) in original point order.
    """
    sparse_mask = sparse_region_mask(cloud.points, reference.points, partition)
    dense = cloud.subset(np.flatnonzero(~sparse_mask))
    sparse = cloud.subset(np.flatnonzero(sparse_mask))
    return dense, sparse


def sparse_region_mask(points: np.ndarray, reference_points: np.ndarray,
                       partition: DensityPartition) -> np.ndarray:
    """Boolean mask: True where the nearest reference point is sparse-region."""
    if len(reference_points) == 0:
        raise ConfigError("reference cloud must be non-empty")
    is_sparse = np.zeros(len(reference_points), dtype=bool)
    is_sparse[partition.sparse_indices] = True
    nearest, _ = nearest_indices(np.asarray(points, dtype=np.float64),
                                 reference_points)
    return is_sparse[nearest]
