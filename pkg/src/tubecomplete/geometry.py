"""Point-cloud container and geometric primitives.

Everything downstream (dataset synthesis, core-point selection, the network,
losses and metrics) exchanges `PointCloud` values and builds on the queries
here: farthest point sampling, k-nearest neighbours, radius graphs, density
partitioning, endpoint detection and joint normalization.

All queries are exact.  At the cloud sizes this toolkit targets (a few
thousand points) chunked vectorized scans beat any spatial index, are
trivially deterministic, and match their brute-force oracles bit for bit.
Ties are always broken toward the lower point index.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError, FormatError

AORTA = 0
CORONARY = 1

_TPC_MAGIC = b"TPC1"


@dataclass(frozen=True)
class PointCloud:
    """Ordered list of 3D points with optional per-point component labels.

    points: (N, 3) float64, finite.
    labels: optional (N,) uint8, 0 = AORTA, 1 = CORONARY.
    """

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ConfigError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ConfigError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.uint8)
            if lab.shape != (len(pts),):
                raise ConfigError(
                    f"labels length {lab.shape} does not match {len(pts)} points"
                )
            object.__setattr__(self, "labels", lab)

    def __len__(self):
        return len(self.points)

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.intp)
        lab = self.labels[idx] if self.labels is not None else None
        return PointCloud(self.points[idx], lab)

    def with_label(self, label) -> "PointCloud":
        """Subcloud of points carrying `label`; requires labels."""
        if self.labels is None:
            raise ConfigError("cloud has no labels")
        return self.subset(np.flatnonzero(self.labels == label))

    def label_indices(self, label) -> np.ndarray:
        if self.labels is None:
            raise ConfigError("cloud has no labels")
        return np.flatnonzero(self.labels == label)


@dataclass(frozen=True)
class NeighborGraph:
    """Symmetric radius graph without self loops.

    adjacency[i] is the sorted array of neighbours of point i.
    """

    adjacency: list
    radius: float

    def degree(self, i) -> int:
        return len(self.adjacency[i])

    @property
    def n(self) -> int:
        return len(self.adjacency)


@dataclass(frozen=True)
class DensityPartition:
    """Disjoint dense/sparse index split of a cloud by mean-kNN distance."""

    dense_indices: np.ndarray
    sparse_indices: np.ndarray
    k: int
    threshold: float


@dataclass(frozen=True)
class NormalizationTransform:
    centroid: np.ndarray
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "centroid", np.asarray(self.centroid, dtype=np.float64))
        if not self.scale > 0:
            raise ConfigError("scale must be positive")


# ---------------------------------------------------------------------------
# nearest-neighbour machinery
# ---------------------------------------------------------------------------

def nearest_indices(query: np.ndarray, reference: np.ndarray, chunk: int = 512):
    """Index and distance of the nearest reference point for every query row.

    Exact scan, ties to the lowest reference index.  Returns (idx, dist).
    """
    query = np.asarray(query, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if len(reference) == 0:
        raise DataError("reference cloud is empty")
    nq = len(query)
    idx = np.empty(nq, dtype=np.intp)
    dist = np.empty(nq, dtype=np.float64)
    for lo in range(0, nq, chunk):
        hi = min(lo + chunk, nq)
        d2 = _sq_dists(query[lo:hi], reference)
        j = np.argmin(d2, axis=1)  # first minimum = lowest index
        idx[lo:hi] = j
        dist[lo:hi] = np.sqrt(np.maximum(d2[np.arange(hi - lo), j], 0.0))
    return idx, dist


def _sq_dists(a, b):
    # ||a-b||^2 by per-coordinate accumulation: identical rounding to the
    # naive sum over (a-b)**2 but without the (n, m, 3) temporary
    d2 = (a[:, 0, None] - b[None, :, 0]) ** 2
    d2 += (a[:, 1, None] - b[None, :, 1]) ** 2
    d2 += (a[:, 2, None] - b[None, :, 2]) ** 2
    return d2


def knn(cloud: PointCloud, query, k: int):
    """k nearest cloud points to a single query point.

    Returns a list of (index, distance) pairs sorted by ascending distance,
    distance ties broken by lower index.
    """
    pts = cloud.points
    if k > len(pts):
        raise ConfigError(f"k={k} exceeds cloud size {len(pts)}")
    if k < 1:
        raise ConfigError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    d = np.sqrt(np.sum((pts - q) ** 2, axis=1))
    order = np.lexsort((np.arange(len(pts)), d))[:k]
    return [(int(i), float(d[i])) for i in order]


def knn_indices(points: np.ndarray, queries: np.ndarray, k: int, chunk: int = 256):
    """(k,) nearest point indices per query row, ascending distance, ties low index.

    Batch form used by grouping layers; returns (nq, k) int array.
    """
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if k > len(points):
        raise ConfigError(f"k={k} exceeds cloud size {len(points)}")
    nq = len(queries)
    out = np.empty((nq, k), dtype=np.intp)
    col = np.arange(len(points))
    for lo in range(0, nq, chunk):
        hi = min(lo + chunk, nq)
        d2 = _sq_dists(queries[lo:hi], points)
        for r in range(hi - lo):
            order = np.lexsort((col, d2[r]))
            out[lo + r] = order[:k]
    return out


# ---------------------------------------------------------------------------
# sampling and partitioning
# ---------------------------------------------------------------------------

def farthest_point_sampling(cloud, n: int, start: int = 0, preselected=()):
    """Greedy maximin subset of size n, as point indices.

    Each pick maximizes the minimum distance to everything already selected;
    equal candidates resolve to the lowest index.  `preselected` indices are
    taken first (in the given order) and count toward n; `start` seeds the
    sequence only when nothing is preselected.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    npts = len(pts)
    if not 1 <= n <= npts:
        raise ConfigError(f"n={n} out of range for cloud of {npts} points")
    pre = list(dict.fromkeys(int(i) for i in preselected))
    for i in pre:
        if not 0 <= i < npts:
            raise ConfigError(f"preselected index {i} out of range")
    if len(pre) >= n:
        return np.asarray(pre[:n], dtype=np.intp)
    if not pre:
        if not 0 <= start < npts:
            raise ConfigError(f"start index {start} out of range")
        pre = [int(start)]
    picks = list(pre)
    mind = np.full(npts, np.inf)
    for i in picks:
        np.minimum(mind, np.sqrt(np.sum((pts - pts[i]) ** 2, axis=1)), out=mind)
        mind[i] = -np.inf  # already picked: never chosen again
    while len(picks) < n:
        j = int(np.argmax(mind))  # first max = lowest index on ties
        picks.append(j)
        np.minimum(mind, np.sqrt(np.sum((pts - pts[j]) ** 2, axis=1)), out=mind)
        mind[j] = -np.inf
    return np.asarray(picks, dtype=np.intp)


def density_partition(cloud: PointCloud, k: int = 8) -> DensityPartition:
    """Split a cloud into dense/sparse regions by mean k-nearest distance.

    Per-point score = mean distance to its k nearest neighbours (self
    excluded); points at or below the global mean score are dense.  A cloud
    of identical points is all dense.
    """
    npts = len(cloud)
    if npts <= k:
        raise ConfigError(f"cloud of {npts} points too small for k={k}")
    pts = cloud.points
    scores = np.empty(npts)
    chunk = 256
    for lo in range(0, npts, chunk):
        hi = min(lo + chunk, npts)
        d2 = _sq_dists(pts[lo:hi], pts)
        d2[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        part = np.partition(d2, k - 1, axis=1)[:, :k]
        scores[lo:hi] = np.sqrt(part).mean(axis=1)
    threshold = float(scores.mean())
    dense = np.flatnonzero(scores <= threshold)
    sparse = np.flatnonzero(scores > threshold)
    return DensityPartition(dense, sparse, k, threshold)


def median_nn_spacing(points) -> float:
    """Median nearest-neighbour distance; 0.0 for a single point."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, float)
    if len(pts) < 2:
        return 0.0
    tree = cKDTree(pts)
    d, _ = tree.query(pts, k=2)
    return float(np.median(d[:, 1]))


def default_graph_radius(points) -> float:
    """2x the median nearest-neighbour spacing (the radius-graph default)."""
    return 2.0 * median_nn_spacing(points)


# ---------------------------------------------------------------------------
# radius graphs, components, endpoints
# ---------------------------------------------------------------------------

def build_radius_graph(cloud, radius: float) -> NeighborGraph:
    """Symmetric graph connecting point pairs at distance <= radius."""
    if radius <= 0:
        raise ConfigError("radius must be positive")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    n = len(pts)
    adj = [[] for _ in range(n)]
    if n > 1:
        pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
        for i, j in pairs:
            adj[i].append(j)
            adj[j].append(i)
    adjacency = [np.array(sorted(a), dtype=np.intp) for a in adj]
    return NeighborGraph(adjacency, float(radius))


def radius_components(cloud, radius: float):
    """Connected components of the radius graph.

    Returns (labels, count): per-point component ids, dense from 1 in order
    of first appearance.
    """
    graph = build_radius_graph(cloud, radius)
    return graph_components(graph)


def graph_components(graph: NeighborGraph, alive=None):
    """Component labels over a NeighborGraph, optionally restricted to a mask.

    `alive` is a boolean mask; masked-out points get label 0.  Returns
    (labels, count), ids dense from 1 by first point index.
    """
    n = graph.n
    if alive is None:
        alive = np.ones(n, dtype=bool)
    labels = np.zeros(n, dtype=np.int64)
    count = 0
    for s in range(n):
        if not alive[s] or labels[s]:
            continue
        count += 1
        stack = [s]
        labels[s] = count
        while stack:
            u = stack.pop()
            for v in graph.adjacency[u]:
                if alive[v] and not labels[v]:
                    labels[v] = count
                    stack.append(v)
    return labels, count


def endpoints(cloud, radius: float) -> np.ndarray:
    """Indices whose radius-graph degree is <= 1 (endpoints and isolates)."""
    graph = build_radius_graph(cloud, radius)
    return graph_endpoints(graph)


def graph_endpoints(graph: NeighborGraph) -> np.ndarray:
    return np.array(
        [i for i in range(graph.n) if graph.degree(i) <= 1], dtype=np.intp
    )


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize(clouds):
    """Jointly center and scale clouds into [-1, 1]^3.

    The centroid of the union is subtracted, then all coordinates divide by
    the largest absolute coordinate after centering (1 if everything is
    coincident).  Returns (normalized clouds, NormalizationTransform).
    """
    single = isinstance(clouds, PointCloud)
    group = [clouds] if single else list(clouds)
    if not group or sum(len(c) for c in group) == 0:
        raise DataError("cannot normalize an empty union of clouds")
    allpts = np.concatenate([c.points for c in group], axis=0)
    centroid = allpts.mean(axis=0)
    scale = float(np.max(np.abs(allpts - centroid)))
    if scale == 0.0:
        scale = 1.0
    out = [
        PointCloud((c.points - centroid) / scale, c.labels) for c in group
    ]
    transform = NormalizationTransform(centroid, scale)
    return (out[0] if single else out), transform


def denormalize(cloud: PointCloud, transform: NormalizationTransform) -> PointCloud:
    return PointCloud(cloud.points * transform.scale + transform.centroid, cloud.labels)


# ---------------------------------------------------------------------------
# file formats: .tpc (binary) and .xyzl (text fallback)
# ---------------------------------------------------------------------------

def save_cloud(cloud: PointCloud, path):
    path = str(path)
    if path.endswith(".xyzl"):
        _save_xyzl(cloud, path)
    else:
        _save_tpc(cloud, path)


def load_cloud(path) -> PointCloud:
    path = str(path)
    if path.endswith(".xyzl"):
        return _load_xyzl(path)
    return _load_tpc(path)


def _save_tpc(cloud, path):
    flags = 1 if cloud.labels is not None else 0
    with open(path, "wb") as fh:
        fh.write(_TPC_MAGIC)
        fh.write(struct.pack("<IB", len(cloud), flags))
        fh.write(cloud.points.astype("<f4").tobytes())
        if flags:
            fh.write(cloud.labels.astype(np.uint8).tobytes())


def _load_tpc(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _TPC_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 9:
        raise FormatError(f"{path}: truncated header")
    count, flags = struct.unpack_from("<IB", raw, 4)
    off = 9
    need = count * 12 + (count if flags & 1 else 0)
    if len(raw) - off != need:
        raise FormatError(
            f"{path}: payload size {len(raw) - off} != expected {need}"
        )
    pts = np.frombuffer(raw, dtype="<f4", count=count * 3, offset=off)
    pts = pts.reshape(count, 3).astype(np.float64)
    labels = None
    if flags & 1:
        labels = np.frombuffer(raw, dtype=np.uint8, count=count, offset=off + count * 12)
    return PointCloud(pts, labels)


def _save_xyzl(cloud, path):
    with open(path, "w", encoding="utf-8") as fh:
        for i, (x, y, z) in enumerate(cloud.points):
            if cloud.labels is not None:
                fh.write(f"{x:.9g} {y:.9g} {z:.9g} {int(cloud.labels[i])}\n")
            else:
                fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def _load_xyzl(path):
    pts, labels = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (3, 4):
                raise FormatError(f"{path}:{ln}: expected 3 or 4 columns")
            pts.append([float(v) for v in parts[:3]])
            if len(parts) == 4:
                labels.append(int(parts[3]))
    if labels and len(labels) != len(pts):
        raise FormatError(f"{path}: label column present on only some lines")
    return PointCloud(
        np.asarray(pts, dtype=np.float64).reshape(-1, 3),
        np.asarray(labels, dtype=np.uint8) if labels else None,
    )
