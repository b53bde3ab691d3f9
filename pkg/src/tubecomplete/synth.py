"""Dataset construction: ground truth from voxel masks, fracture simulation,
and a procedural vessel generator for desk-scale experiments.

The ground-truth path mirrors the clinical recipe: coronary mask -> cavity
closing -> skeleton -> centerline points -> main trunk; aorta mask -> surface
vertices -> farthest point downsampling; joint normalization into [-1, 1]^3.
Fracture simulation then deletes contiguous coronary regions that provably
split the trunk, leaving the aorta untouched.
"""

from __future__ import annotations

import heapq
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FractureError
from .geometry import (
    AORTA,
    CORONARY,
    NeighborGraph,
    PointCloud,
    build_radius_graph,
    default_graph_radius,
    farthest_point_sampling,
    graph_components,
    graph_endpoints,
    normalize,
    save_cloud,
)
from .voxel import (
    StructuringElement,
    VoxelGrid,
    close_cavities,
    connected_components_3d,
    marching_cubes,
    skeletonize,
)


@dataclass(frozen=True)
class FractureSpec:
    """Controls one fracture draw: removal ratio, break count, retry budget."""

    min_ratio: float = 0.10
    max_ratio: float = 0.30
    min_break: int = 1
    max_break: int = 3
    seed: int = 0
    retry_limit: int = 50

    def __post_init__(self):
        if not 0.0 < self.min_ratio <= self.max_ratio < 1.0:
            raise ConfigError(
                f"need 0 < min_ratio <= max_ratio < 1, got "
                f"[{self.min_ratio}, {self.max_ratio}]"
            )
        if not 1 <= self.min_break <= self.max_break:
            raise ConfigError(
                f"need 1 <= min_break <= max_break, got "
                f"[{self.min_break}, {self.max_break}]"
            )
        if self.retry_limit < 1:
            raise ConfigError("retry_limit must be >= 1")

    def to_dict(self):
        return {
            "min_ratio": self.min_ratio, "max_ratio": self.max_ratio,
            "min_break": self.min_break, "max_break": self.max_break,
            "seed": self.seed, "retry_limit": self.retry_limit,
        }

    @classmethod
    def from_dict(cls, d) -> "FractureSpec":
        return cls(**d)


@dataclass(frozen=True)
class CaseRecord:
    """One training/eval sample: fractured input, its ground truth, provenance."""

    input: PointCloud
    ground_truth: PointCloud
    patient_id: str
    case_index: int
    seed: tuple
    removed_ratio: float
    break_count: int

    def __post_init__(self):
        gt_rows = {p.tobytes() for p in self.ground_truth.points}
        for p in self.input.points:
            if p.tobytes() not in gt_rows:
                raise DataError("input contains a point absent from ground truth")
        in_a = self.input.with_label(AORTA).points
        gt_a = self.ground_truth.with_label(AORTA).points
        if in_a.shape != gt_a.shape or not np.array_equal(in_a, gt_a):
            raise DataError("aorta points of input differ from ground truth")


@dataclass(frozen=True)
class SyntheticTreeSpec:
    """Procedural vessel-tree parameters (stand-in for clinical masks)."""

    branch_count: int = 2
    depth: int = 2
    radius_range: tuple = (1.2, 2.4)
    curvature_range: tuple = (0.10, 0.35)
    dims: tuple = (64, 64, 64)
    # aorta shell half-axes as fractions of the grid; smaller shells sample
    # the surface more finely for a fixed point budget
    aorta_axes: tuple = (0.30, 0.30, 0.20)
    seed: int = 0

    def __post_init__(self):
        if self.branch_count < 1 or self.depth < 0:
            raise ConfigError("branch_count >= 1 and depth >= 0 required")
        rmin, rmax = self.radius_range
        if rmin < 1.0 or rmin > rmax:
            raise ConfigError(f"radius_range must satisfy 1 <= min <= max, got {self.radius_range}")
        if any(d < 16 for d in self.dims):
            raise ConfigError("grid dims must be at least 16 per axis")
        if any(not 0.0 < a <= 0.5 for a in self.aorta_axes):
            raise ConfigError(f"aorta_axes fractions must be in (0, 0.5], got {self.aorta_axes}")

    def to_dict(self):
        return {
            "branch_count": self.branch_count, "depth": self.depth,
            "radius_range": list(self.radius_range),
            "curvature_range": list(self.curvature_range),
            "dims": list(self.dims), "aorta_axes": list(self.aorta_axes),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d) -> "SyntheticTreeSpec":
        d = dict(d)
        for key in ("radius_range", "curvature_range", "dims", "aorta_axes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# ---------------------------------------------------------------------------
# main trunk extraction
# ---------------------------------------------------------------------------

def extract_main_trunk(centerline: PointCloud, radius: float) -> PointCloud:
    """Prune a centerline cloud to the union of endpoint-to-endpoint paths.

    Builds the radius graph, finds every endpoint (degree <= 1), and keeps
    exactly the points lying on a shortest path between some endpoint pair.
    Shortest = fewest hops, total edge length as tie-break.  A cloud with no
    endpoints (a pure loop) is returned unchanged with a warning.
    """
    if len(centerline) == 0:
        raise DataError("centerline cloud is empty")
    graph = build_radius_graph(centerline, radius)
    ends = graph_endpoints(graph)
    if len(ends) < 2:
        # a pure loop (or a loop with one tail) offers no endpoint pairs
        warnings.warn("centerline has no endpoint pairs; trunk left unpruned")
        return centerline
    keep = np.zeros(len(centerline), dtype=bool)
    end_set = set(int(e) for e in ends)
    lengths = _edge_lengths(centerline.points, graph)
    for si, s in enumerate(ends):
        dist, parent = _shortest_tree(graph, lengths, int(s))
        for t in ends[si + 1:]:
            t = int(t)
            if dist[t][0] == np.inf:
                continue  # different component, no path
            node = t
            while node != -1:
                keep[node] = True
                node = parent[node]
    return centerline.subset(np.flatnonzero(keep))


def _edge_lengths(points, graph: NeighborGraph):
    lengths = []
    for i in range(graph.n):
        nbrs = graph.adjacency[i]
        d = np.sqrt(np.sum((points[nbrs] - points[i]) ** 2, axis=1))
        lengths.append(d)
    return lengths


def _shortest_tree(graph: NeighborGraph, lengths, source: int):
    """Single-source shortest paths by (hop count, total length).

    Ties between equal-cost parents resolve to the lower parent index, so
    the returned tree is canonical.
    """
    n = graph.n
    dist = [(np.inf, np.inf)] * n
    parent = [-1] * n
    dist[source] = (0, 0.0)
    heap = [(0, 0.0, source)]
    while heap:
        h, l, u = heapq.heappop(heap)
        if (h, l) != dist[u]:
            continue
        for v, w in zip(graph.adjacency[u], lengths[u]):
            cand = (h + 1, l + float(w))
            if cand < dist[v]:
                dist[v] = cand
                parent[v] = u
                heapq.heappush(heap, (cand[0], cand[1], v))
            elif cand == dist[v] and parent[v] != -1 and u < parent[v]:
                parent[v] = u
    return dist, parent


# ---------------------------------------------------------------------------
# ground truth construction
# ---------------------------------------------------------------------------

def build_ground_truth(aorta: VoxelGrid, coronary: VoxelGrid, n_total: int,
                       rng, closing_radius: int = 2,
                       trunk_radius: float | None = None) -> PointCloud:
    """Labeled ground-truth cloud from an aorta mask and a coronary mask.

    Coronary: close cavities, skeletonize, take voxel centers, prune to the
    main trunk.  Aorta: marching-cubes surface vertices, farthest point
    sampled down to n_total minus the coronary count.  The union is jointly
    normalized into [-1, 1]^3; labels mark the source of each point.
    """
    if aorta.dims != coronary.dims or aorta.spacing != coronary.spacing:
        raise ConfigError("aorta and coronary grids must share dims and spacing")
    trunk_pts = np.empty((0, 3))
    if coronary.count > 0:
        closed = close_cavities(coronary, StructuringElement.sphere(closing_radius))
        skel = skeletonize(closed)
        centers = PointCloud(skel.centers_mm())
        radius = trunk_radius if trunk_radius is not None else default_graph_radius(centers)
        if radius <= 0.0:
            trunk_pts = centers.points
        else:
            trunk_pts = extract_main_trunk(centers, radius).points
    n_cor = len(trunk_pts)
    if n_cor > n_total:
        raise ConfigError(
            f"coronary centerline has {n_cor} points, exceeding n_total={n_total}"
        )
    n_aorta = n_total - n_cor
    if n_aorta > 0:
        surface = marching_cubes(aorta)
        if len(surface) < n_aorta:
            raise DataError(
                f"aorta surface has {len(surface)} vertices, need {n_aorta}"
            )
        start = int(rng.integers(len(surface)))
        picks = farthest_point_sampling(surface, n_aorta, start=start)
        aorta_pts = surface.points[picks]
    else:
        aorta_pts = np.empty((0, 3))

    clouds, _transform = normalize([PointCloud(aorta_pts), PointCloud(trunk_pts)])
    points = np.concatenate([clouds[0].points, clouds[1].points], axis=0)
    labels = np.concatenate([
        np.full(n_aorta, AORTA, dtype=np.uint8),
        np.full(n_cor, CORONARY, dtype=np.uint8),
    ])
    return PointCloud(points, labels)


# ---------------------------------------------------------------------------
# fracture simulation
# ---------------------------------------------------------------------------

def simulate_fracture(gt: PointCloud, spec: FractureSpec, rng):
    """Delete contiguous coronary regions so the trunk provably splits.

    Draws a removal ratio R and break count B, partitions the removal budget
    floor(R * |coronary|) into B group sizes, and grows each group by
    breadth-first search from a random surviving coronary point.  A group is
    accepted only if deleting it strictly increases the component count of
    the coronary radius graph (radius fixed from the ground-truth coronary
    cloud); otherwise it retries, up to spec.retry_limit per group.

    Returns (fractured cloud, removed_ratio, break_count).  Aorta points pass
    through untouched.
    """
    cor_idx = gt.label_indices(CORONARY)
    n_cor = len(cor_idx)
    if n_cor == 0:
        raise DataError("ground truth has no coronary points")
    ratio = float(rng.uniform(spec.min_ratio, spec.max_ratio))
    breaks = int(rng.integers(spec.min_break, spec.max_break + 1))
    budget = int(np.floor(ratio * n_cor))
    if budget < 1:
        raise FractureError(
            f"removal budget is zero ({n_cor} coronary points at ratio {ratio:.3f})"
        )
    breaks = min(breaks, budget)
    sizes = _partition_budget(budget, breaks, rng)

    cor_points = gt.points[cor_idx]
    graph = build_radius_graph(cor_points, default_graph_radius(cor_points))
    alive = np.ones(n_cor, dtype=bool)
    _, count = graph_components(graph, alive)
    for b, size in enumerate(sizes):
        accepted = False
        for _attempt in range(spec.retry_limit):
            alive_idx = np.flatnonzero(alive)
            seed = int(alive_idx[rng.integers(len(alive_idx))])
            region = _grow_region(graph, alive, seed, size)
            if len(region) < size:
                continue  # component too small to host this group
            alive[region] = False
            _, new_count = graph_components(graph, alive)
            if new_count > count:
                count = new_count
                accepted = True
                break
            alive[region] = True  # no fracture produced: retry
        if not accepted:
            raise FractureError(
                f"group {b}: no fracturing removal of size {size} found "
                f"in {spec.retry_limit} attempts", group=b,
            )

    keep = np.ones(len(gt), dtype=bool)
    keep[cor_idx[~alive]] = False
    return gt.subset(np.flatnonzero(keep)), budget / n_cor, breaks


def _partition_budget(budget: int, parts: int, rng):
    """Split budget into `parts` positive integers summing exactly to it."""
    if parts == 1:
        return [budget]
    cuts = np.sort(rng.choice(budget - 1, size=parts - 1, replace=False)) + 1
    edges = np.concatenate([[0], cuts, [budget]])
    return list(np.diff(edges).astype(int))


def _grow_region(graph: NeighborGraph, alive, seed: int, size: int):
    """First `size` alive points in BFS order from seed (sorted adjacency)."""
    region = [seed]
    seen = {seed}
    queue = [seed]
    qi = 0
    while qi < len(queue) and len(region) < size:
        u = queue[qi]
        qi += 1
        for v in graph.adjacency[u]:
            v = int(v)
            if alive[v] and v not in seen:
                seen.add(v)
                region.append(v)
                queue.append(v)
                if len(region) == size:
                    break
    return np.asarray(region[:size], dtype=np.intp)


def generate_cases(gt: PointCloud, m: int, spec: FractureSpec,
                   base_seed: int | None = None, patient_id: str = ""):
    """m fracture cases of one ground truth, each from a derived seed stream."""
    if m < 1:
        raise ConfigError("case count must be >= 1")
    base = spec.seed if base_seed is None else int(base_seed)
    records = []
    for k in range(m):
        rng = np.random.default_rng([base, k])
        try:
            fractured, ratio, breaks = simulate_fracture(gt, spec, rng)
        except FractureError as exc:
            raise FractureError(f"case {k}: {exc}", group=exc.group) from exc
        records.append(CaseRecord(
            input=fractured, ground_truth=gt, patient_id=patient_id,
            case_index=k, seed=(base, k), removed_ratio=ratio,
            break_count=breaks,
        ))
    return records


# ---------------------------------------------------------------------------
# procedural vessel generator
# ---------------------------------------------------------------------------

_TREE_RETRY_CAP = 20


def synth_vessel_tree(spec: SyntheticTreeSpec):
    """Rasterize a random branching vessel tree and an aortic shell.

    The coronary is a sphere-swept tree of piecewise cubic curves with radii
    tapering toward the leaves; the aorta is a thick ellipsoidal shell the
    tree hangs from.  Both grids are single 26-connected components and are
    fully determined by spec.seed.
    """
    rng = np.random.default_rng(spec.seed)
    dims = np.asarray(spec.dims, dtype=float)
    aorta_occ = _aorta_shell(spec.dims, spec.aorta_axes)
    for attempt in range(_TREE_RETRY_CAP):
        # shorten branches a little on every retry so deep trees converge
        occ = _try_tree(spec, dims, rng, shrink=0.88 ** attempt)
        if occ is None:
            continue
        coronary = VoxelGrid(spec.dims, (1.0, 1.0, 1.0), occ)
        if connected_components_3d(coronary, 26).count == 1:
            aorta = VoxelGrid(spec.dims, (1.0, 1.0, 1.0), aorta_occ)
            return aorta, coronary
    raise DataError(
        f"vessel tree generation failed {_TREE_RETRY_CAP} times for seed {spec.seed}"
    )


def _aorta_shell(dims, ax_fracs=(0.30, 0.30, 0.20)) -> np.ndarray:
    nx, ny, nz = dims
    center = np.array([0.5 * nx, 0.5 * ny, 0.74 * nz])
    axes = np.array([ax_fracs[0] * nx, ax_fracs[1] * ny, ax_fracs[2] * nz])
    xs = (np.arange(nx) + 0.5 - center[0]) / axes[0]
    ys = (np.arange(ny) + 0.5 - center[1]) / axes[1]
    zs = (np.arange(nz) + 0.5 - center[2]) / axes[2]
    rho = np.sqrt(
        xs[:, None, None] ** 2 + ys[None, :, None] ** 2 + zs[None, None, :] ** 2
    )
    return (rho >= 0.78) & (rho <= 1.0)


def _try_tree(spec: SyntheticTreeSpec, dims, rng, shrink: float = 1.0):
    """One rasterization attempt; None when a branch leaves the safe margin."""
    nx, ny, nz = dims
    rmin, rmax = spec.radius_range
    occ = np.zeros(spec.dims, dtype=bool)
    root = np.array([0.5 * nx, 0.5 * ny, 0.54 * nz])
    tilt = rng.uniform(-0.25, 0.25, size=2)
    direction = _unit(np.array([tilt[0], tilt[1], -1.0]))
    base_len = 0.30 * float(min(dims)) * shrink
    # (start, direction, level) stack; children spawn at each branch end
    stack = [(root, direction, 0)]
    levels = spec.depth + 1
    while stack:
        start, d, level = stack.pop()
        length = base_len * (0.75 ** level)
        r0 = rmax + (rmin - rmax) * level / levels
        r1 = rmax + (rmin - rmax) * (level + 1) / levels
        samples, radii, end_dir = _bezier_branch(start, d, length, r0, r1, spec, rng)
        margin = np.max(radii) + 1.5
        if np.any(samples < margin) or np.any(samples > dims - margin):
            return None
        _rasterize_swept(occ, samples, radii)
        if level < spec.depth:
            for child, phi in enumerate(_child_azimuths(spec.branch_count, rng)):
                stack.append((samples[-1], _tilted(end_dir, phi, rng), level + 1))
    return occ


def _child_azimuths(count: int, rng):
    """Evenly spread azimuths with jitter, so siblings fan out instead of
    overlapping along the parent."""
    base = rng.uniform(0.0, 2 * np.pi)
    jitter = rng.uniform(-0.35, 0.35, size=count) * 2 * np.pi / count
    return base + 2 * np.pi * np.arange(count) / count + jitter


def _bezier_branch(start, d, length, r0, r1, spec, rng):
    curv = rng.uniform(*spec.curvature_range)
    u, v = _perp_frame(d)
    lateral = rng.uniform(-1.0, 1.0, size=(2, 2)) * curv * length
    p0 = start
    p1 = start + d * (length / 3) + u * lateral[0, 0] + v * lateral[0, 1]
    p2 = start + d * (2 * length / 3) + u * lateral[1, 0] + v * lateral[1, 1]
    p3 = start + d * length
    n = max(4, int(np.ceil(length / 0.5)))
    t = np.linspace(0.0, 1.0, n)[:, None]
    samples = ((1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1
               + 3 * (1 - t) * t ** 2 * p2 + t ** 3 * p3)
    radii = r0 + (r1 - r0) * t[:, 0]
    end_dir = _unit(3 * (p3 - p2))
    return samples, radii, end_dir


def _rasterize_swept(occ, samples, radii):
    dims = occ.shape
    for pt, r in zip(samples, radii):
        lo = np.maximum(np.floor(pt - r - 0.5), 0).astype(int)
        hi = np.minimum(np.ceil(pt + r + 0.5), dims).astype(int)
        xs = np.arange(lo[0], hi[0]) + 0.5 - pt[0]
        ys = np.arange(lo[1], hi[1]) + 0.5 - pt[1]
        zs = np.arange(lo[2], hi[2]) + 0.5 - pt[2]
        ball = (xs[:, None, None] ** 2 + ys[None, :, None] ** 2
                + zs[None, None, :] ** 2) <= r * r
        occ[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= ball


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.array([0.0, 0.0, 1.0])


def _perp_frame(d):
    ref = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = _unit(np.cross(d, ref))
    v = np.cross(d, u)
    return u, v


def _tilted(d, phi: float, rng):
    """Direction on the cone around d: polar angle 25-55 degrees, azimuth phi."""
    angle = np.deg2rad(rng.uniform(25.0, 55.0))
    u, v = _perp_frame(d)
    lateral = np.cos(phi) * u + np.sin(phi) * v
    return _unit(d * np.cos(angle) + lateral * np.sin(angle))


# ---------------------------------------------------------------------------
# dataset directory layout
# ---------------------------------------------------------------------------

def write_patient(root, patient_id: str, gt: PointCloud, records):
    """Write gt.tpc, case_<k>.tpc and meta.json under root/patient_id."""
    pdir = os.path.join(str(root), patient_id)
    os.makedirs(pdir, exist_ok=True)
    save_cloud(gt, os.path.join(pdir, "gt.tpc"))
    meta = {
        "patient_id": patient_id,
        "cases": [
            {
                "case_index": r.case_index,
                "seed": list(r.seed),
                "removed_ratio": r.removed_ratio,
                "break_count": r.break_count,
                "n_input": len(r.input),
            }
            for r in records
        ],
    }
    for r in records:
        save_cloud(r.input, os.path.join(pdir, f"case_{r.case_index}.tpc"))
    with open(os.path.join(pdir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_manifest(root, splits: dict, spec: dict):
    """dataset.json at root: split patient-id lists plus the generating spec."""
    manifest = {"splits": splits, "spec": spec}
    with open(os.path.join(str(root), "dataset.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_manifest(root) -> dict:
    path = os.path.join(str(root), "dataset.json")
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if "splits" not in manifest:
        raise DataError(f"{path}: manifest lacks 'splits'")
    return manifest


def load_patient_cases(root, patient_id: str):
    """(gt cloud, [CaseRecord...]) for one patient directory."""
    from .geometry import load_cloud

    pdir = os.path.join(str(root), patient_id)
    gt = load_cloud(os.path.join(pdir, "gt.tpc"))
    with open(os.path.join(pdir, "meta.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    records = []
    for entry in meta["cases"]:
        k = int(entry["case_index"])
        cloud = load_cloud(os.path.join(pdir, f"case_{k}.tpc"))
        records.append(CaseRecord(
            input=cloud, ground_truth=gt, patient_id=patient_id,
            case_index=k, seed=tuple(entry["seed"]),
            removed_ratio=float(entry["removed_ratio"]),
            break_count=int(entry["break_count"]),
        ))
    return gt, records
