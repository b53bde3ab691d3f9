"""Dense voxel grids and the morphological primitives the dataset pipeline needs.

A VoxelGrid is a boolean occupancy block with physical spacing.  On top of it
sit dilation, erosion, cavity closing, 3D connected components, thinning to a
centerline skeleton, and marching-cubes surface extraction.  All morphology
treats out-of-bounds as background.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage import measure as _measure
from skimage import morphology as _morphology

from .errors import ConfigError, FormatError
from .geometry import PointCloud


@dataclass(frozen=True)
class StructuringElement:
    """Spherical structuring element: all integer offsets within `radius`."""

    radius: int
    offsets: tuple

    def __post_init__(self):
        if self.radius < 1:
            raise ConfigError("structuring element radius must be >= 1")
        offs = {tuple(int(v) for v in o) for o in self.offsets}
        if (0, 0, 0) not in offs:
            raise ConfigError("structuring element must contain the origin")
        for o in offs:
            if tuple(-v for v in o) not in offs:
                raise ConfigError("structuring element must be symmetric")
        object.__setattr__(self, "offsets", tuple(sorted(offs)))

    @classmethod
    def sphere(cls, radius: int) -> "StructuringElement":
        r = int(radius)
        if r < 1:
            raise ConfigError("structuring element radius must be >= 1")
        offs = [
            (dx, dy, dz)
            for dx in range(-r, r + 1)
            for dy in range(-r, r + 1)
            for dz in range(-r, r + 1)
            if dx * dx + dy * dy + dz * dz <= r * r
        ]
        return cls(r, tuple(offs))

    def mask(self) -> np.ndarray:
        """Dense (2r+1)^3 boolean footprint, origin at the center."""
        r = self.radius
        m = np.zeros((2 * r + 1,) * 3, dtype=bool)
        for dx, dy, dz in self.offsets:
            m[dx + r, dy + r, dz + r] = True
        return m


@dataclass(frozen=True)
class VoxelGrid:
    """Boolean occupancy over a dims[0] x dims[1] x dims[2] lattice.

    occupancy is indexed [x, y, z]; spacing is mm per voxel along each axis.
    The voxel (i, j, k) occupies the cube whose center is ((i+.5)sx, (j+.5)sy,
    (k+.5)sz).
    """

    dims: tuple
    spacing: tuple
    occupancy: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ConfigError(f"dims must be three positive counts, got {dims}")
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ConfigError(f"spacing must be three positive lengths, got {spacing}")
        occ = np.ascontiguousarray(np.asarray(self.occupancy, dtype=bool))
        if occ.shape != dims:
            raise ConfigError(f"occupancy shape {occ.shape} != dims {dims}")
        occ.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "occupancy", occ)

    @classmethod
    def empty(cls, dims, spacing=(1.0, 1.0, 1.0)) -> "VoxelGrid":
        return cls(tuple(dims), tuple(spacing), np.zeros(tuple(dims), dtype=bool))

    def replace(self, occupancy) -> "VoxelGrid":
        return VoxelGrid(self.dims, self.spacing, occupancy)

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())

    def centers_mm(self, indices=None) -> np.ndarray:
        """Physical centers of set voxels (or of explicit (M,3) index rows)."""
        if indices is None:
            indices = np.argwhere(self.occupancy)
        idx = np.asarray(indices, dtype=np.float64).reshape(-1, 3)
        return (idx + 0.5) * np.asarray(self.spacing)


@dataclass(frozen=True)
class LabeledGrid:
    """Per-voxel component ids (0 = background), ids dense from 1."""

    labels: np.ndarray
    count: int


def dilate(grid: VoxelGrid, e: StructuringElement) -> VoxelGrid:
    """Set every voxel reachable from a set voxel by an element offset."""
    out = ndimage.binary_dilation(grid.occupancy, structure=e.mask(), border_value=0)
    return grid.replace(out)


def erode(grid: VoxelGrid, e: StructuringElement) -> VoxelGrid:
    """Keep a voxel only if every element offset lands on a set voxel.

    Out-of-bounds counts as unset, so the boundary shell always erodes.
    """
    out = ndimage.binary_erosion(grid.occupancy, structure=e.mask(), border_value=0)
    return grid.replace(out)


def close_cavities(grid: VoxelGrid, e: StructuringElement) -> VoxelGrid:
    """Morphological closing: dilate then erode with the same element.

    Runs on a frame padded by the element radius so the erosion step sees the
    dilated halo rather than the background border; without the pad, closing
    would shave set voxels near the grid edge and lose extensivity.
    """
    r = e.radius
    padded = np.pad(grid.occupancy, r)
    padded = ndimage.binary_dilation(padded, structure=e.mask(), border_value=0)
    padded = ndimage.binary_erosion(padded, structure=e.mask(), border_value=0)
    out = padded[r:-r, r:-r, r:-r]
    return grid.replace(out)


_CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


def connected_components_3d(grid: VoxelGrid, connectivity: int = 26) -> LabeledGrid:
    """Label set voxels by connected component under 6/18/26 adjacency."""
    if connectivity not in _CONNECTIVITY_RANK:
        raise ConfigError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    structure = ndimage.generate_binary_structure(3, _CONNECTIVITY_RANK[connectivity])
    labels, count = ndimage.label(grid.occupancy, structure=structure)
    return LabeledGrid(labels, int(count))


def skeletonize(grid: VoxelGrid) -> VoxelGrid:
    """Thin a solid structure to a 1-voxel-wide centerline skeleton.

    Iterative topology-preserving thinning (26-connected foreground); the
    result is a subset of the input with the same 26-component count.  The
    thinning pass can erase a compact object outright, so any component left
    without a voxel gets its innermost voxel (deepest by distance transform,
    first index on ties) reinstated.
    """
    occ = grid.occupancy
    if not occ.any():
        return grid
    skel = _morphology.skeletonize(occ).astype(bool)
    structure = ndimage.generate_binary_structure(3, 3)
    labels, count = ndimage.label(occ, structure=structure)
    for c in range(1, count + 1):
        comp = labels == c
        if not (skel & comp).any():
            depth = ndimage.distance_transform_edt(comp)
            skel[np.unravel_index(int(np.argmax(depth)), depth.shape)] = True
    return grid.replace(skel)


def marching_cubes(grid: VoxelGrid, iso: float = 0.5) -> PointCloud:
    """Surface vertices (in mm) of the occupancy treated as a 0/1 field.

    The field is sampled at voxel centers and padded with a background layer
    so closed surfaces wrap voxels on the grid boundary.  On a binary field
    every crossing sits at an edge midpoint, which keeps vertices exactly
    deterministic.
    """
    if not 0.0 < iso < 1.0:
        raise ConfigError(f"iso must lie in (0, 1), got {iso}")
    occ = grid.occupancy
    if not occ.any():
        return PointCloud(np.empty((0, 3)))
    field = np.pad(occ, 1).astype(np.float64)
    verts, _faces, _normals, _values = _measure.marching_cubes(field, level=iso)
    # padded index v samples voxel v-1, whose center is ((v-1)+.5)*s
    verts_mm = (verts - 0.5) * np.asarray(grid.spacing)
    return PointCloud(verts_mm)


def save_voxels(grid: VoxelGrid, path):
    """Write `<stem>.vox.json` (header) and `<stem>.vox.raw` (payload)."""
    stem = _vox_stem(path)
    header = {
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "dtype": "u8",
    }
    with open(stem + ".vox.json", "w", encoding="utf-8") as fh:
        json.dump(header, fh, sort_keys=True)
        fh.write("\n")
    # payload is x-fastest row-major: x innermost, then y, then z
    raw = grid.occupancy.astype(np.uint8).transpose(2, 1, 0).tobytes()
    with open(stem + ".vox.raw", "wb") as fh:
        fh.write(raw)


def load_voxels(path) -> VoxelGrid:
    stem = _vox_stem(path)
    try:
        with open(stem + ".vox.json", "r", encoding="utf-8") as fh:
            header = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{stem}.vox.json: malformed header ({exc})") from exc
    for key in ("dims", "spacing", "dtype"):
        if key not in header:
            raise FormatError(f"{stem}.vox.json: missing '{key}'")
    if header["dtype"] != "u8":
        raise FormatError(f"{stem}.vox.json: unsupported dtype {header['dtype']!r}")
    dims = tuple(int(d) for d in header["dims"])
    spacing = tuple(float(s) for s in header["spacing"])
    if len(dims) != 3 or len(spacing) != 3:
        raise FormatError(f"{stem}.vox.json: dims/spacing must have 3 entries")
    with open(stem + ".vox.raw", "rb") as fh:
        raw = fh.read()
    expected = dims[0] * dims[1] * dims[2]
    if len(raw) != expected:
        raise FormatError(
            f"{stem}.vox.raw: {len(raw)} bytes, expected {expected} for dims {dims}"
        )
    flat = np.frombuffer(raw, dtype=np.uint8)
    occ = flat.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0) != 0
    return VoxelGrid(dims, spacing, occ)


def _vox_stem(path) -> str:
    path = str(path)
    for suffix in (".vox.json", ".vox.raw"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path
