"""Differentiable training losses: Chamfer-l1, fidelity, and the scheduled
global-to-local total.

The total loss trains on the whole clouds alone until the global term drops
to the epsilon threshold, then blends in a term computed only over the sparse
region of the ground truth (where the thin structures live).  Nearest-pair
assignments are recomputed every call and held fixed within a backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cps import CpsConfig
from .errors import ConfigError
from .geometry import DensityPartition, PointCloud, density_partition, nearest_indices

GLOBAL_ONLY = "GLOBAL_ONLY"
BLENDED = "BLENDED"


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 2.7e-3
    gamma: float = 0.5
    cps: CpsConfig = field(default_factory=CpsConfig)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")

    def to_dict(self):
        return {"epsilon": self.epsilon, "gamma": self.gamma}


@dataclass(frozen=True)
class LossBreakdown:
    """Every term of one loss evaluation plus the branch that was taken."""

    cd_p1: float
    fe_p1: float
    cd_p2: float
    cd_p1_s: float
    fe_p1_s: float
    cd_p2_s: float
    l_g: float
    l_l: float
    total: float
    branch: str
    sparse_empty: bool
    tensor: Tensor  # backpropagate through this

    def __post_init__(self):
        if not np.isclose(self.l_g, self.cd_p1 + self.fe_p1 + self.cd_p2,
                          rtol=1e-9, atol=1e-12):
            raise ConfigError("l_g does not equal the sum of its parts")
        if not np.isclose(self.l_l, self.cd_p1_s + self.fe_p1_s + self.cd_p2_s,
                          rtol=1e-9, atol=1e-12):
            raise ConfigError("l_l does not equal the sum of its parts")


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, PointCloud):
        return Tensor(x.points)
    return Tensor(np.asarray(x, dtype=np.float64))


def _directional_mean(a: Tensor, b: Tensor, idx: np.ndarray | None = None) -> Tensor:
    """Mean over rows of a of the distance to the nearest row of b.

    The nearest index is found on raw values; the gradient then flows through
    the Euclidean distance of each matched pair (0 for coincident pairs).
    """
    if idx is None:
        idx, _ = nearest_indices(a.data, b.data)
    diffs = ad.sub(a, ad.gather(b, idx))
    return ad.reduce_mean(ad.euclidean_norm_rows(diffs))


def chamfer_l1(a, b) -> Tensor:
    """Halved sum of the two directional mean nearest-neighbor distances."""
    a, b = _coerce(a), _coerce(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ConfigError("chamfer_l1 requires non-empty clouds")
    return ad.scale(ad.add(_directional_mean(a, b), _directional_mean(b, a)), 0.5)


def fidelity_error(inp, out) -> Tensor:
    """Mean distance from each input point to its nearest output point."""
    inp, out = _coerce(inp), _coerce(out)
    if inp.shape[0] == 0 or out.shape[0] == 0:
        raise ConfigError("fidelity_error requires non-empty clouds")
    return _directional_mean(inp, out)


def global_loss(p1, p2, gt, nn_cache: dict | None = None):
    """CD(P1, GT) + FE(P1, GT) + CD(P2, GT); returns (tensor, parts).

    The one-step nn_cache avoids re-scanning the same nearest-pair queries
    when the scheduled total evaluates both loss families together.
    """
    p1, p2, gt = _coerce(p1), _coerce(p2), _coerce(gt)
    for t in (p1, p2, gt):
        if t.shape[0] == 0:
            raise ConfigError("global_loss requires non-empty clouds")
    nn = nn_cache if nn_cache is not None else {}
    for key, src, dst in (("p1_gt", p1, gt), ("gt_p1", gt, p1),
                          ("p2_gt", p2, gt), ("gt_p2", gt, p2)):
        if key not in nn:
            nn[key], _ = nearest_indices(src.data, dst.data)
    d_p1_gt = _directional_mean(p1, gt, nn["p1_gt"])
    cd1 = ad.scale(ad.add(d_p1_gt, _directional_mean(gt, p1, nn["gt_p1"])), 0.5)
    fe1 = d_p1_gt
    cd2 = ad.scale(ad.add(_directional_mean(p2, gt, nn["p2_gt"]),
                          _directional_mean(gt, p2, nn["gt_p2"])), 0.5)
    total = ad.add(ad.add(cd1, fe1), cd2)
    parts = {"cd_p1": float(cd1.data), "fe_p1": float(fe1.data),
             "cd_p2": float(cd2.data)}
    return total, parts


def local_loss(p1, p2, gt: PointCloud, cps_cfg: CpsConfig = CpsConfig(),
               partition: DensityPartition | None = None,
               nn_cache: dict | None = None):
    """The same three terms restricted to the ground truth's sparse region.

    P1 and P2 points participate when their nearest ground-truth point is
    sparse-region.  An empty sparse region (or an output with no points
    assigned there) contributes 0 to the affected terms; the flag in the
    returned triple records that degeneracy.
    """
    p1, p2 = _coerce(p1), _coerce(p2)
    if partition is None:
        partition = density_partition(gt, k=cps_cfg.k_density)
    zero = Tensor(0.0)
    if len(partition.sparse_indices) == 0:
        parts = {"cd_p1_s": 0.0, "fe_p1_s": 0.0, "cd_p2_s": 0.0}
        return zero, parts, True
    nn = nn_cache if nn_cache is not None else {}
    is_sparse = np.zeros(len(gt), dtype=bool)
    is_sparse[partition.sparse_indices] = True
    gt_sparse = Tensor(gt.points[partition.sparse_indices])
    terms = {}
    tensors = []
    for name, p in (("p1", p1), ("p2", p2)):
        key = f"{name}_gt"
        if key not in nn:
            nn[key], _ = nearest_indices(p.data, gt.points)
        idx = np.flatnonzero(is_sparse[nn[key]])
        if len(idx) == 0:
            terms[f"cd_{name}_s"] = 0.0
            if name == "p1":
                terms["fe_p1_s"] = 0.0
            continue
        sub = ad.gather(p, idx)
        cd = chamfer_l1(sub, gt_sparse)
        terms[f"cd_{name}_s"] = float(cd.data)
        tensors.append(cd)
        if name == "p1":
            fe = fidelity_error(sub, gt_sparse)
            terms["fe_p1_s"] = float(fe.data)
            tensors.append(fe)
    total = tensors[0] if tensors else zero
    for t in tensors[1:]:
        total = ad.add(total, t)
    return total, terms, False


def total_loss(p1, p2, gt: PointCloud, cfg: LossConfig = LossConfig(),
               partition: DensityPartition | None = None) -> LossBreakdown:
    """Scheduled total: the global loss alone while it exceeds epsilon,
    otherwise the (1 - gamma, gamma) blend with the sparse-region loss."""
    nn: dict = {}
    lg_t, g_parts = global_loss(p1, p2, gt, nn_cache=nn)
    ll_t, l_parts, sparse_empty = local_loss(p1, p2, gt, cfg.cps, partition,
                                             nn_cache=nn)
    lg = float(lg_t.data)
    ll = float(ll_t.data)
    if lg > cfg.epsilon:
        branch = GLOBAL_ONLY
        total = lg_t
    else:
        branch = BLENDED
        total = ad.add(ad.scale(lg_t, 1.0 - cfg.gamma), ad.scale(ll_t, cfg.gamma))
    return LossBreakdown(
        cd_p1=g_parts["cd_p1"], fe_p1=g_parts["fe_p1"], cd_p2=g_parts["cd_p2"],
        cd_p1_s=l_parts["cd_p1_s"], fe_p1_s=l_parts["fe_p1_s"],
        cd_p2_s=l_parts["cd_p2_s"],
        l_g=lg, l_l=ll, total=float(total.data), branch=branch,
        sparse_empty=sparse_empty, tensor=total,
    )
