"""Training losses against brute-force oracles plus the schedule's exact rule."""

import numpy as np
import pytest

from tubecomplete.autodiff import Tensor, backward
from tubecomplete.errors import ConfigError
from tubecomplete.geometry import DensityPartition, PointCloud, density_partition
from tubecomplete.losses import (
    BLENDED,
    GLOBAL_ONLY,
    LossBreakdown,
    LossConfig,
    chamfer_l1,
    fidelity_error,
    global_loss,
    local_loss,
    total_loss,
)

FD_STEP = 1e-5


def cd_oracle(a, b):
    da = np.array([np.min(np.sqrt(((b - p) ** 2).sum(axis=1))) for p in a])
    db = np.array([np.min(np.sqrt(((a - q) ** 2).sum(axis=1))) for q in b])
    return 0.5 * (da.mean() + db.mean())


def fe_oracle(inp, out):
    return float(np.mean(
        [np.min(np.sqrt(((out - p) ** 2).sum(axis=1))) for p in inp]))


def fd_grad(f, x, h=FD_STEP):
    g = np.zeros_like(x)
    fx, fg = x.ravel(), g.ravel()
    for i in range(x.size):
        orig = fx[i]
        fx[i] = orig + h
        fp = f()
        fx[i] = orig - h
        fm = f()
        fx[i] = orig
        fg[i] = (fp - fm) / (2.0 * h)
    return g


def two_region_gt(n_blob=20, n_line=9):
    """Tight blob (dense) plus a spread line (sparse) under the k=8 split."""
    rng = np.random.default_rng(0)
    blob = rng.normal(size=(n_blob, 3)) * 0.05
    line = np.stack([np.linspace(5.0, 10.0, n_line),
                     np.zeros(n_line), np.zeros(n_line)], axis=1)
    gt = PointCloud(np.vstack([blob, line]))
    part = density_partition(gt, k=8)
    assert np.array_equal(np.sort(part.sparse_indices),
                          np.arange(n_blob, n_blob + n_line))
    return gt, part


# ---------------------------------------------------------------------------
# chamfer_l1
# ---------------------------------------------------------------------------

def test_chamfer_identical_zero():
    pts = np.random.default_rng(1).normal(size=(12, 3))
    assert float(chamfer_l1(pts, pts.copy()).data) == 0.0


def test_chamfer_unit_pair():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0]])
    assert float(chamfer_l1(a, b).data) == 1.0


def test_chamfer_symmetric_nonnegative():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(10, 3)), rng.normal(size=(14, 3))
    ab = float(chamfer_l1(a, b).data)
    ba = float(chamfer_l1(b, a).data)
    assert ab == ba
    assert ab > 0.0


def test_chamfer_zero_for_permuted_sets():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(9, 3))
    assert float(chamfer_l1(a, a[::-1].copy()).data) == 0.0


def test_chamfer_matches_oracle():
    rng = np.random.default_rng(4)
    for _ in range(30):
        a = rng.normal(size=(rng.integers(1, 20), 3))
        b = rng.normal(size=(rng.integers(1, 20), 3))
        got = float(chamfer_l1(a, b).data)
        np.testing.assert_allclose(got, cd_oracle(a, b), rtol=1e-12)


def test_chamfer_rejects_empty():
    with pytest.raises(ConfigError):
        chamfer_l1(np.empty((0, 3)), np.ones((2, 3)))
    with pytest.raises(ConfigError):
        chamfer_l1(np.ones((2, 3)), np.empty((0, 3)))


def test_chamfer_accepts_cloud_tensor_array():
    pts = np.random.default_rng(5).normal(size=(6, 3))
    v1 = float(chamfer_l1(PointCloud(pts), pts + 1.0).data)
    v2 = float(chamfer_l1(Tensor(pts), Tensor(pts + 1.0)).data)
    assert v1 == v2


def test_chamfer_gradient_matches_fd():
    rng = np.random.default_rng(6)
    a = Tensor(rng.normal(size=(8, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(7, 3)), requires_grad=True)
    backward(chamfer_l1(a, b))
    for t in (a, b):
        want = fd_grad(lambda: float(chamfer_l1(a, b).data), t.data)
        np.testing.assert_allclose(t.grad, want, rtol=1e-4, atol=1e-7)


def test_chamfer_gradient_coincident_pair():
    a = Tensor(np.array([[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]]), requires_grad=True)
    b = Tensor(np.array([[0.0, 0.0, 0.0], [4.0, 1.0, 0.0]]))
    backward(chamfer_l1(a, b))
    # the coincident pair contributes zero gradient (subgradient choice)
    np.testing.assert_allclose(a.grad[0], 0.0)
    want = fd_grad(lambda: float(chamfer_l1(a, b).data), a.data)
    np.testing.assert_allclose(a.grad, want, rtol=1e-4, atol=1e-7)


# ---------------------------------------------------------------------------
# fidelity_error
# ---------------------------------------------------------------------------

def test_fidelity_zero_when_subset():
    rng = np.random.default_rng(7)
    out = rng.normal(size=(15, 3))
    inp = out[[2, 5, 11]]
    assert float(fidelity_error(inp, out).data) == 0.0


def test_fidelity_asymmetry_witness():
    inp = np.array([[0.0, 0.0, 0.0]])
    out = np.array([[0.0, 0.0, 0.0], [9.0, 0.0, 0.0]])
    assert float(fidelity_error(inp, out).data) == 0.0
    assert float(fidelity_error(out, inp).data) == 4.5


def test_fidelity_matches_oracle():
    rng = np.random.default_rng(8)
    for _ in range(20):
        inp = rng.normal(size=(rng.integers(1, 15), 3))
        out = rng.normal(size=(rng.integers(1, 15), 3))
        np.testing.assert_allclose(float(fidelity_error(inp, out).data),
                                   fe_oracle(inp, out), rtol=1e-12)


def test_fidelity_gradient_matches_fd():
    rng = np.random.default_rng(9)
    inp = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    out = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    backward(fidelity_error(inp, out))
    for t in (inp, out):
        want = fd_grad(lambda: float(fidelity_error(inp, out).data), t.data)
        np.testing.assert_allclose(t.grad, want, rtol=1e-4, atol=1e-7)


def test_fidelity_rejects_empty():
    with pytest.raises(ConfigError):
        fidelity_error(np.empty((0, 3)), np.ones((1, 3)))


# ---------------------------------------------------------------------------
# global_loss
# ---------------------------------------------------------------------------

def test_global_loss_matches_oracle_parts():
    rng = np.random.default_rng(10)
    p1, p2, gt = (rng.normal(size=(n, 3)) for n in (8, 16, 12))
    total, parts = global_loss(p1, p2, gt)
    np.testing.assert_allclose(parts["cd_p1"], cd_oracle(p1, gt), rtol=1e-12)
    np.testing.assert_allclose(parts["fe_p1"], fe_oracle(p1, gt), rtol=1e-12)
    np.testing.assert_allclose(parts["cd_p2"], cd_oracle(p2, gt), rtol=1e-12)
    np.testing.assert_allclose(
        float(total.data),
        parts["cd_p1"] + parts["fe_p1"] + parts["cd_p2"], rtol=1e-12)


def test_global_loss_zero_at_perfect_prediction():
    gt = np.random.default_rng(11).normal(size=(10, 3))
    total, _ = global_loss(gt.copy(), gt.copy(), gt)
    assert float(total.data) == 0.0


def test_global_loss_fills_nn_cache():
    rng = np.random.default_rng(12)
    p1, p2, gt = (rng.normal(size=(6, 3)) for _ in range(3))
    cache = {}
    v1, _ = global_loss(p1, p2, gt, nn_cache=cache)
    assert set(cache) == {"p1_gt", "gt_p1", "p2_gt", "gt_p2"}
    v2, _ = global_loss(p1, p2, gt, nn_cache=cache)
    assert float(v1.data) == float(v2.data)


def test_global_loss_rejects_empty():
    with pytest.raises(ConfigError):
        global_loss(np.empty((0, 3)), np.ones((2, 3)), np.ones((2, 3)))


# ---------------------------------------------------------------------------
# local_loss
# ---------------------------------------------------------------------------

def test_local_loss_all_dense_flagged_zero():
    gt = PointCloud(np.tile([[1.0, 1.0, 1.0]], (12, 1)))
    total, parts, empty = local_loss(np.ones((4, 3)), np.ones((4, 3)), gt)
    assert empty is True
    assert float(total.data) == 0.0
    assert parts == {"cd_p1_s": 0.0, "fe_p1_s": 0.0, "cd_p2_s": 0.0}


def test_local_loss_zero_at_perfect_sparse_match():
    gt, part = two_region_gt()
    total, parts, empty = local_loss(gt.points.copy(), gt.points.copy(), gt,
                                     partition=part)
    assert empty is False
    assert float(total.data) == 0.0
    assert parts["cd_p1_s"] == 0.0 and parts["cd_p2_s"] == 0.0


def test_local_loss_matches_hand_computation():
    gt, part = two_region_gt()
    rng = np.random.default_rng(13)
    p1 = np.vstack([rng.normal(size=(5, 3)) * 0.1,           # near the blob
                    gt.points[part.sparse_indices][:4] + 0.2])
    p2 = gt.points[part.sparse_indices] + rng.normal(size=(9, 3)) * 0.05
    total, parts, empty = local_loss(p1, p2, gt, partition=part)
    assert empty is False

    gs = gt.points[part.sparse_indices]
    is_sparse = np.zeros(len(gt), dtype=bool)
    is_sparse[part.sparse_indices] = True

    def sparse_rows(p):
        nearest = np.array([np.argmin(((gt.points - q) ** 2).sum(axis=1))
                            for q in p])
        return p[is_sparse[nearest]]

    s1, s2 = sparse_rows(p1), sparse_rows(p2)
    np.testing.assert_allclose(parts["cd_p1_s"], cd_oracle(s1, gs), rtol=1e-12)
    np.testing.assert_allclose(parts["fe_p1_s"], fe_oracle(s1, gs), rtol=1e-12)
    np.testing.assert_allclose(parts["cd_p2_s"], cd_oracle(s2, gs), rtol=1e-12)
    np.testing.assert_allclose(
        float(total.data),
        parts["cd_p1_s"] + parts["fe_p1_s"] + parts["cd_p2_s"], rtol=1e-12)


def test_local_loss_no_sparse_assignment_terms_zero():
    gt, part = two_region_gt()
    near_blob = np.random.default_rng(14).normal(size=(6, 3)) * 0.05
    near_line = gt.points[part.sparse_indices][:5] + 0.1
    total, parts, empty = local_loss(near_blob, near_line, gt, partition=part)
    assert empty is False
    assert parts["cd_p1_s"] == 0.0 and parts["fe_p1_s"] == 0.0
    assert parts["cd_p2_s"] > 0.0
    np.testing.assert_allclose(float(total.data), parts["cd_p2_s"], rtol=1e-12)


def test_local_loss_partition_argument_consistent():
    gt, part = two_region_gt()
    rng = np.random.default_rng(15)
    p1, p2 = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    with_part, _, _ = local_loss(p1, p2, gt, partition=part)
    without, _, _ = local_loss(p1, p2, gt)
    assert float(with_part.data) == float(without.data)


# ---------------------------------------------------------------------------
# total_loss schedule
# ---------------------------------------------------------------------------

def exact_lg_instance():
    """Single-point clouds whose global loss is exactly 15 * 2**-10.

    (3s, 4s, 0) with s a power of two gives an exactly representable distance
    5s, so every term and their sum stay exact in float64.
    """
    s = 2.0**-10
    p1 = Tensor(np.array([[3 * s, 4 * s, 0.0]]))
    p2 = Tensor(np.array([[3 * s, 4 * s, 0.0]]))
    gt = PointCloud(np.zeros((1, 3)))
    part = DensityPartition(dense_indices=np.array([0]),
                            sparse_indices=np.array([], dtype=np.intp),
                            k=1, threshold=0.0)
    return p1, p2, gt, part, 15 * s


def test_schedule_global_branch_above_epsilon():
    p1, p2, gt, part, lg = exact_lg_instance()
    cfg = LossConfig(epsilon=lg * 0.999, gamma=0.5)
    bd = total_loss(p1, p2, gt, cfg, partition=part)
    assert bd.branch == GLOBAL_ONLY
    assert bd.l_g == lg
    assert bd.total == lg


def test_schedule_blends_at_exact_threshold():
    # the schedule keeps the global term only while l_g strictly exceeds eps
    p1, p2, gt, part, lg = exact_lg_instance()
    cfg = LossConfig(epsilon=lg, gamma=0.5)
    bd = total_loss(p1, p2, gt, cfg, partition=part)
    assert bd.branch == BLENDED
    assert bd.total == 0.5 * lg + 0.5 * bd.l_l


@pytest.mark.parametrize("gamma", [0.0, 0.5, 1.0])
def test_schedule_blend_bit_exact(gamma):
    gt, part = two_region_gt()
    rng = np.random.default_rng(16)
    p1 = gt.points + rng.normal(size=gt.points.shape) * 1e-4
    p2 = gt.points + rng.normal(size=gt.points.shape) * 1e-4
    bd = total_loss(p1, p2, gt, LossConfig(gamma=gamma), partition=part)
    assert bd.l_g <= 2.7e-3
    assert bd.branch == BLENDED
    assert bd.total == (1.0 - gamma) * bd.l_g + gamma * bd.l_l
    if gamma == 0.0:
        assert bd.total == bd.l_g


def test_schedule_default_epsilon_global_when_far():
    gt, part = two_region_gt()
    rng = np.random.default_rng(17)
    p1, p2 = rng.normal(size=(10, 3)) + 3.0, rng.normal(size=(10, 3)) + 3.0
    bd = total_loss(p1, p2, gt, LossConfig(), partition=part)
    assert bd.l_g > 2.7e-3
    assert bd.branch == GLOBAL_ONLY
    assert bd.total == bd.l_g


def test_total_loss_parts_consistent():
    gt, part = two_region_gt()
    rng = np.random.default_rng(18)
    p1, p2 = rng.normal(size=(9, 3)), rng.normal(size=(11, 3))
    bd = total_loss(p1, p2, gt, partition=part)
    np.testing.assert_allclose(bd.l_g, bd.cd_p1 + bd.fe_p1 + bd.cd_p2,
                               rtol=1e-12)
    np.testing.assert_allclose(bd.l_l, bd.cd_p1_s + bd.fe_p1_s + bd.cd_p2_s,
                               rtol=1e-12)


def test_total_loss_gradient_matches_fd_both_branches():
    # well-separated generic points keep nearest assignments stable under
    # the finite-difference step; the region split itself is arbitrary here
    rng = np.random.default_rng(19)
    gt = PointCloud(rng.normal(size=(14, 3)) * 2.0)
    part = DensityPartition(dense_indices=np.arange(8),
                            sparse_indices=np.arange(8, 14), k=8,
                            threshold=0.0)
    # noise scales sit well above FD_STEP so the sqrt-norm curvature does
    # not leak truncation error into the central differences
    for scale, branch in ((0.3, GLOBAL_ONLY), (5e-3, BLENDED)):
        p1 = Tensor(gt.points + rng.normal(size=gt.points.shape) * scale,
                    requires_grad=True)
        p2 = Tensor(gt.points + rng.normal(size=gt.points.shape) * scale,
                    requires_grad=True)
        bd = total_loss(p1, p2, gt, LossConfig(epsilon=0.05), partition=part)
        assert bd.branch == branch
        backward(bd.tensor)
        for t in (p1, p2):
            want = fd_grad(
                lambda: total_loss(p1, p2, gt, LossConfig(epsilon=0.05),
                                   partition=part).total,
                t.data)
            np.testing.assert_allclose(t.grad, want, rtol=1e-4, atol=1e-6)


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(epsilon=0.0)
    with pytest.raises(ConfigError):
        LossConfig(gamma=-0.1)
    with pytest.raises(ConfigError):
        LossConfig(gamma=1.1)
    assert LossConfig().to_dict() == {"epsilon": 2.7e-3, "gamma": 0.5}


def test_breakdown_rejects_inconsistent_parts():
    with pytest.raises(ConfigError):
        LossBreakdown(cd_p1=1.0, fe_p1=1.0, cd_p2=1.0,
                      cd_p1_s=0.0, fe_p1_s=0.0, cd_p2_s=0.0,
                      l_g=2.0, l_l=0.0, total=2.0, branch=GLOBAL_ONLY,
                      sparse_empty=False, tensor=Tensor(2.0))
