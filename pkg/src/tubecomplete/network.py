"""Completion model: stacked set-abstraction/transformer encoder and a
coarse-to-fine refinement decoder.

The encoder alternates PointNet-style set abstraction (FPS centroids, KNN
grouping, shared MLP, max pool) with single-head self-attention whose logits
carry a relative-position term.  The decoder turns the core cloud P0 into P1
and then P2 by splitting every point into `up_factor` children displaced by
learned offsets; each refine stage fuses the nearest encoder features with
the point coordinates and runs three plain self-attention rounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cps import CpsConfig, select_core_points
from .errors import ConfigError
from .geometry import PointCloud, farthest_point_sampling, knn_indices, nearest_indices

POS_HIDDEN = 16
OFFSET_BOUND = 0.5  # children stay within this many normalized units of the parent


@dataclass(frozen=True)
class TransSAConfig:
    blocks: int = 2
    k_group: int = 16
    centroids: tuple = (512, 128)
    dims: tuple = (128, 256)

    def __post_init__(self):
        if self.blocks < 1:
            raise ConfigError("blocks must be >= 1")
        object.__setattr__(self, "centroids", tuple(int(c) for c in self.centroids))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.centroids) != self.blocks or len(self.dims) != self.blocks:
            raise ConfigError("centroids and dims must list one entry per block")
        if any(c2 >= c1 for c1, c2 in zip(self.centroids, self.centroids[1:])):
            raise ConfigError("centroid counts must be strictly decreasing")
        if any(c < 1 for c in self.centroids) or any(d < 1 for d in self.dims):
            raise ConfigError("centroid counts and dims must be positive")
        if self.k_group < 1:
            raise ConfigError("k_group must be >= 1")


@dataclass(frozen=True)
class RefineConfig:
    up_factor: int = 2
    attention_rounds: int = 3
    hidden_dim: int = 256
    neighbor_feats: int = 4

    def __post_init__(self):
        if self.up_factor < 1:
            raise ConfigError("up_factor must be >= 1")
        if self.attention_rounds < 1:
            raise ConfigError("attention_rounds must be >= 1")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")
        if self.neighbor_feats < 0:
            raise ConfigError("neighbor_feats must be >= 0")


@dataclass(frozen=True)
class ModelConfig:
    n_complete: int = 4096
    stages: int = 2
    transsa: TransSAConfig = field(default_factory=TransSAConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    cps: CpsConfig = field(default_factory=CpsConfig)

    def __post_init__(self):
        if self.stages not in (1, 2):
            raise ConfigError("stages must be 1 or 2")
        total_up = self.refine.up_factor ** 2
        if self.n_complete % total_up != 0:
            raise ConfigError(
                f"n_complete={self.n_complete} not divisible by up_factor^2={total_up}"
            )

    @property
    def n0(self) -> int:
        """Core cloud size: final size divided by the total upsampling."""
        return self.n_complete // (self.refine.up_factor ** 2)

    def stage_up_factors(self):
        up = self.refine.up_factor
        return (up, up) if self.stages == 2 else (up * up,)

    def to_dict(self):
        return {
            "n_complete": self.n_complete,
            "stages": self.stages,
            "transsa": {
                "blocks": self.transsa.blocks, "k_group": self.transsa.k_group,
                "centroids": list(self.transsa.centroids),
                "dims": list(self.transsa.dims),
            },
            "refine": {
                "up_factor": self.refine.up_factor,
                "attention_rounds": self.refine.attention_rounds,
                "hidden_dim": self.refine.hidden_dim,
                "neighbor_feats": self.refine.neighbor_feats,
            },
            "cps": {
                "n0_fraction": self.cps.n0_fraction,
                "k_density": self.cps.k_density,
                "sparse_boost": self.cps.sparse_boost,
                "endpoint_radius": self.cps.endpoint_radius,
            },
        }

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        d = dict(d)
        transsa = d.get("transsa", {})
        refine = d.get("refine", {})
        cps = d.get("cps", {})
        return cls(
            n_complete=int(d.get("n_complete", 4096)),
            stages=int(d.get("stages", 2)),
            transsa=TransSAConfig(**transsa),
            refine=RefineConfig(**refine),
            cps=CpsConfig(**cps),
        )


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _param_specs(cfg: ModelConfig):
    """(name, shape, init kind) for every parameter, in creation order."""
    specs = []
    t = cfg.transsa
    for b in range(t.blocks):
        feat_in = 3 if b == 0 else t.dims[b - 1]
        d = t.dims[b]
        specs += [
            (f"enc{b}.sa.w1", (3 + feat_in, d), "kaiming"),
            (f"enc{b}.sa.b1", (d,), "zero"),
            (f"enc{b}.sa.w2", (d, d), "kaiming"),
            (f"enc{b}.sa.b2", (d,), "zero"),
            (f"enc{b}.tr.wq", (d, d), "kaiming"),
            (f"enc{b}.tr.wk", (d, d), "kaiming"),
            (f"enc{b}.tr.wv", (d, d), "kaiming"),
            (f"enc{b}.tr.wo", (d, d), "kaiming"),
            (f"enc{b}.tr.pos.w1", (3, POS_HIDDEN), "kaiming"),
            (f"enc{b}.tr.pos.b1", (POS_HIDDEN,), "zero"),
            (f"enc{b}.tr.pos.w2", (POS_HIDDEN, 1), "kaiming"),
            (f"enc{b}.tr.pos.b2", (1,), "zero"),
        ]
    h = cfg.refine.hidden_dim
    ups = cfg.stage_up_factors()
    for i, up in enumerate(ups):
        d_level = t.dims[_stage_level(cfg, i)]
        specs += [
            (f"ref{i}.fuse.w1", (3 + d_level, h), "kaiming"),
            (f"ref{i}.fuse.b1", (h,), "zero"),
            (f"ref{i}.fuse.w2", (h, h), "kaiming"),
            (f"ref{i}.fuse.b2", (h,), "zero"),
        ]
        for r in range(cfg.refine.attention_rounds):
            specs += [
                (f"ref{i}.attn{r}.wq", (h, h), "kaiming"),
                (f"ref{i}.attn{r}.wk", (h, h), "kaiming"),
                (f"ref{i}.attn{r}.wv", (h, h), "kaiming"),
                (f"ref{i}.attn{r}.wo", (h, h), "kaiming"),
            ]
        g = 3 * cfg.refine.neighbor_feats
        specs += [
            (f"ref{i}.pp.w1", (3, h), "kaiming"),
            (f"ref{i}.pp.b1", (h,), "zero"),
            (f"ref{i}.pp.w2", (h, h), "kaiming"),
            (f"ref{i}.pp.b2", (h,), "zero"),
            (f"ref{i}.out.w1", (2 * h + g, h), "kaiming"),
            (f"ref{i}.out.b1", (h,), "zero"),
            (f"ref{i}.out.w2", (h + g, 3 * up), "zero"),  # identity at init
            (f"ref{i}.out.b2", (3 * up,), "zero"),
        ]
    return specs


def _stage_level(cfg: ModelConfig, stage: int) -> int:
    """Encoder level feeding a refine stage.

    Two-stage models consume level 0 then level 1; a single-stage model
    consumes the deepest level.
    """
    if cfg.stages == 1:
        return cfg.transsa.blocks - 1
    return min(stage, cfg.transsa.blocks - 1)


def init_params(cfg: ModelConfig, seed: int) -> dict:
    """Named parameter tensors: Kaiming-uniform weights, zero biases, and a
    zeroed final offset layer so the first forward is an identity upsample."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in _param_specs(cfg):
        if kind == "zero":
            data = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def check_params(cfg: ModelConfig, params: dict):
    """Raise when the parameter set does not match the config's shapes."""
    specs = {name: shape for name, shape, _ in _param_specs(cfg)}
    for name, shape in specs.items():
        if name not in params:
            raise ConfigError(f"missing parameter '{name}'")
        if tuple(params[name].shape) != shape:
            raise ConfigError(
                f"parameter '{name}' has shape {tuple(params[name].shape)}, "
                f"config expects {shape}"
            )
    extra = set(params) - set(specs)
    if extra:
        raise ConfigError(f"unexpected parameters: {sorted(extra)}")


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def _mlp2(x: Tensor, params, prefix: str) -> Tensor:
    """Two linear layers with relu after each (the shared per-point MLP)."""
    y = ad.relu(ad.add_bias(ad.matmul(x, params[f"{prefix}.w1"]),
                            params[f"{prefix}.b1"]))
    return ad.relu(ad.add_bias(ad.matmul(y, params[f"{prefix}.w2"]),
                               params[f"{prefix}.b2"]))


def _lex_start(points: np.ndarray) -> int:
    """Lexicographically smallest row, so FPS seeding is a function of the
    point set rather than its ordering."""
    return int(np.lexsort((points[:, 2], points[:, 1], points[:, 0]))[0])


def sa_block(features: Tensor | None, coords: np.ndarray, centroids: int,
             k: int, params: dict, prefix: str, cache: dict | None = None):
    """Set abstraction: FPS centroids, KNN groups, shared MLP, max pool.

    `features` of None means the raw coordinates double as features (the
    first block).  Returns (F_SA tensor (centroids, d), C_SA array).
    """
    n = len(coords)
    if centroids > n:
        raise ConfigError(f"{prefix}: {centroids} centroids exceed {n} points")
    if k > n:
        raise ConfigError(f"{prefix}: group size {k} exceeds {n} points")
    coords_t = Tensor(coords)
    feats = coords_t if features is None else features
    joined = ad.concat([coords_t, feats], axis=1)  # (n, 3 + d_in)

    key = f"{prefix}.idx"
    if cache is not None and key in cache:
        cidx, groups = cache[key]
    else:
        cidx = farthest_point_sampling(coords, centroids, start=_lex_start(coords))
        groups = knn_indices(coords, coords[cidx], k)
        if cache is not None:
            cache[key] = (cidx, groups)

    grouped = ad.gather(joined, groups)            # (centroids, k, 3 + d_in)
    flat = ad.reshape(grouped, (centroids * k, joined.shape[1]))
    feat = _mlp2(flat, params, f"{prefix}.sa")
    feat = ad.reshape(feat, (centroids, k, feat.shape[1]))
    pooled = ad.reduce_max(feat, axis=1)           # (centroids, d)
    return pooled, coords[cidx]


def transformer_block(f_sa: Tensor, c_sa: np.ndarray, params: dict, prefix: str) -> Tensor:
    """Single-head self-attention with relative-position logits.

    logits = QK^T / sqrt(d) + mlp(C_i - C_j); output is layer-normalized
    residual plus the projected attention value.
    """
    m, d = f_sa.shape
    if len(c_sa) != m:
        raise ConfigError(f"{prefix}: feature rows {m} != coordinate rows {len(c_sa)}")
    q = ad.matmul(f_sa, params[f"{prefix}.wq"])
    k = ad.matmul(f_sa, params[f"{prefix}.wk"])
    v = ad.matmul(f_sa, params[f"{prefix}.wv"])
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d))

    rel = c_sa[:, None, :] - c_sa[None, :, :]
    pos_in = Tensor(rel.reshape(m * m, 3))
    pos = ad.relu(ad.add_bias(ad.matmul(pos_in, params[f"{prefix}.pos.w1"]),
                              params[f"{prefix}.pos.b1"]))
    pos = ad.add_bias(ad.matmul(pos, params[f"{prefix}.pos.w2"]),
                      params[f"{prefix}.pos.b2"])
    logits = ad.add(logits, ad.reshape(pos, (m, m)))

    attn = ad.softmax(logits, axis=-1)
    mixed = ad.matmul(ad.matmul(attn, v), params[f"{prefix}.wo"])
    return ad.layer_norm(ad.add(f_sa, mixed))


def extractor_forward(cloud, cfg: TransSAConfig, params: dict,
                      cache: dict | None = None):
    """Stacked (SA -> transformer) blocks; returns every level's (F, C)."""
    coords = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if len(coords) < cfg.centroids[0]:
        raise ConfigError(
            f"input has {len(coords)} points, first level needs {cfg.centroids[0]}"
        )
    levels = []
    features = None
    for b in range(cfg.blocks):
        features, coords = sa_block(
            features, coords, cfg.centroids[b], min(cfg.k_group, len(coords)),
            params, f"enc{b}", cache,
        )
        features = transformer_block(features, coords, params, f"enc{b}.tr")
        levels.append((features, coords))
    return levels


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

def neighbor_displacements(coords: np.ndarray, m: int) -> np.ndarray:
    """(n, 3m) displacements from each point to its m nearest other points.

    Ascending distance, ties to the lower index; zero-padded when fewer than
    m other points exist.  Points at a fragment end see neighbours on one
    side only, so these rows expose exactly the local anisotropy the offset
    layer must react to.  The block is divided by the mean positive neighbour
    distance so its entries are O(1); Adam steps every zero-initialized
    coordinate at the same rate, and unit-scale inputs keep the coefficients
    it must reach small.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    out = np.zeros((n, 3 * m))
    if m == 0 or n < 2:
        return out
    mm = min(m, n - 1)
    idx = knn_indices(coords, coords, mm + 1)
    rows = np.arange(n)
    # the self column is whichever slot holds the query (coincident points
    # may push it past slot 0, or out of the window entirely)
    not_self = idx != rows[:, None]
    order = np.argsort(~not_self, axis=1, kind="stable")[:, :mm]
    keep = np.take_along_axis(idx, order, axis=1)
    disp = coords[keep] - coords[:, None, :]
    dist = np.sqrt((disp ** 2).sum(axis=2))
    pos = dist[dist > 0]
    scale = float(pos.mean()) if pos.size else 1.0
    out[:, : 3 * mm] = disp.reshape(n, 3 * mm) / scale
    return out


def refine_module(p: Tensor, f_level: Tensor, c_level: np.ndarray,
                  cfg: RefineConfig, params: dict, prefix: str, up: int,
                  nn_cache: np.ndarray | None = None,
                  geo_cache: np.ndarray | None = None) -> Tensor:
    """One refinement stage: (n, 3) points in, (n * up, 3) points out.

    Branch A interpolates encoder features onto the points (nearest centroid),
    concatenates coordinates, applies an MLP and the self-attention rounds;
    branch B is a coordinate MLP.  Their concatenation drives the offset head.
    The final layer additionally sees each point's raw neighbour displacements
    (no gradient through them); that keeps gap-directed offsets linear in the
    zero-initialized layer, which otherwise trains far too slowly.  A tanh
    keeps every child within OFFSET_BOUND of its parent.
    """
    n = p.shape[0]
    if n == 0:
        raise ConfigError(f"{prefix}: empty point set")
    if nn_cache is None:
        nn_idx, _ = nearest_indices(p.data, c_level)
    else:
        nn_idx = nn_cache
    feat = ad.gather(f_level, nn_idx)              # (n, d_level)
    a = _mlp2(ad.concat([p, feat], axis=1), params, f"{prefix}.fuse")
    h = a.shape[1]
    for r in range(cfg.attention_rounds):
        pfx = f"{prefix}.attn{r}"
        q = ad.matmul(a, params[f"{pfx}.wq"])
        k = ad.matmul(a, params[f"{pfx}.wk"])
        v = ad.matmul(a, params[f"{pfx}.wv"])
        logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(h))
        mixed = ad.matmul(ad.matmul(ad.softmax(logits, axis=-1), v),
                          params[f"{pfx}.wo"])
        a = ad.layer_norm(ad.add(a, mixed))
    b = _mlp2(p, params, f"{prefix}.pp")
    parts = [a, b]
    if cfg.neighbor_feats > 0:
        if geo_cache is None:
            geo_cache = neighbor_displacements(p.data, cfg.neighbor_feats)
        # the displacement block enters both final layers: the hidden layer
        # can gate on it, the zero-initialized layer can use it directly
        parts.append(Tensor(geo_cache))
    # leaky activation: the offset head must not die when offsets sit at zero
    head = ad.leaky_relu(ad.add_bias(ad.matmul(ad.concat(parts, axis=1),
                                               params[f"{prefix}.out.w1"]),
                                     params[f"{prefix}.out.b1"]))
    if cfg.neighbor_feats > 0:
        head = ad.concat([head, parts[-1]], axis=1)
    raw = ad.add_bias(ad.matmul(head, params[f"{prefix}.out.w2"]),
                      params[f"{prefix}.out.b2"])   # (n, 3 * up)
    offsets = ad.reshape(ad.scale(ad.tanh(raw), OFFSET_BOUND), (n * up, 3))
    parents = ad.gather(p, np.repeat(np.arange(n), up))
    return ad.add(parents, offsets)


def model_forward(cloud: PointCloud, cfg: ModelConfig, params: dict,
                  cache: dict | None = None):
    """Full pass: core selection, feature extraction, staged refinement.

    Returns (P0, P1, P2) tensors.  A single-stage model returns its one
    refined cloud as both P1 and P2.
    """
    n0 = cfg.n0
    if len(cloud) < n0:
        raise ConfigError(f"input has {len(cloud)} points, core selection needs {n0}")
    if cache is not None and "cps" in cache:
        sel_indices = cache["cps"]
    else:
        sel = select_core_points(cloud, n0, cfg.cps)
        sel_indices = sel.indices
        if cache is not None:
            cache["cps"] = sel_indices
    p0 = Tensor(cloud.points[sel_indices])

    levels = extractor_forward(cloud, cfg.transsa, params, cache)

    outputs = []
    p = p0
    for i, up in enumerate(cfg.stage_up_factors()):
        f_level, c_level = levels[_stage_level(cfg, i)]
        nn_cache = geo_cache = None
        if i == 0 and cache is not None:
            # stage-0 parents are the fixed core cloud, so both the nearest
            # centroid and the neighbour displacements are input constants
            key = "ref0.nn"
            if key not in cache:
                cache[key], _ = nearest_indices(p.data, c_level)
            nn_cache = cache[key]
            gkey = "ref0.geo"
            if gkey not in cache:
                cache[gkey] = neighbor_displacements(p.data, cfg.refine.neighbor_feats)
            geo_cache = cache[gkey]
        p = refine_module(p, f_level, c_level, cfg.refine, params,
                          f"ref{i}", up, nn_cache, geo_cache)
        outputs.append(p)
    if len(outputs) == 1:
        return p0, outputs[0], outputs[0]
    return p0, outputs[0], outputs[1]


def complete_cloud(cloud: PointCloud, cfg: ModelConfig, params: dict) -> PointCloud:
    """Inference: run the model and label each output point like its nearest
    input point.  No gradient graph is recorded."""
    from .autodiff import no_grad

    with no_grad():
        _p0, _p1, p2 = model_forward(cloud, cfg, params)
    labels = None
    if cloud.labels is not None:
        idx, _ = nearest_indices(p2.data, cloud.points)
        labels = cloud.labels[idx]
    return PointCloud(p2.data, labels)
