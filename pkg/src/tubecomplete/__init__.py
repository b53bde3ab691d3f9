"""Point-cloud completion toolkit for fractured tubular structures.

Submodules: geometry (clouds and spatial queries), voxel (occupancy grids and
morphology), synth (dataset construction), cps (core point selection),
autodiff (reverse-mode tensors), network (the completion model), losses,
metrics, train, cli.
"""

from .autodiff import AdamState, Tensor, adam_step, backward, no_grad
from .cps import CoreSelection, CpsConfig, select_core_points, split_by_reference
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    FractureError,
    NumericError,
    ShapeMismatch,
    TubeError,
)
from .geometry import (
    AORTA,
    CORONARY,
    DensityPartition,
    NeighborGraph,
    NormalizationTransform,
    PointCloud,
    density_partition,
    denormalize,
    endpoints,
    farthest_point_sampling,
    knn,
    load_cloud,
    normalize,
    radius_components,
    save_cloud,
)
from .losses import LossBreakdown, LossConfig, chamfer_l1, fidelity_error, total_loss
from .metrics import CaseMetrics, EvalConfig, EvalReport, aggregate, evaluate_case, f1_score
from .network import ModelConfig, RefineConfig, TransSAConfig, complete_cloud, init_params, model_forward
from .synth import (
    CaseRecord,
    FractureSpec,
    SyntheticTreeSpec,
    build_ground_truth,
    extract_main_trunk,
    generate_cases,
    simulate_fracture,
    synth_vessel_tree,
)
from .voxel import (
    LabeledGrid,
    StructuringElement,
    VoxelGrid,
    close_cavities,
    connected_components_3d,
    dilate,
    erode,
    load_voxels,
    marching_cubes,
    save_voxels,
    skeletonize,
)

__version__ = "0.1.0"
