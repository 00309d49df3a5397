"""Differentiable embedded-deformation-graph solver for non-rigid RGB-D tracking."""

from .energy import CorrespondenceSet, ResidualSystem, assemble
from .errors import (
    BehindCameraError,
    EmptyMeshError,
    GenerationError,
    InvalidInputError,
    SingularSystemError,
    SolverDivergenceError,
    TrackingError,
    UnderdeterminedSystemError,
    UnsupportedPointError,
)
from .geometry import (
    CameraIntrinsics,
    DepthImage,
    PointImage,
    backproject,
    bilinear_sample,
    point_image_from_depth,
    project,
    project_jacobian,
)
from .graphbuild import DeformationGraph, SkinningTable, compute_skinning
from .diffsolver import (
    InputGradients,
    MotionGrad,
    linear_solve_backward,
    loss_corr,
    loss_graph,
    loss_warp,
    loss_weight_supervised,
    optimize_weights,
    solver_backward,
)
from .solver import (
    SolveResult,
    SolverConfig,
    evaluate_metrics,
    filter_clusters,
    gauss_newton_solve,
)
from .synth import SyntheticScene, add_noise, generate_scene, inject_outliers
from .tracker import (
    KeyframePolicy,
    bidirectional_filter,
    multi_keyframe_filter,
    threshold_filter,
    track_sequence,
)
from .warpfield import GraphMotion, apply_increment, exp_so3, hat, warp_cloud, warp_point

__version__ = "0.1.0"
