"""Synthetic 3D face corpora and single-sample-gallery identification."""

from .bending import (
    BendingMatrix,
    PairSelection,
    ShapeDistanceMatrix,
    bending_energy,
    bending_matrix,
    farthest_point_indices,
    pairwise_distances,
    select_pairs,
    shape_distance,
)
from .core import (
    CorrespondedFace,
    FaceSet,
    PointCloud,
    apply_rigid,
    compute_normals,
    from_spherical,
    to_spherical,
)
from .evalharness import (
    EvalManifest,
    FeatureSet,
    OpenWorldSpec,
    ScoreMatrix,
    cmc,
    load_features,
    make_open_world_folds,
    match_all,
    open_world_eval,
    openness,
    roc,
    save_features,
)
from .geomimage import (
    FaceImage3C,
    GridSpec,
    detect_nosetip,
    fit_grid_surface,
    make_three_channel,
    normalize_u8,
)
from .io import load_cloud, load_face_set, save_cloud
from .kernelstats import DepthField, KernelReport, keypoint_density, window_variance_stats
from .synthesis import SynthesisPlan, generate_identities, interpolate_pair
from .views import CameraPose, ViewCloud, camera_poses, hidden_point_removal, render_view

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
