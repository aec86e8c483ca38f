"""Object recognition and 6-DoF pose estimation for RGB-D frames.

A color-embedding classifier names each annotated object, FPFH-based
coarse registration (RANSAC or FGR) aligns stored partial views of that
object to the scene, and point-to-plane ICP refines the pose.
"""
from .cloud import (
    Aabb,
    NormalEstimator,
    PointCloud,
    RigidTransform,
    SpatialIndex,
    VoxelDownsampler,
    apply_transform,
    bounding_box,
    estimate_normals,
    voxel_downsample,
)
from .evaluation import DetectionRecord, iou_3d, is_true_positive, mir, prc_auc
from .fpfh import FeatureSet, FPFHExtractor, compute_fpfh, describe
from .icp import PointToPlaneICP, icp_point_to_plane
from .pipeline import PipelineConfig, run, run_frame
from .recognition import (
    BaselineColorEmbedder,
    LogisticModel,
    LogisticRegressionClassifier,
    ModelDatabase,
    select_best_view,
    select_views,
)
from .registration import FastGlobalRegistration, RANSACRegistration, match_features

__version__ = "0.1.0"
