"""Stereo free-space estimation with stochastic occupancy grids.

Stages: disparity -> measurements -> occupancy grid -> free-space
segmentation, plus keypoint flow -> RANSAC background model -> dynamic
objects -> ego-motion -> global bird's-eye map.
"""
from .geometry import CameraIntrinsics, GridGeometry, Measurement, cell_of, triangulate
from .disparity import (
    CovarianceModel,
    DisparityImage,
    MeasurementSet,
    block_match,
    load_disparity,
    measurements_from_disparity,
)
from .occupancy import OccupancyGrid, build_grid, cell_likelihood, gaussian_likelihood
from .segmentation import FreeSpaceProfile, threshold_segment, transition_segment
from .dynamic import (
    FlowSample,
    PolynomialFlowModel,
    RansacConfig,
    classify_dynamic,
    detect_and_match,
    evaluate_model,
    fit_flow_model_ransac,
    fit_least_squares,
)
from .mapping import AffineTransform2D, GlobalMap, estimate_transform, fuse_grid, mark_dynamic_cells

__version__ = "0.1.0"

__all__ = [
    "AffineTransform2D", "CameraIntrinsics", "CovarianceModel", "DisparityImage", "FlowSample", "FreeSpaceProfile",
    "GlobalMap", "GridGeometry", "Measurement", "MeasurementSet", "OccupancyGrid", "PolynomialFlowModel",
    "RansacConfig", "block_match", "build_grid", "cell_likelihood", "cell_of", "classify_dynamic",
    "detect_and_match", "estimate_transform", "evaluate_model", "fit_flow_model_ransac", "fit_least_squares",
    "fuse_grid", "gaussian_likelihood", "load_disparity", "mark_dynamic_cells", "measurements_from_disparity",
    "threshold_segment", "transition_segment", "triangulate",
]
