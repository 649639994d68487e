"""Uncertainty-guided open-set LiDAR panoptic segmentation at desk scale.

Polar-grid voxelization, Dirichlet evidential losses, prototype
association, uncertainty-thresholded open-set fusion, and open-set
panoptic metrics, trained end-to-end with a small per-voxel head on
synthetic scenes.
"""

__version__ = "0.1.0"

from .pointcloud_io import (EMPTY, IGNORE, UNKNOWN, Point, PointLabel, Scene,
                            Vocabulary, make_vocabulary, read_kitti_scene,
                            remap_labels, write_kitti_scene)
from .polar_grid import (CenterHeatmap, GridSpec, VoxelGrid, crop_grid,
                         render_center_heatmap, voxelize, voxelize_scene)
from .synth import generate_synthetic_scene

__all__ = [
    "EMPTY", "IGNORE", "UNKNOWN",
    "Point", "PointLabel", "Scene", "Vocabulary",
    "make_vocabulary", "read_kitti_scene", "remap_labels", "write_kitti_scene",
    "CenterHeatmap", "GridSpec", "VoxelGrid", "crop_grid",
    "render_center_heatmap", "voxelize", "voxelize_scene",
    "generate_synthetic_scene",
    "__version__",
]
