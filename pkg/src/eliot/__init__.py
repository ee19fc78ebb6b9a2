"""LiDAR odometry toolkit: transformer pose regression over point-cloud
pairs, classic ICP baselines, and a KITTI-style relative-error evaluation
harness, all runnable at desk scale."""

__version__ = "0.1.0"

from .cloud_io import (AugmentParams, PointCloud, SceneSpec, apply_rigid,
                       augment_pair, filter_range, load_kitti_bin,
                       save_kitti_bin, synth_scene)
from .model import EliotNet, NetConfig, positional_encode
from .odometry import Trajectory, accumulate, evaluate

__all__ = [
    "AugmentParams", "EliotNet", "NetConfig", "PointCloud", "SceneSpec",
    "Trajectory", "accumulate", "apply_rigid", "augment_pair", "evaluate",
    "filter_range", "load_kitti_bin", "positional_encode", "save_kitti_bin",
    "synth_scene",
]
