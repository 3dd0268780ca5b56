from .alignment import AlignStats, align_chunks, chain_chunks, relative_from_cameras, umeyama, weighted_rms
from .fusion import frame_owners, frame_poses, fuse, voxel_downsample
from .loops import LoopCandidate, detect_loops
from .posegraph import Edge, PoseGraph, PoseGraphResult, edge_residual, optimize_pose_graph
from .sim3 import Sim3, hat, sim3_exp, sim3_log, so3_exp, so3_log

__all__ = [
    "AlignStats",
    "Edge",
    "LoopCandidate",
    "PoseGraph",
    "PoseGraphResult",
    "Sim3",
    "align_chunks",
    "chain_chunks",
    "detect_loops",
    "edge_residual",
    "frame_owners",
    "frame_poses",
    "fuse",
    "hat",
    "optimize_pose_graph",
    "relative_from_cameras",
    "sim3_exp",
    "sim3_log",
    "so3_exp",
    "so3_log",
    "umeyama",
    "voxel_downsample",
    "weighted_rms",
]
