"""End-to-end chunked reconstruction.

Chunks are predicted (with memory synchronization when the predictor is a
backbone), adjacent chunks are aligned on their shared frames and chained,
loop constraints are added from frame-descriptor retrieval, the chunk graph
is refined, and the per-frame outputs are fused into one cloud.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone
from .errors import AlignmentError, GeometryError, ScalrError
from .evaluation import Trajectory
from .gcs import partition, run_pipeline
from .geometry import (
    Edge,
    PoseGraph,
    align_chunks,
    chain_chunks,
    detect_loops,
    frame_owners,
    frame_poses,
    fuse,
    optimize_pose_graph,
    relative_from_cameras,
)

__all__ = [
    "PipelineError",
    "LoopEdge",
    "Reconstruction",
    "reconstruct",
    "select_loops",
    "loop_edge",
    "trajectory_from",
]

log = logging.getLogger(__name__)


class PipelineError(ScalrError):
    """Reconstruction could not proceed (e.g. every alignment route failed)."""


@dataclass
class LoopEdge:
    frame_a: int
    frame_b: int
    chunk_a: int
    chunk_b: int
    score: float
    edge: Edge


@dataclass
class Reconstruction:
    partition: object
    predictions: list
    pairwise: list
    pairwise_stats: list
    chain: list
    transforms: list
    loops: list
    graph_result: object
    trajectory: Trajectory
    points: np.ndarray
    conf: np.ndarray
    trace: list = field(default_factory=list)
    fast_weights: dict = field(default_factory=dict)

    def chain_trajectory(self):
        return trajectory_from(self.predictions, self.chain)


def trajectory_from(predictions, transforms):
    frames, rots, trans = frame_poses(predictions, transforms)
    return Trajectory(frames.astype(np.float64), rots, trans)


def _align_pair(a, b, conf_floor):
    try:
        return align_chunks(a, b, conf_floor=conf_floor)
    except GeometryError as exc:
        log.info("point alignment failed (%s); using camera poses", exc)
    try:
        return relative_from_cameras(a, b), None
    except GeometryError as exc:
        raise PipelineError(f"cannot align chunks: {exc}") from None


def select_loops(candidates, window, max_loops):
    """Greedy suppression: keep the best pairs that are not near an accepted pair."""
    kept = []
    for c in candidates:
        if any(abs(c.i - k.i) < window and abs(c.j - k.j) < window for k in kept):
            continue
        kept.append(c)
        if len(kept) >= max_loops:
            break
    return kept


def _window(frame, chunk_frames, half):
    sel = chunk_frames[np.abs(chunk_frames - frame) <= half]
    return sel


def _loop_predictor(predictor, images):
    if hasattr(predictor, "predict_loop"):
        return predictor.predict_loop
    if isinstance(predictor, Backbone):
        return lambda frames: predictor.predict(np.asarray(images)[frames], frames)
    return predictor


def loop_edge(predict, predictions, owners, cand, half, conf_floor=0.0):
    """Chunk-graph edge for a retrieved frame pair, or None when it is unusable."""
    ka, kb = owners[cand.i], owners[cand.j]
    if abs(ka - kb) <= 1:
        return None
    wa = _window(cand.i, predictions[ka].frames, half)
    wb = _window(cand.j, predictions[kb].frames, half)
    loop_pred = predict(np.concatenate([wa, wb]))
    try:
        to_a, sa = align_chunks(predictions[ka], loop_pred, overlap=wa, conf_floor=conf_floor)
        to_b, sb = align_chunks(predictions[kb], loop_pred, overlap=wb, conf_floor=conf_floor)
    except GeometryError as exc:
        log.info("dropping loop %d-%d: %s", cand.i, cand.j, exc)
        return None
    weight = cand.score * min(sa.inlier_ratio, sb.inlier_ratio)
    edge = Edge(ka, kb, to_a @ to_b.inverse(), weight=weight, kind="loop")
    return LoopEdge(cand.i, cand.j, ka, kb, cand.score, edge)


def reconstruct(
    predictor,
    n_frames,
    chunk_size=60,
    overlap=30,
    workers=1,
    images=None,
    descriptors=None,
    loop_min_gap=None,
    loop_threshold=0.95,
    max_loops=4,
    conf_floor=0.0,
    voxel_size=0.0,
    parallel=False,
    max_iters=50,
):
    """Run the chunked pipeline and return every intermediate product.

    ``descriptors`` (one row per frame) enable loop closure; without them
    the chained transforms are final.
    """
    part = partition(n_frames, chunk_size, overlap)
    run = run_pipeline(images, predictor, part, workers=workers, parallel=parallel)
    preds = run.predictions

    pairwise, stats = [], []
    for k in range(len(preds) - 1):
        rel, st = _align_pair(preds[k], preds[k + 1], conf_floor)
        pairwise.append(rel)
        stats.append(st)
    chain = chain_chunks(pairwise)

    loops = []
    if descriptors is not None and len(preds) > 2:
        min_gap = 2 * chunk_size if loop_min_gap is None else loop_min_gap
        cands = detect_loops(descriptors, min_gap, loop_threshold)
        owners = frame_owners(preds)
        predict = _loop_predictor(predictor, images)
        half = max(1, overlap // 2)
        for cand in select_loops(cands, chunk_size, 10 * max_loops):
            le = loop_edge(predict, preds, owners, cand, half, conf_floor)
            if le is not None:
                loops.append(le)
            if len(loops) >= max_loops:
                break

    result = None
    transforms = chain
    if loops:
        graph = PoseGraph(list(chain))
        for k, rel in enumerate(pairwise):
            graph.add_edge(k, k + 1, rel, 1.0, "adjacent")
        graph.edges.extend(le.edge for le in loops)
        result = optimize_pose_graph(graph, max_iters=max_iters)
        transforms = result.nodes
        log.info("pose graph: %d loops, cost %.3g -> %.3g", len(loops), result.costs[0], result.costs[-1])

    points, conf = fuse(preds, transforms, voxel_size=voxel_size, conf_floor=conf_floor)
    return Reconstruction(
        partition=part,
        predictions=preds,
        pairwise=pairwise,
        pairwise_stats=stats,
        chain=chain,
        transforms=transforms,
        loops=loops,
        graph_result=result,
        trajectory=trajectory_from(preds, transforms),
        points=points,
        conf=conf,
        trace=run.trace,
        fast_weights=run.fast_weights,
    )
