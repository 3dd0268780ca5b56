"""Merging aligned chunk predictions into a single cloud and trajectory."""
import numpy as np

from ..errors import ShapeError

__all__ = ["frame_owners", "fuse", "voxel_downsample", "frame_poses"]


def frame_owners(predictions):
    """Map each frame to the chunk whose centre is nearest (earlier chunk on ties)."""
    centres = [float(np.mean(p.frames)) for p in predictions]
    owners = {}
    for k, pred in enumerate(predictions):
        for f in pred.frames.tolist():
            if f not in owners:
                owners[f] = k
                continue
            cur = owners[f]
            if abs(f - centres[k]) < abs(f - centres[cur]):
                owners[f] = k
    return dict(sorted(owners.items()))


def voxel_downsample(points, conf, voxel_size):
    """Replace the points of each occupied voxel by their centroid."""
    if voxel_size <= 0 or len(points) == 0:
        return points, conf
    keys = np.floor(points / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, points)
    csum = np.bincount(inverse, weights=conf, minlength=len(counts))
    return sums / counts[:, None], csum / counts


def fuse(predictions, transforms, voxel_size=0.0, conf_floor=0.0):
    """Global point cloud ``(points, confidence)`` from chunk predictions.

    Each frame contributes only through its owning chunk; points with
    confidence at or below zero, or below ``conf_floor``, are dropped.
    """
    if len(predictions) != len(transforms):
        raise ShapeError("need exactly one transform per chunk")
    owners = frame_owners(predictions)
    pts, cfs = [], []
    for f, k in owners.items():
        pred = predictions[k]
        li = pred.local_index(f)
        p = pred.points[li].reshape(-1, 3)
        c = pred.points_conf[li].ravel()
        ok = (c > 0) & (c >= conf_floor) & np.all(np.isfinite(p), axis=1)
        pts.append(transforms[k].apply(p[ok]))
        cfs.append(c[ok])
    points = np.concatenate(pts) if pts else np.zeros((0, 3))
    conf = np.concatenate(cfs) if cfs else np.zeros(0)
    return voxel_downsample(points, conf, voxel_size)


def frame_poses(predictions, transforms):
    """World camera-to-world poses per frame: ``(frames, rotations, translations)``."""
    owners = frame_owners(predictions)
    frames, rots, trans = [], [], []
    for f, k in owners.items():
        pred = predictions[k]
        r_all, t_all = pred.poses()
        li = pred.local_index(f)
        r, t = transforms[k].apply_pose(r_all[li], t_all[li])
        frames.append(f)
        rots.append(r)
        trans.append(t)
    return np.array(frames), np.array(rots), np.array(trans)
