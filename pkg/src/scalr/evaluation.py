"""Trajectory and reconstruction metrics.

Pose metrics are computed after a Sim(3) alignment of the predicted camera
positions to the ground truth. RRE/RTE follow the KITTI odometry devkit:
relative-pose errors over fixed path-length segments, normalised per 100 m.
Reconstruction metrics use exact nearest neighbours.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import GeometryError, InputError, ShapeError
from .geometry import umeyama

__all__ = [
    "Trajectory",
    "MetricsReport",
    "THRESHOLD_PRESETS",
    "DEFAULT_SEGMENTS",
    "resolve_threshold",
    "align_trajectory",
    "ate",
    "rre_rte",
    "KdTree",
    "build_kdtree",
    "nn_dist",
    "chamfer",
    "precision_recall_f1",
    "point_distance",
    "pose_report",
    "recon_report",
]

THRESHOLD_PRESETS = {"eth3d": 0.25, "vkitti": 1.0, "spires": 4.0, "oxford_spires": 4.0}
DEFAULT_SEGMENTS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


def resolve_threshold(value):
    """A preset name or a positive number."""
    if isinstance(value, str):
        key = value.strip().lower()
        if key in THRESHOLD_PRESETS:
            return THRESHOLD_PRESETS[key]
        try:
            value = float(key)
        except ValueError:
            raise InputError(
                f"unknown threshold preset {value!r}; choose one of {sorted(THRESHOLD_PRESETS)}"
            ) from None
    value = float(value)
    if not value > 0:
        raise InputError(f"threshold must be positive, got {value}")
    return value


@dataclass
class Trajectory:
    """Camera-to-world poses indexed by frame."""

    timestamps: np.ndarray
    rotations: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        n = len(self.timestamps)
        if self.rotations.shape != (n, 3, 3) or self.positions.shape != (n, 3):
            raise ShapeError("trajectory arrays disagree on frame count")
        if n > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise InputError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.timestamps)

    def transformed(self, transform):
        rots = np.einsum("ij,njk->nik", transform.r, self.rotations)
        return Trajectory(self.timestamps.copy(), rots, transform.apply(self.positions))

    def path_distances(self):
        steps = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])


def _check_pair(pred, gt, minimum=1):
    if len(pred) != len(gt):
        raise ShapeError(f"trajectory lengths differ: {len(pred)} vs {len(gt)}")
    if len(gt) < minimum:
        raise InputError(f"need at least {minimum} frames, got {len(gt)}")


def align_trajectory(pred, gt):
    """Sim(3) mapping predicted positions onto ground-truth positions."""
    _check_pair(pred, gt, 3)
    return umeyama(pred.positions, gt.positions, with_scale=True)


def ate(pred, gt, align=True):
    """RMSE of position residuals, after Sim(3) alignment unless ``align`` is false."""
    _check_pair(pred, gt, 3 if align else 1)
    p = align_trajectory(pred, gt).apply(pred.positions) if align else pred.positions
    return float(np.sqrt(np.mean(np.sum((p - gt.positions) ** 2, axis=1))))


def _rotation_angle(r):
    c = np.clip(0.5 * (np.trace(r) - 1.0), -1.0, 1.0)
    s = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.arctan2(s, c))


def rre_rte(pred, gt, segment_lengths=DEFAULT_SEGMENTS, align=True, step=1):
    """Mean relative rotation (deg/100 m) and translation (m/100 m) error.

    Returns ``(None, None)`` when the ground-truth path is shorter than the
    smallest segment.
    """
    _check_pair(pred, gt, 2)
    if align:
        pred = pred.transformed(align_trajectory(pred, gt))
    dist = gt.path_distances()
    r_errs, t_errs = [], []
    n = len(gt)
    for first in range(0, n, step):
        for length in segment_lengths:
            last = int(np.searchsorted(dist, dist[first] + length, side="left"))
            if last >= n:
                continue
            rg = gt.rotations[first].T @ gt.rotations[last]
            tg = gt.rotations[first].T @ (gt.positions[last] - gt.positions[first])
            rp = pred.rotations[first].T @ pred.rotations[last]
            tp = pred.rotations[first].T @ (pred.positions[last] - pred.positions[first])
            # error pose = inv(delta_pred) @ delta_gt
            re = rp.T @ rg
            te = rp.T @ (tg - tp)
            r_errs.append(np.degrees(_rotation_angle(re)) / length * 100.0)
            t_errs.append(np.linalg.norm(te) / length * 100.0)
    if not r_errs:
        return None, None
    return float(np.mean(r_errs)), float(np.mean(t_errs))


def point_distance(a, b):
    """Euclidean distance with a fixed summation order ``(dx^2 + dy^2) + dz^2``."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return np.sqrt((d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]) + d[..., 2] * d[..., 2])


class KdTree:
    """Exact nearest-neighbour index; ties resolve to the lowest point index."""

    def __init__(self, points):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ShapeError(f"points must be (n, 3), got {points.shape}")
        if len(points) == 0:
            raise InputError("cannot build a tree on an empty cloud")
        self.points = points
        self._tree = cKDTree(points)

    def __len__(self):
        return len(self.points)

    def query(self, queries, exact_ties=True):
        """Distances and indices of the nearest stored point for each query.

        With ``exact_ties=False`` near-ties are not re-resolved, which is much
        faster on clouds with duplicated points; distances are unaffected.
        """
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = 2 if len(self.points) > 1 and exact_ties else 1
        d, idx = self._tree.query(q, k=k)
        if k == 1:
            d, idx = d[:, None], idx[:, None]
        best = idx[:, 0].copy()
        ambiguous = np.flatnonzero(d[:, 1] <= d[:, 0] * (1 + 1e-9) + 1e-300) if k == 2 else []
        for i in ambiguous:
            radius = d[i, 0] * (1 + 1e-9) + 1e-300
            cand = np.array(sorted(self._tree.query_ball_point(q[i], radius)), dtype=np.int64)
            if len(cand) == 0:
                continue
            cd = point_distance(self.points[cand], q[i])
            best[i] = cand[np.flatnonzero(cd == cd.min())[0]]
        return point_distance(self.points[best], q), best


def build_kdtree(points):
    return KdTree(points)


def nn_dist(tree, query):
    """Nearest-neighbour distance(s) from ``query`` to the tree's points."""
    q = np.asarray(query, dtype=np.float64)
    dist, _ = tree.query(q)
    return float(dist[0]) if q.ndim == 1 else dist


def _cloud(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ShapeError(f"{name} must be (n, 3), got {a.shape}")
    if len(a) == 0:
        raise InputError(f"{name} is empty")
    return a


def _both_ways(p, g):
    p = _cloud(p, "prediction")
    g = _cloud(g, "ground truth")
    return KdTree(g).query(p, exact_ties=False)[0], KdTree(p).query(g, exact_ties=False)[0]


def chamfer(p, g):
    """Average of accuracy (P to G) and completeness (G to P)."""
    acc, comp = _both_ways(p, g)
    return 0.5 * (float(acc.mean()) + float(comp.mean()))


def precision_recall_f1(p, g, d):
    d = resolve_threshold(d)
    acc, comp = _both_ways(p, g)
    precision = float(np.mean(acc < d))
    recall = float(np.mean(comp < d))
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


@dataclass
class MetricsReport:
    ate_m: float = None
    rre_deg_per_100m: float = None
    rte_m_per_100m: float = None
    chamfer: float = None
    precision: float = None
    recall: float = None
    f1: float = None
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: data.get(k) for k in cls.__dataclass_fields__ if k != "params"},
                   params=dict(data.get("params") or {}))


def pose_report(pred, gt, segment_lengths=DEFAULT_SEGMENTS):
    try:
        rre, rte = rre_rte(pred, gt, segment_lengths)
    except GeometryError:
        rre = rte = None
    return MetricsReport(
        ate_m=ate(pred, gt),
        rre_deg_per_100m=rre,
        rte_m_per_100m=rte,
        params={"alignment": "sim3", "segment_lengths_m": list(segment_lengths)},
    )


def recon_report(p, g, d):
    d = resolve_threshold(d)
    precision, recall, f1 = precision_recall_f1(p, g, d)
    return MetricsReport(
        chamfer=chamfer(p, g),
        precision=precision,
        recall=recall,
        f1=f1,
        params={"threshold_m": d},
    )

