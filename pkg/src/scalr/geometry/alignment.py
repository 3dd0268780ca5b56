"""Closed-form similarity estimation and overlap-based chunk alignment."""
from dataclasses import dataclass

import numpy as np

from ..errors import AlignmentError, GeometryError, ShapeError
from ..numkit import svd3
from .sim3 import Sim3

__all__ = [
    "umeyama",
    "AlignStats",
    "align_chunks",
    "relative_from_cameras",
    "chain_chunks",
    "weighted_rms",
]

_RANK_TOL = 1e-12


def _as_points(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ShapeError(f"{name} must be (n, 3), got {a.shape}")
    return a


def umeyama(src, dst, weights=None, with_scale=True):
    """Weighted least-squares similarity ``dst ~ s * R @ src + t``.

    Reflections are removed by flipping the sign attached to the smallest
    singular value of the cross-covariance.
    """
    src = _as_points(src, "src")
    dst = _as_points(dst, "dst")
    if src.shape != dst.shape:
        raise ShapeError(f"src {src.shape} and dst {dst.shape} differ")
    n = len(src)
    if n < 3:
        raise GeometryError(f"umeyama needs at least 3 points, got {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise GeometryError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise GeometryError("all weights are zero")
    w = w / total

    mu_s = w @ src
    mu_d = w @ dst
    xs = src - mu_s
    xd = dst - mu_d
    var_s = float(w @ np.einsum("ij,ij->i", xs, xs))

    _, s_src, _ = svd3((xs * w[:, None]).T @ xs)
    if s_src[1] <= _RANK_TOL * max(s_src[0], 1e-300):
        raise GeometryError("degenerate source configuration (collinear or coincident points)")
    cov = (xd * w[:, None]).T @ xs
    u, d, v = svd3(cov)
    if d[1] <= _RANK_TOL * max(d[0], 1e-300):
        raise GeometryError("degenerate cross-covariance (rank < 2)")
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(v) < 0:
        sign[2] = -1.0
    r = (u * sign) @ v.T
    s = float((d * sign).sum() / var_s) if with_scale else 1.0
    if s <= 0:
        raise GeometryError("estimated scale is not positive")
    t = mu_d - s * (r @ mu_s)
    return Sim3(s, r, t)


def weighted_rms(transform, src, dst, weights=None):
    res = np.linalg.norm(dst - transform.apply(src), axis=1)
    if weights is None:
        return float(np.sqrt(np.mean(res**2)))
    w = np.asarray(weights, dtype=np.float64)
    return float(np.sqrt((w * res**2).sum() / w.sum()))


@dataclass
class AlignStats:
    n_initial: int
    n_final: int
    rounds: int
    rms: float
    inlier_ratio: float


def _correspondences(pred_i, pred_j, frames, conf_floor):
    src, dst, wts = [], [], []
    for f in frames:
        li, lj = pred_i.local_index(f), pred_j.local_index(f)
        pi, pj = pred_i.points[li].reshape(-1, 3), pred_j.points[lj].reshape(-1, 3)
        ci, cj = pred_i.points_conf[li].ravel(), pred_j.points_conf[lj].ravel()
        ok = (
            (ci > 0) & (cj > 0) & (ci >= conf_floor) & (cj >= conf_floor)
            & np.all(np.isfinite(pi), axis=1) & np.all(np.isfinite(pj), axis=1)
        )
        src.append(pj[ok])
        dst.append(pi[ok])
        wts.append(ci[ok] * cj[ok])
    if not src:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
    return np.concatenate(src), np.concatenate(dst), np.concatenate(wts)


def align_chunks(
    pred_i,
    pred_j,
    overlap=None,
    conf_floor=0.0,
    min_points=50,
    trim_fraction=0.1,
    max_rounds=3,
):
    """Similarity mapping chunk ``j`` coordinates into chunk ``i``'s frame.

    Pixel-wise point correspondences are taken from the shared frames,
    weighted by the product of both confidences, and refit up to
    ``max_rounds`` times after dropping the worst ``trim_fraction`` of
    residuals each round.
    """
    if overlap is None:
        overlap = np.intersect1d(pred_i.frames, pred_j.frames)
    overlap = list(overlap)
    if not overlap:
        raise AlignmentError("chunks share no frames")
    src, dst, w = _correspondences(pred_i, pred_j, overlap, conf_floor)
    n0 = len(src)
    if n0 < min_points:
        raise AlignmentError(f"only {n0} usable correspondences (< {min_points})")

    spread = float(np.sqrt(np.mean(np.sum((dst - dst.mean(axis=0)) ** 2, axis=1)))) + 1.0
    keep = np.arange(n0)
    transform = umeyama(src, dst, w)
    rounds = 0
    for _ in range(max_rounds):
        res = np.linalg.norm(dst[keep] - transform.apply(src[keep]), axis=1)
        if res.max() <= 1e-12 * spread:
            break
        n_drop = max(1, int(len(keep) * trim_fraction))
        if len(keep) - n_drop < min_points:
            break
        order = np.argsort(res, kind="stable")
        keep = np.sort(keep[order[: len(keep) - n_drop]])
        transform = umeyama(src[keep], dst[keep], w[keep])
        rounds += 1

    res_all = np.linalg.norm(dst - transform.apply(src), axis=1)
    res_kept = res_all[keep]
    gate = max(3.0 * float(np.median(res_kept)), 1e-9 * spread)
    stats = AlignStats(
        n_initial=n0,
        n_final=len(keep),
        rounds=rounds,
        rms=weighted_rms(transform, src[keep], dst[keep], w[keep]),
        inlier_ratio=float(np.mean(res_all <= gate)),
    )
    return transform, stats


def relative_from_cameras(pred_i, pred_j, overlap=None):
    """Fallback relative transform from predicted camera poses of shared frames."""
    if overlap is None:
        overlap = np.intersect1d(pred_i.frames, pred_j.frames)
    overlap = list(overlap)
    if not overlap:
        raise AlignmentError("chunks share no frames")
    ri, ti = pred_i.poses()
    rj, tj = pred_j.poses()
    idx_i = [pred_i.local_index(f) for f in overlap]
    idx_j = [pred_j.local_index(f) for f in overlap]
    if len(overlap) >= 3:
        try:
            return umeyama(tj[idx_j], ti[idx_i])
        except GeometryError:
            pass
    a, b = idx_i[0], idx_j[0]
    pose_i = Sim3(1.0, ri[a], ti[a])
    pose_j = Sim3(1.0, rj[b], tj[b])
    return pose_i @ pose_j.inverse()


def chain_chunks(pairwise):
    """Absolute chunk transforms from adjacent relative ones (first chunk = identity)."""
    out = [Sim3.identity()]
    for rel in pairwise:
        out.append(out[-1] @ rel)
    return out
