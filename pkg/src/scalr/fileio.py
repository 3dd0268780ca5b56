"""File formats: TUM trajectories, PLY clouds, key-value configs, JSON reports."""
import json
import os

import numpy as np
from plyfile import PlyData, PlyElement, PlyElementParseError, PlyHeaderParseError

from . import serialization
from .backbone import ChunkPrediction
from .errors import ParseError, ShapeError
from .evaluation import Trajectory
from .numkit import quat_to_rot, rot_to_quat

__all__ = [
    "write_trajectory",
    "read_trajectory",
    "write_cloud",
    "read_cloud",
    "read_config",
    "write_config",
    "write_report",
    "read_report",
    "write_depth_archive",
    "read_depth_archive",
    "write_prediction",
    "read_prediction",
]

_TUM_HEADER = "# timestamp tx ty tz qx qy qz qw"


def write_trajectory(path, traj):
    """TUM text: one ``timestamp tx ty tz qx qy qz qw`` line per frame."""
    lines = [_TUM_HEADER]
    for ts, r, t in zip(traj.timestamps, traj.rotations, traj.positions):
        qw, qx, qy, qz = rot_to_quat(r)
        vals = [ts, *t, qx, qy, qz, qw]
        lines.append(" ".join(repr(float(v)) for v in vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trajectory(path):
    stamps, rots, pos = [], [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 8:
                raise ParseError(f"expected 8 values, found {len(fields)}", path, lineno)
            try:
                vals = [float(v) for v in fields]
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
            if not np.all(np.isfinite(vals)):
                raise ParseError("non-finite value", path, lineno)
            qx, qy, qz, qw = vals[4:]
            if qx * qx + qy * qy + qz * qz + qw * qw == 0:
                raise ParseError("zero quaternion", path, lineno)
            stamps.append(vals[0])
            pos.append(vals[1:4])
            rots.append(quat_to_rot([qw, qx, qy, qz]))
    if not stamps:
        return Trajectory(np.zeros(0), np.zeros((0, 3, 3)), np.zeros((0, 3)))
    return Trajectory(np.array(stamps), np.array(rots), np.array(pos))


def write_cloud(path, points, conf=None, binary=True):
    """PLY with double ``x, y, z`` and an optional double ``confidence`` property."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError(f"points must be (n, 3), got {points.shape}")
    dtype = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if conf is not None:
        conf = np.asarray(conf, dtype=np.float64).ravel()
        if len(conf) != len(points):
            raise ShapeError("confidence length differs from point count")
        dtype.append(("confidence", "<f8"))
    rec = np.empty(len(points), dtype=dtype)
    rec["x"], rec["y"], rec["z"] = points.T
    if conf is not None:
        rec["confidence"] = conf
    el = PlyElement.describe(rec, "vertex")
    PlyData([el], text=not binary, byte_order="<").write(str(path))


def _header_lines(path):
    n = 0
    with open(path, "rb") as fh:
        for raw in fh:
            n += 1
            if raw.strip() == b"end_header":
                return n
    return n


def read_cloud(path):
    """``(points, confidence or None)`` from a PLY file."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        ply = PlyData.read(str(path))
    except PlyHeaderParseError as exc:
        raise ParseError(f"bad PLY header: {exc.message}", path, exc.line) from None
    except PlyElementParseError as exc:
        line = _header_lines(path) + exc.row + 1 if exc.row is not None else None
        raise ParseError(f"bad PLY data: {exc.message}", path, line) from None
    except (ValueError, EOFError) as exc:
        raise ParseError(f"bad PLY file: {exc}", path) from None
    if "vertex" not in ply:
        raise ParseError("PLY has no vertex element", path)
    v = ply["vertex"].data
    names = v.dtype.names
    if not all(k in names for k in ("x", "y", "z")):
        raise ParseError("vertex element lacks x/y/z", path)
    points = np.stack([np.asarray(v[k], dtype=np.float64) for k in ("x", "y", "z")], axis=1)
    conf = np.asarray(v["confidence"], dtype=np.float64) if "confidence" in names else None
    return points, conf


def read_config(path):
    """Flat ``key = value`` file; ``#`` starts a comment. Values stay strings."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError("expected 'key = value'", path, lineno)
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise ParseError("empty key", path, lineno)
            if key in out:
                raise ParseError(f"duplicate key {key!r}", path, lineno)
            out[key] = value
    return out


def write_config(path, mapping):
    with open(path, "w") as fh:
        for key, value in mapping.items():
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            fh.write(f"{key} = {value}\n")


def write_report(path, report):
    data = report.to_dict() if hasattr(report, "to_dict") else report
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")


def read_report(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, path, exc.lineno) from None


def write_depth_archive(path, depth, frames=None):
    depth = np.asarray(depth, dtype=np.float64)
    frames = np.arange(len(depth)) if frames is None else np.asarray(frames)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, depth=depth, frames=frames)


def read_depth_archive(path):
    try:
        with np.load(path) as z:
            return z["depth"], z["frames"]
    except (ValueError, KeyError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise ParseError(f"bad depth archive: {exc}", path) from None


def write_prediction(path, pred):
    arrays = pred.arrays()
    serialization.save(path, "chunk", {"n_frames": len(pred)}, arrays)


def read_prediction(path):
    kind, _, arr = serialization.load(path)
    if kind != "chunk":
        raise ParseError(f"expected a chunk snapshot, found {kind!r}", path)
    try:
        return ChunkPrediction(
            arr["frames"].astype(np.int64), arr["cameras"], arr["depth"],
            arr["depth_conf"], arr["points"], arr["points_conf"],
        )
    except KeyError as exc:
        raise ParseError(f"chunk snapshot lacks {exc}", path) from None
