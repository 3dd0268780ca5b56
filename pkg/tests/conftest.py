import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from scalr.geometry import Sim3


def random_rotation(rng):
    return Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()


def random_sim3(rng, scale_range=(0.5, 2.0), t_scale=3.0):
    return Sim3(rng.uniform(*scale_range), random_rotation(rng), rng.normal(size=3) * t_scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_chunk(frames, points, conf=None, poses=None):
    """ChunkPrediction from world-frame points ``(F, H, W, 3)`` with unit depth."""
    from scalr.backbone import ChunkPrediction, pose_to_camera

    points = np.asarray(points, dtype=np.float64)
    f, h, w, _ = points.shape
    conf = np.ones((f, h, w)) if conf is None else np.asarray(conf, dtype=np.float64)
    if poses is None:
        poses = [(np.eye(3), np.zeros(3))] * f
    cams = np.stack([pose_to_camera(r, t) for r, t in poses])
    return ChunkPrediction(np.asarray(frames), cams, np.ones((f, h, w)), np.ones((f, h, w)), points, conf)


def transform_chunk(pred, transform):
    """The same chunk expressed in another frame: ``new = transform(old)``."""
    from scalr.backbone import ChunkPrediction, pose_to_camera

    rots, trans = pred.poses()
    cams = np.stack(
        [np.concatenate([pose_to_camera(*transform.apply_pose(r, t))[:7], c[7:]])
         for r, t, c in zip(rots, trans, pred.cameras)]
    )
    pts = transform.apply(pred.points.reshape(-1, 3)).reshape(pred.points.shape)
    return ChunkPrediction(pred.frames, cams, pred.depth * transform.s, pred.depth_conf, pts, pred.points_conf)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion and return the verdict."""

    def record(number, name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {name}: {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
