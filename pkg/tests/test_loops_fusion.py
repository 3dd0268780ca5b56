import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scalr.errors import ShapeError
from scalr.geometry import Sim3, detect_loops, frame_owners, frame_poses, fuse, voxel_downsample
from conftest import make_chunk, random_rotation, random_sim3


def brute_loops(desc, min_gap, thr):
    out = []
    n = len(desc)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = desc[i], desc[j]
            na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
            if na == 0 or nb == 0 or j - i < min_gap:
                continue
            s = min(1.0, max(-1.0, (a @ b) / (na * nb)))
            if s >= thr:
                out.append((i, j))
    return sorted(out)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 20), st.integers(0, 5), st.floats(-1, 1), st.integers(0, 2**31))
def test_detect_loops_matches_enumeration(n, gap, thr, seed):
    rng = np.random.default_rng(seed)
    desc = rng.normal(size=(n, 4))
    desc[rng.uniform(size=n) < 0.1] = 0.0
    got = detect_loops(desc, gap, thr)
    assert sorted((c.i, c.j) for c in got) == brute_loops(desc, gap, thr)
    for c in got:
        assert -1.0 <= c.score <= 1.0 and c.gap >= gap
    assert [c.score for c in got] == sorted((c.score for c in got), reverse=True)


def test_detect_loops_positions_and_limit():
    desc = np.array([[1.0, 0], [1.0, 0], [1.0, 0.01], [0, 1.0]])
    got = detect_loops(desc, min_gap=50, score_threshold=0.9, positions=[0, 30, 60, 90])
    assert [(c.i, c.j) for c in got] == [(0, 2)]
    assert got[0].gap == 60.0
    assert detect_loops(desc, 0, 0.9, max_candidates=1)[0].score == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        detect_loops(desc, 1, 0.5, positions=[0, 1])


def _chunks(rng):
    world = rng.normal(size=(8, 2, 3, 3))
    a = make_chunk(range(0, 5), world[0:5])
    b = make_chunk(range(3, 8), world[3:8])
    return world, a, b


def test_frame_owners_nearest_centre(rng):
    _, a, b = _chunks(rng)
    # centres 2 and 5: frame 3 is closer to a, frame 4 to b
    assert frame_owners([a, b]) == {0: 0, 1: 0, 2: 0, 3: 0, 4: 1, 5: 1, 6: 1, 7: 1}
    assert frame_owners([a, a]) == {f: 0 for f in range(5)}


def test_fuse_takes_each_frame_once(rng):
    world, a, b = _chunks(rng)
    g = random_sim3(rng)
    pts, conf = fuse([a, b], [g, g])
    assert pts.shape == (8 * 6, 3)
    assert np.allclose(pts, g.apply(world.reshape(-1, 3)), rtol=0, atol=1e-12)
    with pytest.raises(ShapeError):
        fuse([a, b], [g])


def test_fuse_drops_low_confidence(rng):
    world, a, b = _chunks(rng)
    conf = np.ones(b.points_conf.shape)
    conf[-1] = 0.0
    conf[-2] = 0.3
    b = make_chunk(b.frames, b.points, conf)
    pts, c = fuse([a, b], [Sim3.identity()] * 2, conf_floor=0.5)
    assert len(pts) == 6 * 6
    assert np.all(c >= 0.5)


def test_voxel_downsample(rng):
    pts = np.array([[0.1, 0.1, 0.1], [0.3, 0.3, 0.3], [1.5, 0.2, 0.2]])
    out, c = voxel_downsample(pts, np.array([1.0, 3.0, 5.0]), 1.0)
    assert np.allclose(out, [[0.2, 0.2, 0.2], [1.5, 0.2, 0.2]])
    assert np.allclose(c, [2.0, 5.0])
    same, _ = voxel_downsample(pts, np.ones(3), 0.0)
    assert same is pts


def test_frame_poses_apply_transform(rng):
    poses = [(random_rotation(rng), rng.normal(size=3)) for _ in range(3)]
    pred = make_chunk([4, 5, 6], np.zeros((3, 1, 1, 3)), poses=poses)
    g = random_sim3(rng)
    frames, rots, trans = frame_poses([pred], [g])
    assert list(frames) == [4, 5, 6]
    for (r, t), rr, tt in zip(poses, rots, trans):
        assert np.allclose(rr, g.r @ r, rtol=0, atol=1e-12)
        assert np.allclose(tt, g.apply(t), rtol=0, atol=1e-12)
