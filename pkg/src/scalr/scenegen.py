"""Synthetic scenes, a rendering-based stand-in predictor, and frame descriptors.

A scene is a camera trajectory plus a cloud of world points scattered along
it. Rendering is a point z-buffer: each pixel keeps the nearest point that
projects into it, so depth and point maps are exact samples of the cloud.
"""
from dataclasses import dataclass, field

import numpy as np

from .backbone import ChunkPrediction, pose_to_camera
from . import serialization
from .errors import ConfigError, ParseError, ShapeError
from .evaluation import Trajectory
from .geometry import Sim3, so3_exp

__all__ = [
    "TRAJECTORY_KINDS",
    "SceneSpec",
    "PinholeCamera",
    "NoiseModel",
    "Scene",
    "gen_trajectory",
    "gen_scene",
    "render",
    "render_depth",
    "render_image",
    "render_images",
    "SyntheticPredictor",
    "synth_predictor",
    "descriptor",
    "frame_descriptors",
    "save_scene",
    "load_scene",
]

TRAJECTORY_KINDS = ("line", "arc", "loop", "figure8")
_DRIFT_AXIS = np.array([0.2, 0.3, 1.0]) / np.linalg.norm([0.2, 0.3, 1.0])
_DRIFT_DIR = np.array([1.0, 0.5, 0.2]) / np.linalg.norm([1.0, 0.5, 0.2])


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "figure8"
    n_frames: int = 300
    speed: float = 0.5
    n_points: int = 20000
    extent: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ConfigError(f"unknown trajectory kind {self.kind!r}; choose from {TRAJECTORY_KINDS}")
        if self.n_frames < 2:
            raise ConfigError("a scene needs at least 2 frames")
        if not self.speed > 0:
            raise ConfigError("speed must be positive")
        if self.n_points < 1:
            raise ConfigError("a scene needs at least one point")
        if not self.extent > 0:
            raise ConfigError("extent must be positive")


@dataclass(frozen=True)
class PinholeCamera:
    fx: float = 30.0
    fy: float = 30.0
    cx: float = 24.0
    cy: float = 16.0
    width: int = 48
    height: int = 32

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ConfigError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point must lie inside the image")

    @property
    def fov(self):
        return (2 * np.arctan(self.width / (2 * self.fx)), 2 * np.arctan(self.height / (2 * self.fy)))


@dataclass(frozen=True)
class NoiseModel:
    """Corruption applied by the synthetic predictor.

    ``depth_sigma`` is relative depth noise. The drift terms define one
    similarity per chunk (rotation in degrees, translation in metres, scale
    factor) applied to the chunk's trailing frames. ``corruption_rate`` is
    the fraction of valid pixels replaced by low-confidence outliers.
    """

    depth_sigma: float = 0.0
    drift_rot_deg: float = 0.0
    drift_trans: float = 0.0
    drift_scale: float = 1.0
    corruption_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.depth_sigma < 0:
            raise ConfigError("depth noise must be non-negative")
        if not self.drift_scale > 0:
            raise ConfigError("drift scale must be positive")
        if not 0 <= self.corruption_rate <= 1:
            raise ConfigError("corruption rate must lie in [0, 1]")

    @property
    def drift(self):
        return Sim3(
            self.drift_scale,
            so3_exp(np.radians(self.drift_rot_deg) * _DRIFT_AXIS),
            self.drift_trans * _DRIFT_DIR,
        )

    @property
    def has_drift(self):
        return self.drift_rot_deg != 0 or self.drift_trans != 0 or self.drift_scale != 1


@dataclass
class Scene:
    spec: SceneSpec
    camera: PinholeCamera
    trajectory: Trajectory
    points: np.ndarray
    albedo: np.ndarray
    meta: dict = field(default_factory=dict)

    def pose(self, frame):
        return self.trajectory.rotations[frame], self.trajectory.positions[frame]

    def visible_points(self):
        """Indices of cloud points seen by at least one frame."""
        seen = np.zeros(len(self.points), dtype=bool)
        for f in range(len(self.trajectory)):
            _, idx = render(self.camera, *self.pose(f), self.points)
            seen[idx[idx >= 0]] = True
        return np.flatnonzero(seen)


def _curve(kind, t):
    """Unit-size curve samples and tangents for parameter ``t`` in ``[0, 1]``."""
    if kind == "line":
        return np.stack([t, 0 * t], 1), np.stack([np.ones_like(t), 0 * t], 1)
    if kind == "arc":
        a = 0.5 * np.pi * t
        return np.stack([np.sin(a), 1 - np.cos(a)], 1), np.stack([np.cos(a), np.sin(a)], 1)
    if kind == "loop":
        a = 2 * np.pi * t
        return np.stack([np.sin(a), 1 - np.cos(a)], 1), np.stack([np.cos(a), np.sin(a)], 1)
    a = 2 * np.pi * t
    return np.stack([np.sin(a), np.sin(a) * np.cos(a)], 1), np.stack([np.cos(a), np.cos(2 * a)], 1)


def _curve_length(kind):
    t = np.linspace(0.0, 1.0, 20001)
    xy, _ = _curve(kind, t)
    return float(np.sum(np.linalg.norm(np.diff(xy, axis=0), axis=1)))


def _look_rotations(heading):
    """Camera-to-world rotations looking along horizontal ``heading`` with image-down = world -z."""
    h = np.asarray(heading, dtype=np.float64)
    z = np.zeros((len(h), 3))
    z[:, :2] = h / np.linalg.norm(h, axis=1, keepdims=True)
    y = np.broadcast_to([0.0, 0.0, -1.0], z.shape)
    x = np.cross(y, z)
    return np.stack([x, y, z], axis=2)


def _parameters(spec):
    n = spec.n_frames
    if spec.kind == "loop":
        # the last frame closes the circle exactly
        return np.arange(n) / (n - 1)
    if spec.kind == "figure8":
        return np.arange(n) / n
    return np.arange(n) / (n - 1)


def gen_trajectory(spec):
    """Camera poses along the requested path at roughly ``speed`` metres per frame."""
    t = _parameters(spec)
    if spec.kind == "line":
        scale = spec.speed * (spec.n_frames - 1)
    elif spec.kind == "figure8":
        scale = spec.speed * spec.n_frames / _curve_length(spec.kind)
    else:
        scale = spec.speed * (spec.n_frames - 1) / (t[-1] * _curve_length(spec.kind))
    xy, tangent = _curve(spec.kind, t)
    pos = np.zeros((len(t), 3))
    pos[:, :2] = scale * xy
    return Trajectory(np.arange(len(t), dtype=np.float64), _look_rotations(tangent), pos)


def _albedo_field(rng, n_waves=4):
    freq = rng.normal(size=(n_waves, 3))
    freq *= rng.uniform(0.3, 1.0, size=(n_waves, 1)) / np.linalg.norm(freq, axis=1, keepdims=True)
    phase = rng.uniform(0, 2 * np.pi, size=n_waves)

    def sample(points):
        return 0.5 + 0.1 * np.sin(points @ freq.T + phase).sum(axis=1)

    return sample


def gen_scene(spec, camera=None):
    """Trajectory plus a cloud of walls and ground around it, deterministic per seed."""
    camera = camera or PinholeCamera()
    rng = np.random.default_rng(spec.seed)
    traj = gen_trajectory(spec)

    # anchor points on a densely resampled copy of the path
    dense = gen_trajectory(SceneSpec(spec.kind, 4 * spec.n_frames, spec.speed / 4, 1, spec.extent, spec.seed))
    along = rng.integers(0, len(dense), size=spec.n_points)
    centre = dense.positions[along]
    forward = dense.rotations[along][:, :, 2]
    lateral = np.cross([0.0, 0.0, 1.0], forward)
    half = 0.5 * spec.extent
    n_wall = int(0.7 * spec.n_points)
    side = np.where(rng.random(spec.n_points) < 0.5, -1.0, 1.0)
    offset = np.where(
        np.arange(spec.n_points) < n_wall,
        side * rng.uniform(0.8 * half, 1.2 * half, spec.n_points),
        rng.uniform(-half, half, spec.n_points),
    )
    height = np.where(np.arange(spec.n_points) < n_wall, rng.uniform(-1.5, 3.0, spec.n_points), -1.5)
    slide = rng.uniform(-2 * spec.speed, 2 * spec.speed, spec.n_points)
    pts = centre + offset[:, None] * lateral + slide[:, None] * forward
    pts[:, 2] = height

    field_fn = _albedo_field(rng)
    albedo = np.clip(field_fn(pts) + 0.05 * rng.uniform(-1, 1, spec.n_points), 0.0, 1.0)
    return Scene(spec, camera, traj, pts, albedo)


def render(camera, rotation, translation, points):
    """Z-buffered projection: ``(depth, index)`` maps, index -1 where nothing projects."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pc = (pts - np.asarray(translation, float)) @ np.asarray(rotation, float)
    depth = np.zeros((camera.height, camera.width))
    index = np.full((camera.height, camera.width), -1, dtype=np.int64)
    z = pc[:, 2]
    front = np.flatnonzero(z > 1e-9)
    if len(front) == 0:
        return depth, index
    zf = z[front]
    u = np.floor(camera.fx * pc[front, 0] / zf + camera.cx)
    v = np.floor(camera.fy * pc[front, 1] / zf + camera.cy)
    inside = (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    front, zf = front[inside], zf[inside]
    pix = v[inside].astype(np.int64) * camera.width + u[inside].astype(np.int64)
    order = np.lexsort((front, zf, pix))
    first = np.unique(pix[order], return_index=True)[1]
    winners = order[first]
    flat_d, flat_i = depth.reshape(-1), index.reshape(-1)
    flat_d[pix[winners]] = zf[winners]
    flat_i[pix[winners]] = front[winners]
    return depth, index


def render_depth(camera, rotation, translation, points):
    """Depth map with 0 marking unobserved pixels."""
    return render(camera, rotation, translation, points)[0]


def render_image(scene, frame):
    """Grey intensity frame (H, W): albedo of the visible point, 0 on empty pixels."""
    _, idx = render(scene.camera, *scene.pose(frame), scene.points)
    img = np.zeros(idx.shape)
    hit = idx >= 0
    img[hit] = scene.albedo[idx[hit]]
    return img


def render_images(scene, frames=None, channels=3):
    frames = range(len(scene.trajectory)) if frames is None else frames
    imgs = np.stack([render_image(scene, f) for f in frames])
    return np.repeat(imgs[:, None], channels, axis=1)


class SyntheticPredictor:
    """Stand-in for a pretrained chunk model, rendering ground truth per chunk.

    Outputs are expressed in the chunk's local frame (its first frame is the
    origin). Frames at chunk offset ``drift_from`` or later are moved by the
    noise model's drift similarity, so chaining chunks through their overlaps
    accumulates one drift per chunk.
    """

    def __init__(self, scene, noise=None, drift_from=None):
        self.scene = scene
        self.noise = noise or NoiseModel()
        self.drift_from = drift_from

    def _rng(self, frames):
        key = [int(self.noise.seed), int(frames[0]), int(frames[-1]), len(frames)]
        return np.random.default_rng(key)

    def __call__(self, frames, drift=True):
        frames = np.asarray(frames, dtype=np.int64)
        if frames.ndim != 1 or len(frames) == 0:
            raise ShapeError("frames must be a non-empty 1-d index array")
        sc, noise = self.scene, self.noise
        rng = self._rng(frames)
        r0, t0 = sc.pose(frames[0])
        drift_from = len(frames) if (self.drift_from is None or not drift) else self.drift_from
        d = noise.drift if noise.has_drift else None
        h, w = sc.camera.height, sc.camera.width
        f_n = len(frames)
        cams = np.zeros((f_n, 9))
        depth = np.zeros((f_n, h, w))
        conf = np.zeros((f_n, h, w))
        points = np.zeros((f_n, h, w, 3))
        for n, f in enumerate(frames):
            rf, tf = sc.pose(f)
            rl, tl = r0.T @ rf, r0.T @ (tf - t0)
            _, idx = render(sc.camera, rf, tf, sc.points)
            hit = idx >= 0
            world = sc.points[idx[hit]]
            pc = (world - tf) @ rf
            if noise.depth_sigma > 0:
                pc = pc * (1.0 + noise.depth_sigma * rng.standard_normal(len(pc)))[:, None]
            c = np.ones(len(pc))
            if noise.corruption_rate > 0:
                bad = rng.random(len(pc)) < noise.corruption_rate
                pc[bad] += rng.uniform(-1, 1, size=(int(bad.sum()), 3)) * sc.spec.extent
                c[bad] = 0.1
            local = pc @ rl.T + tl
            z = pc[:, 2]
            if d is not None and n >= drift_from:
                local = d.apply(local)
                rl, tl = d.apply_pose(rl, tl)
                z = d.s * z
            cams[n] = pose_to_camera(rl, tl, sc.camera.fov)
            depth[n][hit] = z
            conf[n][hit] = c
            points[n][hit] = local
        return ChunkPrediction(frames, cams, depth, conf.copy(), points, conf, {"source": "synthetic"})

    def predict_loop(self, frames):
        """Prediction for an ad-hoc chunk (no drift)."""
        return self(frames, drift=False)


def synth_predictor(frames, scene, noise=None, drift_from=None):
    return SyntheticPredictor(scene, noise, drift_from)(frames)


def descriptor(frame, grid=8):
    """Mean-pooled ``grid x grid`` intensity layout, mean-centred and L2-normalised.

    Accepts ``(H, W)`` or ``(C, H, W)``; a constant frame maps to the zero vector.
    """
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    if img.ndim != 2:
        raise ShapeError(f"frame must be (H, W) or (C, H, W), got {img.shape}")
    h, w = img.shape
    rows = np.minimum(np.arange(h) * grid // h, grid - 1)
    cols = np.minimum(np.arange(w) * grid // w, grid - 1)
    cell = (rows[:, None] * grid + cols[None, :]).ravel()
    sums = np.bincount(cell, weights=img.ravel(), minlength=grid * grid)
    counts = np.bincount(cell, minlength=grid * grid)
    pooled = np.divide(sums, counts, out=np.zeros(grid * grid), where=counts > 0)
    pooled -= pooled.mean()
    norm = np.linalg.norm(pooled)
    if norm <= 1e-12:
        return np.zeros(grid * grid)
    return pooled / norm


def frame_descriptors(images):
    return np.stack([descriptor(im) for im in images])


def save_scene(path, scene):
    spec, cam = scene.spec, scene.camera
    meta = {
        "kind": TRAJECTORY_KINDS.index(spec.kind),
        "n_frames": spec.n_frames,
        "n_points": spec.n_points,
        "seed": spec.seed,
        "width": cam.width,
        "height": cam.height,
    }
    arrays = {
        "spec": np.array([spec.speed, spec.extent]),
        "intrinsics": np.array([cam.fx, cam.fy, cam.cx, cam.cy]),
        "timestamps": scene.trajectory.timestamps,
        "rotations": scene.trajectory.rotations,
        "positions": scene.trajectory.positions,
        "points": scene.points,
        "albedo": scene.albedo,
    }
    serialization.save(path, "scene", meta, arrays)


def load_scene(path):
    kind, meta, arr = serialization.load(path)
    if kind != "scene":
        raise ParseError(f"expected a scene snapshot, found {kind!r}", path)
    try:
        speed, extent = arr["spec"]
        spec = SceneSpec(
            TRAJECTORY_KINDS[meta["kind"]], meta["n_frames"], float(speed),
            meta["n_points"], float(extent), meta["seed"],
        )
        cam = PinholeCamera(*arr["intrinsics"].tolist(), meta["width"], meta["height"])
        traj = Trajectory(arr["timestamps"], arr["rotations"], arr["positions"])
        return Scene(spec, cam, traj, arr["points"], arr["albedo"])
    except (KeyError, IndexError, ValueError) as exc:
        raise ParseError(f"incomplete scene snapshot: {exc}", path) from None
