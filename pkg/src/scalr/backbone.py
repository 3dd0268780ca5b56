"""Toy alternating-attention transformer with memory insertion points.

Frames are patch-embedded, passed through ``L`` blocks of frame-wise then
chunk-wise (global) softmax attention, and decoded by small linear heads into
per-frame camera encodings, depth maps and point maps. Selected blocks host a
global context memory (:mod:`scalr.gcm`) after their global attention::

    plain block:   x_out = gattn(fattn(x)) + x
    memory block:  x_out = alpha * GCM(y) + y + x,   y = gattn(fattn(x))

The memory blocks are split into ``block_front`` / ``memory_gradient`` /
``block_back`` so that an orchestrator can synchronise memory gradients
across chunks between the two halves (see :mod:`scalr.gcs`).
"""
from dataclasses import dataclass, field

import numpy as np

from . import serialization
from .errors import ConfigError, ShapeError
from .gcm import (
    GcmConfig,
    GcmState,
    apply_gradient,
    gcm_apply,
    gated_residual,
    init_gcm,
    local_update,
    _gcm_arrays,
    _gcm_from_arrays,
    _gcm_meta,
)
from .numkit import matmul, normalize_quat, quat_to_rot, rot_to_quat, softplus

__all__ = [
    "BackboneConfig",
    "ChunkPrediction",
    "Backbone",
    "softmax_rows",
    "multi_task_loss",
    "camera_to_pose",
    "pose_to_camera",
]


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 8
    gcm_layers: tuple = (2, 5, 8)
    d: int = 64
    heads: int = 4
    patch: int = 8
    image_h: int = 32
    image_w: int = 48
    seed: int = 0
    gcm_heads: int = 1
    gcm_expansion: int = 4
    gcm_base_lr: float = 1e-3
    gate_init: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "gcm_layers", tuple(int(i) for i in self.gcm_layers))
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if any(i < 1 or i > self.layers for i in self.gcm_layers):
            raise ConfigError(f"gcm_layers {self.gcm_layers} not within 1..{self.layers}")
        if len(set(self.gcm_layers)) != len(self.gcm_layers):
            raise ConfigError("gcm_layers contains duplicates")
        if self.d % self.heads:
            raise ConfigError("d must be divisible by heads")
        if self.patch < 1 or self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}"
            )

    @property
    def grid(self):
        return self.image_h // self.patch, self.image_w // self.patch

    @property
    def tokens_per_frame(self):
        gh, gw = self.grid
        return gh * gw

    def gcm_config(self, layer):
        return GcmConfig(
            d=self.d,
            n_heads=self.gcm_heads,
            expansion=self.gcm_expansion,
            base_lr=self.gcm_base_lr,
            gate_init=self.gate_init,
            seed=self.seed * 1000 + layer,
        )


@dataclass
class ChunkPrediction:
    """Per-frame outputs for one chunk, in the chunk's own coordinate frame.

    ``cameras`` rows are ``(qw, qx, qy, qz, tx, ty, tz, fov_x, fov_y)`` encoding
    the camera-to-chunk pose; ``points`` is ``(F, H, W, 3)``.
    """

    frames: np.ndarray
    cameras: np.ndarray
    depth: np.ndarray
    depth_conf: np.ndarray
    points: np.ndarray
    points_conf: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        f = len(self.frames)
        if self.cameras.shape != (f, 9):
            raise ShapeError(f"cameras must be ({f}, 9), got {self.cameras.shape}")
        if self.depth.shape[0] != f or self.depth.shape != self.depth_conf.shape:
            raise ShapeError("depth/depth_conf shapes inconsistent with frame count")
        if self.points.shape != self.depth.shape + (3,) or self.points_conf.shape != self.depth.shape:
            raise ShapeError("points/points_conf shapes inconsistent with depth")

    def __len__(self):
        return len(self.frames)

    def local_index(self, frame):
        hits = np.flatnonzero(self.frames == frame)
        if not len(hits):
            raise KeyError(f"frame {frame} not in chunk")
        return int(hits[0])

    def poses(self):
        """Camera-to-chunk rotations (F, 3, 3) and translations (F, 3)."""
        rots = np.stack([quat_to_rot(c[:4]) for c in self.cameras])
        return rots, self.cameras[:, 4:7].copy()

    def arrays(self):
        return {
            "frames": self.frames,
            "cameras": self.cameras,
            "depth": self.depth,
            "depth_conf": self.depth_conf,
            "points": self.points,
            "points_conf": self.points_conf,
        }

    def equals(self, other):
        a, b = self.arrays(), other.arrays()
        return all(np.array_equal(a[k], b[k]) for k in a)


def pose_to_camera(rotation, translation, fov=(1.0, 1.0)):
    return np.concatenate([rot_to_quat(rotation), np.asarray(translation, float), np.asarray(fov, float)])


def camera_to_pose(camera):
    camera = np.asarray(camera, dtype=np.float64)
    return quat_to_rot(camera[:4]), camera[4:7].copy()


def softmax_rows(scores):
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _attention(x, w, heads):
    """Multi-head softmax self-attention over the rows of ``x`` (..., T, d)."""
    d = x.shape[-1]
    hd = d // heads
    q = matmul(x, w["wq"].T)
    k = matmul(x, w["wk"].T)
    v = matmul(x, w["wv"].T)
    out = np.empty(x.shape)
    scale = 1.0 / np.sqrt(hd)
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        attn = softmax_rows(matmul(q[..., sl], np.swapaxes(k[..., sl], -1, -2)) * scale)
        out[..., sl] = matmul(attn, v[..., sl])
    return matmul(out, w["wo"].T)


def _attn_weights(rng, d, std):
    return {name: rng.normal(0.0, std, size=(d, d)) for name in ("wq", "wk", "wv", "wo")}


class Backbone:
    """Seeded weights plus the forward operations of the toy transformer."""

    def __init__(self, config=None, weights=None, gcm_states=None):
        self.config = config if config is not None else BackboneConfig()
        if weights is None:
            weights, gcm_states = self._init_weights(self.config)
        self.weights = weights
        self.gcm_init = dict(gcm_states or {})

    @staticmethod
    def _init_weights(cfg):
        rng = np.random.default_rng(cfg.seed)
        d, p = cfg.d, cfg.patch
        std = 1.0 / np.sqrt(d)
        w = {
            "patch_w": rng.normal(0.0, 1.0 / np.sqrt(3 * p * p), size=(d, 3 * p * p)),
            "patch_b": np.zeros(d),
            "pos": rng.normal(0.0, 0.02, size=(cfg.tokens_per_frame, d)),
            "cam_w": rng.normal(0.0, std, size=(9, d)),
            "cam_b": np.array([1.0, 0, 0, 0, 0, 0, 0, 0, 0]),
            "depth_w": rng.normal(0.0, std, size=(2, d)),
            "depth_b": np.array([1.0, 0.0]),
            "point_w": rng.normal(0.0, std, size=(4, d)),
            "point_b": np.array([0.0, 0.0, 1.0, 0.0]),
        }
        for layer in range(1, cfg.layers + 1):
            for kind in ("fattn", "gattn"):
                for name, arr in _attn_weights(rng, d, std).items():
                    w[f"L{layer}.{kind}.{name}"] = arr
        states = {}
        for layer in cfg.gcm_layers:
            gcfg = cfg.gcm_config(layer)
            fw, proj = init_gcm(gcfg)
            states[layer] = GcmState(gcfg, fw, proj)
        return w, states

    def without_gcm(self):
        """Same weights, no memory layers: the baseline stack."""
        cfg = BackboneConfig(**{**self.config.__dict__, "gcm_layers": ()})
        return Backbone(cfg, self.weights, {})

    def initial_states(self):
        return dict(self.gcm_init)

    def _layer(self, layer, kind):
        prefix = f"L{layer}.{kind}."
        return {n: self.weights[prefix + n] for n in ("wq", "wk", "wv", "wo")}

    # -- embedding ---------------------------------------------------------
    def patchify(self, image):
        """Linear patch embedding of one ``3 x H x W`` image to ``(P, d)`` tokens."""
        cfg = self.config
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != 3:
            raise ShapeError(f"image must be 3 x H x W, got {image.shape}")
        _, h, w = image.shape
        p = cfg.patch
        if h % p or w % p:
            raise ConfigError(f"image {h}x{w} not divisible by patch {p}")
        gh, gw = h // p, w // p
        patches = image.reshape(3, gh, p, gw, p).transpose(1, 3, 0, 2, 4).reshape(gh * gw, 3 * p * p)
        return matmul(patches, self.weights["patch_w"].T) + self.weights["patch_b"]

    def embed(self, images):
        images = np.asarray(images, dtype=np.float64)
        cfg = self.config
        if images.ndim != 4 or images.shape[1:] != (3, cfg.image_h, cfg.image_w):
            raise ShapeError(
                f"expected (F, 3, {cfg.image_h}, {cfg.image_w}) images, got {images.shape}"
            )
        return np.stack([self.patchify(im) + self.weights["pos"] for im in images])

    # -- attention ---------------------------------------------------------
    def frame_attention(self, layer, x):
        w = self._layer(layer, "fattn")
        return _attention(x, w, self.config.heads)

    def global_attention(self, layer, x):
        f, p, d = x.shape
        out = _attention(x.reshape(f * p, d), self._layer(layer, "gattn"), self.config.heads)
        return out.reshape(f, p, d)

    def block_front(self, layer, x):
        return self.global_attention(layer, self.frame_attention(layer, x))

    def alternating_block(self, layer, x):
        return self.block_front(layer, x) + x

    def memory_gradient(self, layer, y, state):
        """Queries and local inner gradient of a memory layer for one chunk."""
        f, p, d = y.shape
        return local_update(state, y.reshape(f * p, d))

    def block_back(self, x, y, q, weights, state):
        f, p, d = y.shape
        out = gcm_apply(weights, q, state.projections.wo)
        gated = gated_residual(out, y.reshape(f * p, d), state.projections.alpha)
        return gated.reshape(f, p, d) + x

    def gcm_block(self, layer, x, state):
        """Memory block for a single chunk: update on its own tokens, then apply."""
        y = self.block_front(layer, x)
        q, grad = self.memory_gradient(layer, y, state)
        new_w = apply_gradient(state.weights, grad)
        out = self.block_back(x, y, q, new_w, state)
        return out, GcmState(state.config, new_w, state.projections)

    def run(self, images, gcm_states=None):
        """Full stack on one chunk; returns ``(tokens, new_states)``."""
        states = dict(self.initial_states() if gcm_states is None else gcm_states)
        x = self.embed(images)
        for layer in range(1, self.config.layers + 1):
            if layer in self.config.gcm_layers:
                x, states[layer] = self.gcm_block(layer, x, states[layer])
            else:
                x = self.alternating_block(layer, x)
        return x, states

    # -- heads -------------------------------------------------------------
    def camera_head(self, tokens):
        pooled = tokens.mean(axis=1)
        raw = matmul(pooled, self.weights["cam_w"].T) + self.weights["cam_b"]
        quats = np.stack([normalize_quat(r[:4]) for r in raw])
        return np.concatenate([quats, raw[:, 4:7], softplus(raw[:, 7:9])], axis=1)

    def _upsample(self, per_patch):
        cfg = self.config
        f = per_patch.shape[0]
        gh, gw = cfg.grid
        grid = per_patch.reshape(f, gh, gw, *per_patch.shape[2:])
        return np.repeat(np.repeat(grid, cfg.patch, axis=1), cfg.patch, axis=2)

    def _per_patch(self, tokens, w, b):
        f, p, d = tokens.shape
        return (matmul(tokens.reshape(f * p, d), w.T) + b).reshape(f, p, -1)

    def depth_head(self, tokens):
        raw = self._per_patch(tokens, self.weights["depth_w"], self.weights["depth_b"])
        up = self._upsample(raw)
        return softplus(up[..., 0]), softplus(up[..., 1])

    def point_head(self, tokens):
        raw = self._per_patch(tokens, self.weights["point_w"], self.weights["point_b"])
        up = self._upsample(raw)
        return up[..., :3].copy(), softplus(up[..., 3])

    def decode(self, tokens, frames):
        depth, depth_conf = self.depth_head(tokens)
        points, points_conf = self.point_head(tokens)
        return ChunkPrediction(
            frames=frames,
            cameras=self.camera_head(tokens),
            depth=depth,
            depth_conf=depth_conf,
            points=points,
            points_conf=points_conf,
        )

    def predict(self, images, frames=None, gcm_states=None):
        tokens, states = self.run(images, gcm_states)
        if frames is None:
            frames = np.arange(len(tokens))
        return self.decode(tokens, frames), states

    # -- snapshots -----------------------------------------------------------
    def save(self, path):
        cfg = self.config
        meta = {
            "layers": cfg.layers,
            "d": cfg.d,
            "heads": cfg.heads,
            "patch": cfg.patch,
            "image_h": cfg.image_h,
            "image_w": cfg.image_w,
            "seed": cfg.seed,
            "gcm_heads": cfg.gcm_heads,
            "gcm_expansion": cfg.gcm_expansion,
            "n_gcm": len(cfg.gcm_layers),
        }
        arrays = dict(self.weights)
        arrays["gcm_base_lr"] = np.array([cfg.gcm_base_lr])
        arrays["gate_init"] = np.array([cfg.gate_init])
        for i, layer in enumerate(cfg.gcm_layers):
            meta[f"gcm_layer_{i}"] = layer
            prefix = f"gcm{layer}."
            meta.update(_gcm_meta(self.gcm_init[layer].config, prefix))
            arrays.update(_gcm_arrays(self.gcm_init[layer], prefix))
        serialization.save(path, "backbone", meta, arrays)

    @classmethod
    def load(cls, path):
        kind, meta, arrays = serialization.load(path)
        if kind != "backbone":
            raise ShapeError(f"snapshot kind {kind!r} is not a backbone snapshot")
        layers = tuple(meta[f"gcm_layer_{i}"] for i in range(meta["n_gcm"]))
        cfg = BackboneConfig(
            layers=meta["layers"], gcm_layers=layers, d=meta["d"], heads=meta["heads"],
            patch=meta["patch"], image_h=meta["image_h"], image_w=meta["image_w"],
            seed=meta["seed"], gcm_heads=meta["gcm_heads"], gcm_expansion=meta["gcm_expansion"],
            gcm_base_lr=float(arrays.pop("gcm_base_lr")[0]),
            gate_init=float(arrays.pop("gate_init")[0]),
        )
        states = {}
        for layer in layers:
            prefix = f"gcm{layer}."
            states[layer] = _gcm_from_arrays(meta, arrays, prefix)
        weights = {k: v for k, v in arrays.items() if not k.startswith("gcm")}
        return cls(cfg, weights, states)


def _abs_rel(pred, gt, conf):
    conf = np.maximum(conf, 1e-12)
    return float(np.mean(np.abs(pred - gt).reshape(conf.shape + (-1,)).sum(-1) * conf - np.log(conf)))


def _grad_penalty(pred, gt):
    """Mean absolute mismatch of first differences along both image axes."""
    dx = np.diff(pred, axis=2) - np.diff(gt, axis=2)
    dy = np.diff(pred, axis=1) - np.diff(gt, axis=1)
    return float(np.mean(np.abs(dx)) + np.mean(np.abs(dy)))


def multi_task_loss(pred, gt, lam=1.0):
    """``lam * L_cam + L_depth + L_points`` for two :class:`ChunkPrediction` objects."""
    if pred.cameras.shape != gt.cameras.shape or pred.depth.shape != gt.depth.shape:
        raise ShapeError("prediction and ground truth shapes differ")
    l_cam = float(np.mean(np.abs(pred.cameras - gt.cameras)))
    l_dpt = _abs_rel(pred.depth[..., None], gt.depth[..., None], pred.depth_conf)
    l_dpt += _grad_penalty(pred.depth, gt.depth)
    l_xyz = _abs_rel(pred.points, gt.points, pred.points_conf)
    l_xyz += _grad_penalty(pred.points, gt.points)
    total = l_dpt + l_xyz
    if lam:
        total += lam * l_cam
    return total
