"""Command-line driver: ``scalr gen | run | eval-pose | eval-recon | gradcheck``.

Exit codes: 0 success, 1 failed check, 2 usage or parse error, 3 pipeline failure.
Set ``SCALR_LOG`` (e.g. ``DEBUG``) to see protocol trace lines.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .backbone import Backbone, BackboneConfig
from .errors import AlignmentError, ConfigError, GraphError, ProtocolError, ScalrError
from .evaluation import DEFAULT_SEGMENTS, align_trajectory, pose_report, recon_report
from .gradcheck import BLOCKS, gradient_check
from .reconstruct import PipelineError, reconstruct
from .scenegen import (
    NoiseModel,
    SceneSpec,
    SyntheticPredictor,
    frame_descriptors,
    gen_scene,
    load_scene,
    render,
    render_images,
    save_scene,
)

__all__ = ["RunConfig", "main", "build_parser"]

log = logging.getLogger("scalr")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_PIPELINE = 0, 1, 2, 3


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_layers(text):
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


@dataclasses.dataclass
class RunConfig:
    chunk_size: int = 60
    overlap: int = 30
    workers: int = 1
    parallel: bool = False
    seed: int = 0
    predictor: str = "synthetic"
    # backbone and memory placement (used by the backbone predictor)
    layers: int = 8
    gcm_layers: tuple = (2, 5, 8)
    d: int = 64
    heads: int = 4
    gcm_heads: int = 1
    gcm_expansion: int = 4
    gcm_base_lr: float = 1e-3
    gate_init: float = 0.1
    # synthetic predictor corruption
    depth_sigma: float = 0.0
    drift_rot_deg: float = 0.0
    drift_trans: float = 0.0
    drift_scale: float = 1.0
    corruption_rate: float = 0.0
    # loop closure
    loops: bool = True
    loop_threshold: float = 0.95
    loop_min_gap: int = 0
    max_loops: int = 4
    conf_floor: float = 0.0
    voxel_size: float = 0.0
    out: str = "run"

    def __post_init__(self):
        if self.chunk_size < 1 or not 0 <= self.overlap < self.chunk_size:
            raise ConfigError(f"need 0 <= overlap < chunk_size, got {self.overlap}, {self.chunk_size}")
        if self.workers < 1:
            raise ConfigError("worker count must be at least 1")
        if self.predictor not in ("synthetic", "backbone"):
            raise ConfigError(f"unknown predictor {self.predictor!r}")

    @classmethod
    def from_mapping(cls, mapping):
        """Build from string values (e.g. a config file), coercing to field types."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            default = fields[key].default
            try:
                if isinstance(default, bool):
                    kwargs[key] = _parse_bool(raw)
                elif isinstance(default, tuple):
                    kwargs[key] = _parse_layers(raw)
                else:
                    kwargs[key] = type(default)(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        return cls(**kwargs)

    def merged(self, overrides):
        values = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **values)

    def noise(self):
        return NoiseModel(
            self.depth_sigma, self.drift_rot_deg, self.drift_trans,
            self.drift_scale, self.corruption_rate, self.seed,
        )

    def backbone_config(self, height, width):
        return BackboneConfig(
            layers=self.layers, gcm_layers=self.gcm_layers, d=self.d, heads=self.heads,
            image_h=height, image_w=width, seed=self.seed, gcm_heads=self.gcm_heads,
            gcm_expansion=self.gcm_expansion, gcm_base_lr=self.gcm_base_lr, gate_init=self.gate_init,
        )

    def to_mapping(self):
        return dataclasses.asdict(self)


def _scene_spec_from_args(args):
    return SceneSpec(args.kind, args.frames, args.speed, args.points, args.extent, args.seed)


def cmd_gen(args):
    spec = _scene_spec_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = gen_scene(spec)
    save_scene(out / "scene.sclr", scene)
    fileio.write_config(out / "scene.cfg", dataclasses.asdict(spec))
    fileio.write_trajectory(out / "gt_trajectory.txt", scene.trajectory)
    visible = scene.visible_points()
    fileio.write_cloud(out / "gt_cloud.ply", scene.points[visible])
    depth = np.stack([render(scene.camera, *scene.pose(f), scene.points)[0] for f in range(spec.n_frames)])
    fileio.write_depth_archive(out / "depth.npz", depth)
    print(f"wrote {spec.n_frames} frames, {len(visible)} visible points to {out}")
    return EXIT_OK


def _load_run_config(args):
    cfg = RunConfig()
    if args.config:
        cfg = RunConfig.from_mapping(fileio.read_config(args.config))
    overrides = {
        "chunk_size": args.chunk_size,
        "overlap": args.overlap,
        "workers": args.workers,
        "seed": args.seed,
        "predictor": args.predictor,
        "out": args.out,
    }
    if args.no_loops:
        overrides["loops"] = False
    return cfg.merged(overrides)


def _transform_record(t):
    return {"s": t.s, "r": t.r.tolist(), "t": t.t.tolist()}


def cmd_run(args):
    cfg = _load_run_config(args)
    scene = load_scene(Path(args.scene) / "scene.sclr")
    n = len(scene.trajectory)
    images = None
    if cfg.predictor == "backbone":
        images = render_images(scene)
        predictor = Backbone(cfg.backbone_config(scene.camera.height, scene.camera.width))
    else:
        predictor = SyntheticPredictor(scene, cfg.noise(), drift_from=cfg.chunk_size - cfg.overlap)
    descriptors = None
    if cfg.loops:
        frames = images if images is not None else render_images(scene, channels=1)
        descriptors = frame_descriptors(frames)
    try:
        rec = reconstruct(
            predictor, n, cfg.chunk_size, cfg.overlap, workers=cfg.workers, images=images,
            descriptors=descriptors, loop_min_gap=cfg.loop_min_gap or None,
            loop_threshold=cfg.loop_threshold, max_loops=cfg.max_loops,
            conf_floor=cfg.conf_floor, voxel_size=cfg.voxel_size, parallel=cfg.parallel,
        )
    except (PipelineError, AlignmentError, GraphError, ProtocolError) as exc:
        print(f"error: pipeline failed: {exc}", file=sys.stderr)
        return EXIT_PIPELINE

    out = Path(cfg.out)
    (out / "chunks").mkdir(parents=True, exist_ok=True)
    for k, pred in enumerate(rec.predictions):
        fileio.write_prediction(out / "chunks" / f"chunk_{k:03d}.sclr", pred)
    alignment = {
        "chunks": [list(c) for c in rec.partition.chunks],
        "pairwise": [_transform_record(t) for t in rec.pairwise],
        "chain": [_transform_record(t) for t in rec.chain],
        "refined": [_transform_record(t) for t in rec.transforms],
        "loops": [
            {"frames": [lp.frame_a, lp.frame_b], "chunks": [lp.chunk_a, lp.chunk_b],
             "score": lp.score, "weight": lp.edge.weight}
            for lp in rec.loops
        ],
    }
    with open(out / "alignment.json", "w") as fh:
        json.dump(alignment, fh, indent=2)
    fileio.write_trajectory(out / "trajectory.txt", rec.trajectory)
    fileio.write_trajectory(out / "chain_trajectory.txt", rec.chain_trajectory())
    fileio.write_cloud(out / "cloud.ply", rec.points, rec.conf)
    with open(out / "trace.log", "w") as fh:
        fh.writelines(line + "\n" for line in rec.trace)
    fileio.write_config(out / "run.cfg", cfg.to_mapping())
    print(f"{len(rec.predictions)} chunks, {len(rec.loops)} loop edges, {len(rec.points)} points -> {out}")
    return EXIT_OK


def _emit(report, out):
    text = report.to_json()
    print(text)
    if out:
        fileio.write_report(out, report)


def cmd_eval_pose(args):
    pred = fileio.read_trajectory(args.pred)
    gt = fileio.read_trajectory(args.gt)
    segments = tuple(float(s) for s in args.segments.split(",")) if args.segments else DEFAULT_SEGMENTS
    _emit(pose_report(pred, gt, segments), args.out)
    return EXIT_OK


def cmd_eval_recon(args):
    pred, _ = fileio.read_cloud(args.pred)
    gt, _ = fileio.read_cloud(args.gt)
    if bool(args.pred_traj) != bool(args.gt_traj):
        raise ConfigError("--pred-traj and --gt-traj must be given together")
    if args.pred_traj:
        transform = align_trajectory(fileio.read_trajectory(args.pred_traj), fileio.read_trajectory(args.gt_traj))
        pred = transform.apply(pred)
    _emit(recon_report(pred, gt, args.threshold), args.out)
    return EXIT_OK


def cmd_gradcheck(args):
    report = gradient_check(
        args.instances, args.max_hd, args.max_k, args.max_m, args.seed, args.tol, args.perturb
    )
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_CHECK


def build_parser():
    parser = argparse.ArgumentParser(prog="scalr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic scene")
    g.add_argument("--kind", default="figure8")
    g.add_argument("--frames", type=int, default=300)
    g.add_argument("--speed", type=float, default=0.5)
    g.add_argument("--points", type=int, default=20000)
    g.add_argument("--extent", type=float, default=8.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="reconstruct a generated scene")
    r.add_argument("--scene", required=True, help="directory written by 'gen'")
    r.add_argument("--config", help="key = value file; flags take precedence")
    r.add_argument("--chunk-size", type=int)
    r.add_argument("--overlap", type=int)
    r.add_argument("--workers", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--predictor", choices=("synthetic", "backbone"))
    r.add_argument("--no-loops", action="store_true")
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    p = sub.add_parser("eval-pose", help="ATE and RRE/RTE of a TUM trajectory")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--segments", help="comma-separated segment lengths in metres")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_pose)

    c = sub.add_parser("eval-recon", help="Chamfer and F1 of a PLY cloud")
    c.add_argument("--pred", required=True)
    c.add_argument("--gt", required=True)
    c.add_argument("--threshold", default="vkitti", help="preset (eth3d, vkitti, spires) or metres")
    c.add_argument("--pred-traj", help="predicted trajectory used to align the cloud")
    c.add_argument("--gt-traj", help="ground-truth trajectory used to align the cloud")
    c.add_argument("--out")
    c.set_defaults(func=cmd_eval_recon)

    k = sub.add_parser("gradcheck", help="finite-difference check of the memory gradient")
    k.add_argument("--instances", type=int, default=200)
    k.add_argument("--max-hd", type=int, default=16)
    k.add_argument("--max-k", type=int, default=4)
    k.add_argument("--max-m", type=int, default=8)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--tol", type=float, default=1e-6)
    k.add_argument("--perturb", choices=BLOCKS, help=argparse.SUPPRESS)
    k.set_defaults(func=cmd_gradcheck)
    return parser


def _setup_logging():
    level = os.environ.get("SCALR_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScalrError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
