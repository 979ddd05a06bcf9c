"""Command line entry point: ``freespace <stage> ...``.

Every stage reads the same JSON config as the pipeline.  ``--set key=value``
overrides any config key by its dotted name and the explicit flags of each
subcommand are shorthands for the most used keys.  Machine outputs keep full
float precision.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import PipelineConfig
from .disparity import CovarianceModel, block_match, load_disparity, load_gray, measurements_from_disparity, \
    save_disparity
from .dynamic import MatchParams, RansacConfig, detect_and_match, detections_record, fit_flow_model_ransac, \
    image_center, save_detections
from .errors import FreeSpaceError, PipelineError
from .geometry import METRIC, U_DISPARITY, CameraIntrinsics, GridGeometry
from .mapping import AffineTransform2D, GlobalMap, fuse_grid, load_odometry
from .occupancy import build_grid, load_grid, save_grid
from .segmentation import save_profile, threshold_segment, transition_segment

log = logging.getLogger("freespace")


class StageError(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage


def _parse_set(items):
    out = []
    for item in items or ():
        if "=" not in item:
            raise argparse.ArgumentTypeError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out.append((key.strip(), value))
    return out


def _config(args, flag_keys) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    for key, value in _parse_set(args.set):
        cfg = cfg.override(key, value)
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg = cfg.override(key, value)
    return cfg


def _camera(path) -> CameraIntrinsics:
    return CameraIntrinsics.from_dict(json.loads(Path(path).read_text()))


def _covariance(cfg: PipelineConfig) -> CovarianceModel:
    c = cfg.covariance
    return CovarianceModel(c.sigma_u, c.sigma_v, c.sigma_d, c.sigma_d_per_disparity)


def _ransac(cfg: PipelineConfig) -> RansacConfig:
    r = cfg.ransac
    return RansacConfig(r.sample_fraction, r.iterations, r.epsilon, r.seed, r.trim_fraction, r.trim_steps)


# subcommand handlers -------------------------------------------------------

_DISPARITY_FLAGS = {"radius": "disparity.radius", "max_disparity": "disparity.max_disparity",
                    "uniqueness_ratio": "disparity.uniqueness_ratio", "workers": "disparity.workers"}


def cmd_disparity(args) -> dict:
    cfg = _config(args, _DISPARITY_FLAGS)
    dc = cfg.disparity
    img = block_match(load_gray(args.left), load_gray(args.right), dc.radius, dc.max_disparity,
                      dc.uniqueness_ratio, workers=dc.workers)
    save_disparity(img, args.out)
    return {"output": str(args.out), "valid_pixels": int(img.valid.sum())}


_GRID_FLAGS = {"mode": "likelihood.mode", "truncation": "likelihood.truncation", "stride": "likelihood.stride",
               "sigma_d": "covariance.sigma_d"}


def cmd_grid(args) -> dict:
    cfg = _config(args, _GRID_FLAGS)
    disp = load_disparity(args.disparity)
    ms = measurements_from_disparity(disp, cfg.likelihood.stride, _covariance(cfg))
    cam = None
    if args.axes == METRIC:
        if not args.camera:
            raise ValueError("metric grids need --camera")
        cam = _camera(args.camera)
        g = GridGeometry.metric(cfg.grid.metric_cell, cfg.grid.metric_depth, cfg.grid.metric_lateral)
    else:
        g = GridGeometry.u_disparity(disp.width, cfg.grid.max_disparity, cfg.grid.u_cell)
    grid = build_grid(ms, g, cfg.likelihood.mode, cfg.likelihood.truncation, cam, args.frame_id)
    save_grid(grid, args.out)
    return {"output": str(args.out), "measurements": len(ms), "shape": list(g.shape),
            "max": float(grid.likelihood.max())}


_SEGMENT_FLAGS = {"method": "segmentation.method", "threshold": "segmentation.threshold",
                  "ordinal": "segmentation.ordinal", "smooth": "segmentation.smooth"}


def cmd_segment(args) -> dict:
    cfg = _config(args, _SEGMENT_FLAGS)
    grid = load_grid(args.grid)
    sc = cfg.segmentation
    if sc.method == "threshold":
        profile = threshold_segment(grid, sc.threshold, sc.smooth)
    else:
        profile = transition_segment(grid, sc.threshold, sc.ordinal, sc.smooth)
    save_profile(profile, args.out, args.overlay)
    return {"output": str(args.out), "boundary_columns": int((profile.boundary >= 0).sum())}


_DYNAMIC_FLAGS = {"degree": "ransac.degree", "seed": "ransac.seed", "epsilon": "ransac.epsilon",
                  "iterations": "ransac.iterations", "sample_fraction": "ransac.sample_fraction"}


def cmd_dynamic(args) -> dict:
    cfg = _config(args, _DYNAMIC_FLAGS)
    a, b = load_gray(args.frame_a), load_gray(args.frame_b)
    samples = detect_and_match(a, b, MatchParams(**vars(cfg.matching)))
    rcfg = _ransac(cfg)
    res = fit_flow_model_ransac(samples, cfg.ransac.degree, rcfg)
    rec = detections_record(samples, res, image_center(a.shape), rcfg.inlier_epsilon)
    save_detections(rec, args.out, args.csv)
    return {"output": str(args.out), "keypoints": len(samples),
            "dynamic": int((res.residuals > rcfg.inlier_epsilon).sum())}


def cmd_map(args) -> dict:
    cfg = _config(args, {"threshold": "mapping.threshold"})
    grids = [load_grid(p) for p in args.grids]
    motions = load_odometry(args.odometry) if args.odometry else []
    if len(motions) < len(grids) - 1:
        raise ValueError(f"need {len(grids) - 1} odometry rows, got {len(motions)}")
    gmap = GlobalMap(cfg.grid.metric_cell, cfg.map_threshold, cfg.mapping.tile)
    pose = AffineTransform2D.identity(0, 0)
    for k, grid in enumerate(grids):
        if grid.geometry.col_size != gmap.cell_size:
            raise ValueError(f"{args.grids[k]}: cell size {grid.geometry.col_size} != grid.metric_cell {gmap.cell_size}")
        fuse_grid(gmap, grid, pose)
        if k < len(grids) - 1:
            pose = gmap.next_pose(motions[k])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gmap.save(out / "map.pgm", out / "trajectory.json", out / "map.json", out / "map.npz")
    return {"output": str(out / "map.pgm"), "frames": len(grids), "shape": list(gmap.shape)}


_PIPELINE_FLAGS = {"transform_source": "mapping.transform_source", "odometry": "mapping.odometry_file",
                   "seed": "ransac.seed", "threshold": "segmentation.threshold"}


def cmd_pipeline(args) -> dict:
    from .pipeline import run_pipeline

    cfg = _config(args, _PIPELINE_FLAGS)
    out = args.out_dir or cfg.output_dir
    report = run_pipeline(cfg, args.sequence, out, emit_frames=not args.no_frames)
    summary = {"output_dir": str(out), "frames": len(report["frames"]), "pairs": len(report["pairs"]),
               "backend": report["backend"]}
    if "map" in report:
        summary["map"] = report["map"]
    return summary


def cmd_synth(args) -> dict:
    from .synthetic import corridor_scene, write_sequence

    spec = corridor_scene(args.frames, args.width, args.height, args.focal, args.baseline, args.ego_step,
                          args.box_speed, args.seed)
    write_sequence(spec, args.out_dir)
    return {"output_dir": str(args.out_dir), "frames": spec.n_frames}


def cmd_config(args) -> dict:
    cfg = _config(args, {})
    text = json.dumps(cfg.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return {}


# parser ------------------------------------------------------------------

def _quiet(p):
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="do not print the JSON summary")


def _common(p):
    _quiet(p)
    p.add_argument("--config", help="JSON config file (unknown keys are rejected)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key by dotted name, e.g. ransac.seed=3 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="freespace",
                                 description="Stereo free-space estimation, dynamic-object detection and map fusion.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    ap.add_argument("--quiet", action="store_true", help="do not print the JSON summary")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("disparity", help="SAD block matching on a rectified pair")
    _common(p)
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--out", required=True, help="16-bit disparity image (value * 256)")
    p.add_argument("--radius", type=int)
    p.add_argument("--max-disparity", type=int)
    p.add_argument("--uniqueness-ratio", type=float)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_disparity)

    p = sub.add_parser("grid", help="stochastic occupancy grid from a disparity image")
    _common(p)
    p.add_argument("--disparity", required=True)
    p.add_argument("--out", required=True, help="grid image; a .json sidecar and .npy values are written next to it")
    p.add_argument("--axes", choices=(U_DISPARITY, METRIC), default=U_DISPARITY)
    p.add_argument("--camera", help="camera.json, required for metric grids")
    p.add_argument("--mode", choices=("standard", "paper-literal"), help="likelihood normalization")
    p.add_argument("--truncation", type=float, help="Mahalanobis truncation radius")
    p.add_argument("--stride", type=int, help="pixel subsampling stride")
    p.add_argument("--sigma-d", type=float, help="disparity standard deviation")
    p.add_argument("--frame-id", type=int, default=0)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("segment", help="free-space boundary per grid column")
    _common(p)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True, help="profile JSON")
    p.add_argument("--overlay", help="optional PGM rendering of the free/occupied split")
    p.add_argument("--method", choices=("threshold", "transition"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--ordinal", type=int)
    p.add_argument("--smooth", type=int)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("dynamic", help="keypoint flow, RANSAC background model, dynamic labels")
    _common(p)
    p.add_argument("--frame-a", required=True)
    p.add_argument("--frame-b", required=True)
    p.add_argument("--out", required=True, help="detections JSON")
    p.add_argument("--csv", help="optional per-keypoint CSV")
    p.add_argument("--degree", type=int, choices=(1, 2, 3))
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--sample-fraction", type=float)
    p.set_defaults(func=cmd_dynamic)

    p = sub.add_parser("map", help="fuse metric grids into a global map using odometry")
    _common(p)
    p.add_argument("grids", nargs="+", help="metric grid images in frame order")
    p.add_argument("--odometry", help="CSV of 2x3 frame-to-frame motions")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threshold", type=float, help="map occupancy threshold")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("pipeline", help="run every stage over a sequence directory")
    _common(p)
    p.add_argument("sequence")
    p.add_argument("--out-dir")
    p.add_argument("--transform-source", choices=("features", "odometry"))
    p.add_argument("--odometry", help="odometry CSV (defaults to <sequence>/odometry.csv)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float, help="segmentation threshold")
    p.add_argument("--no-frames", action="store_true", help="skip per-frame grid and profile artifacts")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("synth", help="write a synthetic corridor sequence")
    _quiet(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--width", type=int, default=400)
    p.add_argument("--height", type=int, default=300)
    p.add_argument("--focal", type=float, default=400.0)
    p.add_argument("--baseline", type=float, default=0.5)
    p.add_argument("--ego-step", type=float, default=0.4)
    p.add_argument("--box-speed", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("config", help="print the effective config")
    _common(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_config)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.func(args)
    except PipelineError as e:
        print(f"freespace: error: {e}", file=sys.stderr)
        return 2
    except argparse.ArgumentTypeError as e:
        ap.error(str(e))
    except (FreeSpaceError, ValueError, OSError) as e:
        print(f"freespace: error: {StageError(args.command, e)}", file=sys.stderr)
        return 2
    if summary and not args.quiet:
        print(json.dumps(summary, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
