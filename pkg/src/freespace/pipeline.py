"""End-to-end orchestration over a stereo sequence directory.

Sequence layout::

    camera.json               focal_length_px, principal_point, baseline_m
    left/NNNNNN.png|pgm       8-bit left images (needed for dynamic detection)
    right/NNNNNN.png|pgm      8-bit right images (only for block matching)
    disparity/NNNNNN.png|pgm  16-bit disparity, raw / 256
    odometry.csv              optional per-pair 2x3 motion matrices
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .config import PipelineConfig
from .disparity import (CovarianceModel, DisparityImage, block_match, load_disparity, load_gray,
                        measurements_from_disparity)
from .dynamic import (MatchParams, RansacConfig, detect_and_match, detections_record, fit_flow_model_ransac,
                      image_center, save_detections)
from .errors import FormatError, PipelineError
from .geometry import CameraIntrinsics, GridGeometry
from .mapping import (AffineTransform2D, GlobalMap, estimate_transform_from_flow, fuse_grid, load_odometry,
                      mark_dynamic_cells, visible_cells)
from .occupancy import build_grid, save_grid
from .segmentation import save_profile, threshold_segment, transition_segment

log = logging.getLogger(__name__)

_IMAGE_EXT = (".png", ".pgm")


@dataclass
class Sequence:
    root: Path
    camera: CameraIntrinsics
    frames: list[str]
    left: dict = field(default_factory=dict)
    right: dict = field(default_factory=dict)
    disparity: dict = field(default_factory=dict)
    odometry: Path | None = None

    @classmethod
    def open(cls, root) -> "Sequence":
        root = Path(root)
        cam_path = root / "camera.json"
        if not cam_path.is_file():
            raise FormatError(f"{cam_path}: missing camera description")
        cam = CameraIntrinsics.from_dict(json.loads(cam_path.read_text()))
        found = {}
        for sub in ("left", "right", "disparity"):
            d = root / sub
            found[sub] = {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in _IMAGE_EXT} if d.is_dir() else {}
        frames = sorted(set(found["left"]) | set(found["disparity"]))
        if not frames:
            raise FormatError(f"{root}: no frames found under left/ or disparity/")
        odo = root / "odometry.csv"
        return cls(root, cam, frames, found["left"], found["right"], found["disparity"], odo if odo.is_file() else None)


def _stage(frame, name, fn, timings, *args, **kwargs):
    t0 = time.perf_counter()
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as e:
        raise PipelineError(frame, name, e) from e
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


def _disparity(seq: Sequence, name: str, cfg: PipelineConfig) -> DisparityImage:
    src = cfg.disparity.source
    if src in ("auto", "file") and name in seq.disparity:
        return load_disparity(seq.disparity[name])
    if src == "file":
        raise FormatError(f"no disparity file for frame {name}")
    if name not in seq.left or name not in seq.right:
        raise FormatError(f"frame {name}: need left and right images for block matching")
    dc = cfg.disparity
    return block_match(load_gray(seq.left[name]), load_gray(seq.right[name]), dc.radius, dc.max_disparity,
                       dc.uniqueness_ratio, workers=dc.workers)


def run_pipeline(cfg: PipelineConfig, sequence, out_dir=None, emit_frames: bool = True, on_fuse=None) -> dict:
    """Run every stage over a sequence and write artifacts; returns the run report.

    ``on_fuse(k, gmap)`` is called after frame ``k`` has been fused into the map.
    """
    seq = sequence if isinstance(sequence, Sequence) else Sequence.open(sequence)
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cam = seq.camera
    timings: dict = {}
    report = {
        "config": cfg.to_dict(),
        "seed": cfg.ransac.seed,
        "backend": kernels.BACKEND,
        "frames": [],
        "pairs": [],
        "artifacts": [],
    }
    cov = CovarianceModel(cfg.covariance.sigma_u, cfg.covariance.sigma_v, cfg.covariance.sigma_d,
                          cfg.covariance.sigma_d_per_disparity)
    metric_g = GridGeometry.metric(cfg.grid.metric_cell, cfg.grid.metric_depth, cfg.grid.metric_lateral)
    match = MatchParams(**vars(cfg.matching))
    rc = cfg.ransac
    rcfg = RansacConfig(rc.sample_fraction, rc.iterations, rc.epsilon, rc.seed, rc.trim_fraction, rc.trim_steps)
    mapping = len(seq.frames) >= 2
    odometry = None
    if mapping and cfg.mapping.transform_source == "odometry":
        path = cfg.mapping.odometry_file or seq.odometry
        if path is None:
            raise PipelineError(0, "map", FormatError("odometry requested but no odometry file given"))
        odometry = _stage(0, "map", load_odometry, timings, path)
    gmap = GlobalMap(cfg.grid.metric_cell, cfg.map_threshold, cfg.mapping.tile)
    pose = AffineTransform2D.identity(0, 0)

    def emit(path):
        report["artifacts"].append(str(Path(path).relative_to(out)))

    prev = None  # state carried from the previous frame
    for k, name in enumerate(seq.frames):
        disp = _stage(k, "disparity", _disparity, timings, seq, name, cfg)
        ms = _stage(k, "measurements", measurements_from_disparity, timings, disp, cfg.likelihood.stride, cov)
        u_g = GridGeometry.u_disparity(disp.width, cfg.grid.max_disparity, cfg.grid.u_cell)
        grid = _stage(k, "grid", build_grid, timings, ms, u_g, cfg.likelihood.mode, cfg.likelihood.truncation,
                      frame_id=k)
        sc = cfg.segmentation
        if sc.method == "threshold":
            profile = _stage(k, "segment", threshold_segment, timings, grid, sc.threshold, sc.smooth)
        else:
            profile = _stage(k, "segment", transition_segment, timings, grid, sc.threshold, sc.ordinal, sc.smooth)
        frame_info = {"frame": name, "measurements": len(ms),
                      "boundary_columns": int((profile.boundary >= 0).sum())}
        if emit_frames:
            p = out / f"grid_{name}.pgm"
            save_grid(grid, p)
            emit(p)
            emit(p.with_suffix(".json"))
            emit(p.with_suffix(".npy"))
            pj, pp = out / f"profile_{name}.json", out / f"profile_{name}.pgm"
            save_profile(profile, pj, pp)
            emit(pj)
            emit(pp)
        report["frames"].append(frame_info)
        cur = {"k": k, "name": name, "disp": disp}
        if mapping:
            cur["metric"] = _stage(k, "grid", build_grid, timings, ms, metric_g, cfg.likelihood.mode,
                                   cfg.likelihood.truncation, cam, k)
            cur["visible"] = (visible_cells(metric_g, profile, u_g, cam) if cfg.mapping.visibility else None)
            if name not in seq.left:
                raise PipelineError(k, "dynamic", FormatError(f"frame {name}: left image needed for mapping"))
            cur["left"] = _stage(k, "dynamic", load_gray, timings, seq.left[name])
        if mapping and prev is not None:
            pair = _stage(k, "dynamic", _pair, timings, prev, cur, cam, match, rc.degree, rcfg, out, emit)
            report["pairs"].append(pair["info"])
            if odometry is not None:
                if k - 1 >= len(odometry):
                    raise PipelineError(k, "map", FormatError(f"odometry has no row for pair {k - 1}->{k}"))
                motion = odometry[k - 1]
            else:
                motion = _stage(k, "transform", estimate_transform_from_flow, timings, pair["samples"],
                                ~pair["dynamic"], pair["center"], prev["disp"], disp, cam, cfg.mapping.rigid,
                                k - 1, k)
            pair["info"]["motion"] = motion.to_list()
            # dynamic keypoints at their positions in the earlier frame
            marks = _stage(k, "map", mark_dynamic_cells, timings, metric_g, pair["start"][pair["dynamic"]],
                           prev["disp"], cam)
            _stage(k - 1, "map", fuse_grid, timings, gmap, prev["metric"], pose, None, prev["visible"], marks.mask)
            if on_fuse is not None:
                on_fuse(k - 1, gmap)
            pair["info"]["dynamic_disparity_skipped"] = marks.skipped
            pose = gmap.next_pose(motion)
            cur["end_dynamic"] = pair["end"][pair["dynamic"]]
        prev = cur
    if mapping:
        marks = _stage(prev["k"], "map", mark_dynamic_cells, timings, metric_g, prev["end_dynamic"], prev["disp"], cam)
        _stage(prev["k"], "map", fuse_grid, timings, gmap, prev["metric"], pose, None, prev["visible"], marks.mask)
        if on_fuse is not None:
            on_fuse(prev["k"], gmap)
        mp, tp, meta, arr = out / "map.pgm", out / "trajectory.json", out / "map.json", out / "map.npz"
        gmap.save(mp, tp, meta, arr)
        for p in (mp, tp, meta, arr):
            emit(p)
        report["map"] = {"shape": list(gmap.shape), "offset": gmap.offset.tolist(),
                         "occupied": int((gmap.state == 1).sum()), "free": int((gmap.state == 0).sum()),
                         "unknown_observed": int(((gmap.state == 2) & (gmap.count > 0)).sum())}
    report["timings"] = timings
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=1)
    report["map_object"] = gmap if mapping else None
    return report


def _pair(prev, cur, cam, match, degree, rcfg, out, emit):
    samples = detect_and_match(prev["left"], cur["left"], match)
    center = image_center(prev["left"].shape)
    res = fit_flow_model_ransac(samples, degree, rcfg)
    dyn = res.residuals > rcfg.inlier_epsilon
    cx, cy = center
    start = np.array([(s.u + cx, s.v + cy) for s in samples]).reshape(-1, 2)
    end = start + np.array([(s.f_u, s.f_v) for s in samples]).reshape(-1, 2)
    rec = detections_record(samples, res, center, rcfg.inlier_epsilon)
    stem = f"detections_{prev['name']}_{cur['name']}"
    save_detections(rec, out / f"{stem}.json", out / f"{stem}.csv")
    emit(out / f"{stem}.json")
    emit(out / f"{stem}.csv")
    info = {"frames": [prev["name"], cur["name"]], "keypoints": len(samples), "dynamic": int(dyn.sum()),
            "inliers": res.inlier_count, "coefficients": list(res.model.coefficients)}
    return {"samples": samples, "dynamic": dyn, "center": center, "start": start, "end": end, "info": info}
