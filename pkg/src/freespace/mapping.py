"""Fusing per-frame metric occupancy grids into a global bird's-eye map.

Frame ``k`` grids live in the camera's ground plane ``(x, z)``.  The map
frame is the ground plane of frame 0.  A transform ``A_k`` estimated between
frames maps frame-``k`` coordinates of a static point to frame ``k+1``, so the
pose of frame ``k+1`` in the map is ``pose_k @ inverse(A_k)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np

from .disparity import DisparityImage
from .errors import EstimationError, FormatError, GridModeError
from .geometry import METRIC, U_DISPARITY, CameraIntrinsics, GridGeometry, triangulate_arrays
from .occupancy import OccupancyGrid

FREE, OCCUPIED, UNKNOWN = 0, 1, 2
_GRAY = {FREE: 255, OCCUPIED: 0, UNKNOWN: 128}


@dataclass(frozen=True)
class AffineTransform2D:
    """``p' = M[:, :2] @ p + M[:, 2]`` on ground-plane points ``(x, z)``."""

    matrix: np.ndarray
    source: Optional[int] = None
    target: Optional[int] = None

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2x3, got {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls, source=None, target=None) -> "AffineTransform2D":
        return cls(np.eye(2, 3), source, target)

    @classmethod
    def rigid(cls, angle: float, tx: float, tz: float, source=None, target=None) -> "AffineTransform2D":
        c, s = math.cos(angle), math.sin(angle)
        return cls([[c, -s, tx], [s, c, tz]], source, target)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:, 2]

    @property
    def angle(self) -> float:
        return math.atan2(self.matrix[1, 0], self.matrix[0, 0])

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.linear.T + self.translation

    def __matmul__(self, other: "AffineTransform2D") -> "AffineTransform2D":
        """``(self @ other)`` applies ``other`` first."""
        lin = self.linear @ other.linear
        t = self.linear @ other.translation + self.translation
        return AffineTransform2D(np.column_stack([lin, t]), other.source, self.target)

    def inverse(self) -> "AffineTransform2D":
        inv = np.linalg.inv(self.linear)
        return AffineTransform2D(np.column_stack([inv, -inv @ self.translation]), self.target, self.source)

    def to_list(self) -> list:
        return self.matrix.tolist()


def estimate_transform(src, dst, rigid: bool = True, source=None, target=None) -> AffineTransform2D:
    """Least-squares transform mapping ground points ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise EstimationError("point sets differ in length")
    if len(src) < 3:
        raise EstimationError(f"need at least 3 correspondences, got {len(src)}")
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - ms, dst - md
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise EstimationError("correspondences are collinear")
    if rigid:
        theta = math.atan2(np.sum(b[:, 1] * a[:, 0] - b[:, 0] * a[:, 1]),
                           np.sum(b[:, 0] * a[:, 0] + b[:, 1] * a[:, 1]))
        c, s = math.cos(theta), math.sin(theta)
        R = np.array([[c, -s], [s, c]])
        return AffineTransform2D(np.column_stack([R, md - R @ ms]), source, target)
    A = np.column_stack([src, np.ones(len(src))])
    sol, *_ = np.linalg.lstsq(A, dst, rcond=None)
    return AffineTransform2D(sol.T, source, target)


def _sample_disparity(disp: DisparityImage, x, y):
    xi = np.rint(np.asarray(x, dtype=float)).astype(np.int64)
    yi = np.rint(np.asarray(y, dtype=float)).astype(np.int64)
    inside = (xi >= 0) & (xi < disp.width) & (yi >= 0) & (yi < disp.height)
    d = np.full(xi.shape, np.nan)
    d[inside] = disp.values[yi[inside], xi[inside]]
    return d


def ground_correspondences(samples, center, disp_i: DisparityImage, disp_i1: DisparityImage, cam: CameraIntrinsics):
    """Ground-plane positions of each flow sample in both frames.

    Returns ``(src, dst, ok)``; ``ok`` is False where either disparity is
    missing or non-positive.
    """
    cx, cy = center
    x0 = np.array([s.u + cx for s in samples], dtype=float)
    y0 = np.array([s.v + cy for s in samples], dtype=float)
    x1 = x0 + np.array([s.f_u for s in samples], dtype=float)
    y1 = y0 + np.array([s.f_v for s in samples], dtype=float)
    d0 = _sample_disparity(disp_i, x0, y0)
    d1 = _sample_disparity(disp_i1, x1, y1)
    ok = np.isfinite(d0) & np.isfinite(d1) & (d0 > 0) & (d1 > 0)
    X0, _, Z0 = triangulate_arrays(x0, y0, np.where(ok, d0, 1.0), cam)
    X1, _, Z1 = triangulate_arrays(x1, y1, np.where(ok, d1, 1.0), cam)
    return np.column_stack([X0, Z0]), np.column_stack([X1, Z1]), ok


def estimate_transform_from_flow(samples, background, center, disp_i, disp_i1, cam, rigid=True,
                                 source=None, target=None, residual_floor: float = 0.25,
                                 max_rounds: int = 5) -> AffineTransform2D:
    """Ego-motion from background keypoints triangulated in consecutive frames.

    Keypoints sliding across occlusion edges triangulate to unrelated surfaces
    in the two frames, so after each fit correspondences with residual above
    ``max(residual_floor, 3 * median)`` meters are dropped and the fit repeated.
    """
    src, dst, ok = ground_correspondences(samples, center, disp_i, disp_i1, cam)
    use = ok & np.asarray(background, dtype=bool)
    src, dst = src[use], dst[use]
    keep = np.ones(len(src), dtype=bool)
    tf = estimate_transform(src, dst, rigid, source, target)
    for _ in range(max_rounds):
        res = np.linalg.norm(tf.apply(src) - dst, axis=1)
        new_keep = res <= max(residual_floor, 3.0 * float(np.median(res[keep])))
        if np.array_equal(new_keep, keep):
            break
        keep = new_keep
        tf = estimate_transform(src[keep], dst[keep], rigid, source, target)
    return tf


@dataclass
class DynamicMarks:
    mask: np.ndarray
    skipped: int = 0


def mark_dynamic_cells(g: GridGeometry, keypoints, disparity: DisparityImage, cam: CameraIntrinsics) -> DynamicMarks:
    """Cells holding dynamic keypoints.

    ``keypoints`` are raw ``(x, y)`` pixel positions in the frame whose
    disparity is given.  Keypoints without a valid disparity are skipped and
    counted.
    """
    kp = np.asarray(keypoints, dtype=float).reshape(-1, 2)
    mask = np.zeros(g.shape, dtype=bool)
    d = _sample_disparity(disparity, kp[:, 0], kp[:, 1])
    ok = np.isfinite(d) & (d > 0)
    skipped = int((~ok).sum())
    if g.mode == U_DISPARITY:
        i, j = g.locate(kp[ok, 0], d[ok])
    else:
        X, _, Z = triangulate_arrays(kp[ok, 0], kp[ok, 1], d[ok], cam)
        i, j = g.locate(X, Z)
    inside = i >= 0
    mask[i[inside], j[inside]] = True
    return DynamicMarks(mask, skipped)


def _global_index(coord, cell):
    # cell k covers (k*cell, (k+1)*cell]
    t = np.asarray(coord, dtype=float) / cell
    return (np.ceil(t) - 1).astype(np.int64)


class GlobalMap:
    """Bird's-eye map in the ground plane of frame 0, grown lazily in square tiles."""

    def __init__(self, cell_size: float = 0.2, threshold: float = 40.0, tile: int = 64):
        self.cell_size = float(cell_size)
        self.threshold = float(threshold)
        self.tile = int(tile)
        self.offset = np.zeros(2, dtype=np.int64)  # global index of array element [0, 0]
        self.acc = np.zeros((0, 0))
        self.count = np.zeros((0, 0), dtype=np.int64)
        self.forced_unknown = np.zeros((0, 0), dtype=bool)
        self.trajectory: list[AffineTransform2D] = []
        self.diagnostics = {"frames": 0, "dynamic_cells": 0}

    @property
    def shape(self):
        return self.acc.shape

    def _ensure(self, gi, gj):
        if gi.size == 0:
            return
        lo = np.array([gi.min(), gj.min()])
        hi = np.array([gi.max(), gj.max()]) + 1
        cur_lo = self.offset
        cur_hi = self.offset + np.array(self.acc.shape)
        if self.acc.size and np.all(lo >= cur_lo) and np.all(hi <= cur_hi):
            return
        if self.acc.size:
            lo = np.minimum(lo, cur_lo)
            hi = np.maximum(hi, cur_hi)
        new_lo = (lo // self.tile) * self.tile
        new_hi = -((-hi) // self.tile) * self.tile
        shape = tuple(int(s) for s in new_hi - new_lo)
        acc = np.zeros(shape)
        cnt = np.zeros(shape, dtype=np.int64)
        unk = np.zeros(shape, dtype=bool)
        if self.acc.size:
            a0, b0 = self.offset - new_lo
            a1, b1 = a0 + self.acc.shape[0], b0 + self.acc.shape[1]
            acc[a0:a1, b0:b1] = self.acc
            cnt[a0:a1, b0:b1] = self.count
            unk[a0:a1, b0:b1] = self.forced_unknown
        self.acc, self.count, self.forced_unknown = acc, cnt, unk
        self.offset = new_lo.astype(np.int64)

    @property
    def state(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            occ = self.acc >= self.threshold * self.count
        st = np.where(occ, OCCUPIED, FREE)
        st[(self.count == 0) | self.forced_unknown] = UNKNOWN
        return st

    def cell_index(self, points):
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        return _global_index(p[:, 0], self.cell_size), _global_index(p[:, 1], self.cell_size)

    def window(self, i0, i1, j0, j1):
        """``(acc, count, state)`` over global index ranges, zero/unknown padded."""
        shape = (i1 - i0, j1 - j0)
        acc = np.zeros(shape)
        cnt = np.zeros(shape, dtype=np.int64)
        st = np.full(shape, UNKNOWN)
        if self.acc.size:
            s_lo = np.maximum([i0, j0], self.offset)
            s_hi = np.minimum([i1, j1], self.offset + np.array(self.acc.shape))
            if np.all(s_hi > s_lo):
                src = (slice(s_lo[0] - self.offset[0], s_hi[0] - self.offset[0]),
                       slice(s_lo[1] - self.offset[1], s_hi[1] - self.offset[1]))
                dst = (slice(s_lo[0] - i0, s_hi[0] - i0), slice(s_lo[1] - j0, s_hi[1] - j0))
                acc[dst] = self.acc[src]
                cnt[dst] = self.count[src]
                st[dst] = self.state[src]
        return acc, cnt, st

    def next_pose(self, motion: AffineTransform2D) -> AffineTransform2D:
        """Pose of the following frame given the estimated frame-to-frame motion."""
        prev = self.trajectory[-1] if self.trajectory else AffineTransform2D.identity(0, 0)
        return prev @ motion.inverse()

    def to_dict(self) -> dict:
        return {
            "cell_size": self.cell_size,
            "threshold": self.threshold,
            "offset": self.offset.tolist(),
            "shape": list(self.acc.shape),
            "layout": "image row 0 = largest z, image column = increasing x",
            "diagnostics": self.diagnostics,
        }

    def render(self) -> np.ndarray:
        st = self.state
        img = np.full(st.shape, _GRAY[UNKNOWN], dtype=np.uint8)
        img[st == FREE] = _GRAY[FREE]
        img[st == OCCUPIED] = _GRAY[OCCUPIED]
        return np.ascontiguousarray(img.T[::-1])

    def save(self, pgm_path, trajectory_path, meta_path=None, arrays_path=None) -> None:
        """Tri-level render, trajectory JSON, optional metadata and exact ``.npz`` arrays."""
        img = self.render()
        if img.size == 0:
            img = np.full((1, 1), _GRAY[UNKNOWN], dtype=np.uint8)
        if not cv2.imwrite(str(pgm_path), img):
            raise FormatError(f"{pgm_path}: could not write map")
        traj = [{"frame": k, "matrix": p.to_list()} for k, p in enumerate(self.trajectory)]
        with open(trajectory_path, "w") as fh:
            json.dump(traj, fh, indent=1)
        if meta_path is not None:
            with open(meta_path, "w") as fh:
                json.dump(self.to_dict(), fh, indent=1)
        if arrays_path is not None:
            np.savez(arrays_path, acc=self.acc, count=self.count, forced_unknown=self.forced_unknown,
                     state=self.state, offset=self.offset)


def fuse_grid(gmap: GlobalMap, local: OccupancyGrid, pose: AffineTransform2D,
              threshold: float | None = None, observed: np.ndarray | None = None,
              dynamic: np.ndarray | None = None) -> GlobalMap:
    """Splat a metric grid into the map at ``pose`` (local -> map).

    ``observed`` limits which local cells count as seen this frame (default
    all).  Global cells receiving a ``dynamic`` local cell get no evidence this
    frame and are forced unknown until observed again in a later frame.
    """
    g = local.geometry
    if g.mode != METRIC:
        raise GridModeError(f"map fusion needs a metric grid, got {g.mode}")
    if threshold is not None:
        gmap.threshold = float(threshold)
    xs, zs = np.meshgrid(g.col_centers(), g.row_centers(), indexing="ij")
    pts = pose.apply(np.column_stack([xs.ravel(), zs.ravel()]))
    gi, gj = gmap.cell_index(pts)
    obs = np.ones(g.shape, dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
    dyn = np.zeros(g.shape, dtype=bool) if dynamic is None else np.asarray(dynamic, dtype=bool)
    obs, dyn = obs.ravel(), dyn.ravel()
    touched = obs | dyn
    gi, gj, obs, dyn = gi[touched], gj[touched], obs[touched], dyn[touched]
    vals = local.likelihood.ravel()[touched]
    gmap._ensure(gi, gj)
    if gi.size:
        ai = gi - gmap.offset[0]
        aj = gj - gmap.offset[1]
        dyn_cells = np.zeros(gmap.shape, dtype=bool)
        dyn_cells[ai[dyn], aj[dyn]] = True
        use = obs & ~dyn_cells[ai, aj]
        np.add.at(gmap.acc, (ai[use], aj[use]), vals[use])
        np.add.at(gmap.count, (ai[use], aj[use]), 1)
        seen = np.zeros(gmap.shape, dtype=bool)
        seen[ai[use], aj[use]] = True
        gmap.forced_unknown &= ~seen
        gmap.forced_unknown |= dyn_cells
        gmap.diagnostics["dynamic_cells"] += int(dyn_cells.sum())
    gmap.trajectory.append(AffineTransform2D(pose.matrix, local.frame_id, 0))
    gmap.diagnostics["frames"] += 1
    return gmap


def load_odometry(path) -> list[AffineTransform2D]:
    """Per-frame motion matrices, one CSV row of six numbers (row-major 2x3) per frame pair."""
    out = []
    with open(path) as fh:
        for k, line in enumerate(l for l in fh if l.strip() and not l.lstrip().startswith("#")):
            vals = [float(x) for x in line.replace(",", " ").split()]
            if len(vals) != 6:
                raise FormatError(f"{path}: odometry row {k} has {len(vals)} values, expected 6")
            out.append(AffineTransform2D(np.array(vals).reshape(2, 3), k, k + 1))
    return out


def visible_cells(metric: GridGeometry, profile, u_grid: GridGeometry, cam: CameraIntrinsics) -> np.ndarray:
    """Metric cells seen this frame: in the image and not behind the first obstacle.

    Each cell center is projected to ``(u, d)`` and compared against the
    free-space boundary of its u-disparity column.
    """
    if metric.mode != METRIC or u_grid.mode != U_DISPARITY:
        raise GridModeError("visible_cells needs a metric grid and a u-disparity grid")
    xs, zs = np.meshgrid(metric.col_centers(), metric.row_centers(), indexing="ij")
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.focal_length_px * xs / zs + cam.principal_point[0]
        d = cam.fb / zs
    valid = zs > 0
    iu = np.where(valid, u_grid.col_index(np.where(valid, u, np.nan)), -1)
    ju = np.where(valid, u_grid.row_index(np.where(valid, d, np.nan)), -1)
    inside = (iu >= 0) & (ju >= 0)
    bound = np.asarray(profile.boundary)[np.where(inside, iu, 0)]
    return inside & ((bound < 0) | (ju <= bound))
