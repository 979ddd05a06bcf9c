"""Analytic synthetic scenes with exact ground truth.

A scene is a flat ground plane plus axis-aligned boxes standing on it, seen by
a rectified stereo camera that moves rigidly in the ground plane.  Rendering
is per-pixel ray casting, so depth, disparity, free space and flow are exact.

World frame: ``x`` right, ``z`` forward on the ground, ``y`` down.  A camera
pose ``(x, z, yaw)`` maps camera ground coordinates to world coordinates by
rotating by ``yaw`` then translating.  Camera ``Z`` equals the ray parameter
because rays are generated with unit forward component.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .disparity import DisparityImage
from .dynamic import FlowSample, PolynomialFlowModel, evaluate_model, image_center
from .geometry import CameraIntrinsics, GridGeometry
from .mapping import AffineTransform2D
from .segmentation import NO_BOUNDARY, FreeSpaceProfile

log = logging.getLogger(__name__)

SKY, GROUND = -1, 0


@dataclass(frozen=True)
class Box:
    """Box resting on the ground; ``center`` is the footprint center ``(x, z)``.

    ``velocity`` is either one ``(vx, vz)`` pair applied every frame or a list
    of per-frame pairs (motion from frame k to k+1).
    """

    center: tuple[float, float]
    size: tuple[float, float, float]  # (width along x, depth along z, height)
    velocity: tuple = (0.0, 0.0)

    def velocity_at(self, k: int) -> tuple[float, float]:
        v = self.velocity
        if len(v) == 2 and np.isscalar(v[0]):
            return float(v[0]), float(v[1])
        if k < len(v):
            return float(v[k][0]), float(v[k][1])
        return 0.0, 0.0

    @property
    def dynamic(self) -> bool:
        v = self.velocity
        if len(v) == 2 and np.isscalar(v[0]):
            return v[0] != 0 or v[1] != 0
        return any(a != 0 or b != 0 for a, b in v)

    def center_at(self, k: int) -> tuple[float, float]:
        x, z = self.center
        for m in range(k):
            vx, vz = self.velocity_at(m)
            x += vx
            z += vz
        return x, z

    def footprint(self, k: int = 0):
        """``(x0, x1, z0, z1)`` at frame ``k``."""
        x, z = self.center_at(k)
        w, dp, _ = self.size
        return x - w / 2, x + w / 2, z - dp / 2, z + dp / 2


@dataclass(frozen=True)
class SceneSpec:
    camera: CameraIntrinsics
    image_size: tuple[int, int]  # (width, height)
    camera_height: float = 1.5
    boxes: tuple = ()
    ego: tuple = ((0.0, 0.0, 0.0),)  # per-frame camera pose (x, z, yaw)
    texture_seed: int = 0
    texture_scale: float = 0.25

    @property
    def n_frames(self) -> int:
        return len(self.ego)

    def pose(self, k: int) -> AffineTransform2D:
        x, z, yaw = self.ego[k]
        return AffineTransform2D.rigid(yaw, x, z)

    def motion(self, k: int) -> AffineTransform2D:
        """Frame ``k`` -> frame ``k+1`` coordinates of a static point."""
        return (self.pose(k + 1).inverse() @ self.pose(k))

    def trajectory(self, k: int) -> AffineTransform2D:
        """Frame ``k`` ground coordinates expressed in frame 0."""
        return self.pose(0).inverse() @ self.pose(k)

    def to_dict(self) -> dict:
        return {
            "camera": self.camera.to_dict(),
            "image_size": list(self.image_size),
            "camera_height": self.camera_height,
            "boxes": [{"center": list(b.center), "size": list(b.size),
                       "velocity": [list(v) for v in b.velocity] if not np.isscalar(b.velocity[0]) else list(b.velocity)}
                      for b in self.boxes],
            "ego": [list(p) for p in self.ego],
            "texture_seed": self.texture_seed,
            "texture_scale": self.texture_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        boxes = []
        for b in d.get("boxes", []):
            vel = b.get("velocity", (0.0, 0.0))
            vel = tuple(vel) if np.isscalar(vel[0]) else tuple(tuple(v) for v in vel)
            boxes.append(Box(tuple(b["center"]), tuple(b["size"]), vel))
        return cls(
            camera=CameraIntrinsics.from_dict(d["camera"]),
            image_size=tuple(d["image_size"]),
            camera_height=float(d.get("camera_height", 1.5)),
            boxes=tuple(boxes),
            ego=tuple(tuple(p) for p in d.get("ego", [(0.0, 0.0, 0.0)])),
            texture_seed=int(d.get("texture_seed", 0)),
            texture_scale=float(d.get("texture_scale", 0.25)),
        )

    @classmethod
    def load(cls, path) -> "SceneSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


@dataclass
class SceneFrame:
    depth: np.ndarray  # camera Z per pixel, inf for sky
    disparity: DisparityImage
    object_id: np.ndarray  # SKY, GROUND or 1 + box index
    dynamic_mask: np.ndarray
    obstacle_depth: np.ndarray  # nearest box depth per image column, inf if none
    flow: np.ndarray  # (H, W, 2) forward flow to the next frame, NaN if none
    left: Optional[np.ndarray] = None
    right: Optional[np.ndarray] = None
    skipped_boxes: list = field(default_factory=list)


def _hash_intensity(ix, iy, iz, seed):
    h = (ix.astype(np.int64) * 73856093) ^ (iy.astype(np.int64) * 19349663) \
        ^ (iz.astype(np.int64) * 83492791) ^ (int(seed) * 2654435761)
    h = (h ^ (h >> 13)) * 1274126177
    h = h ^ (h >> 16)
    return (40 + (h & 0xFFFF) % 176).astype(np.uint8)


def _rays(spec: SceneSpec):
    w, h = spec.image_size
    cam = spec.camera
    cu, cv = cam.principal_point
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    return u, v, (u - cu) / cam.focal_length_px, (v - cv) / cam.focal_length_px


def _cast(spec: SceneSpec, k: int, x_offset: float = 0.0, skipped=None):
    """Ray cast frame ``k`` from a camera shifted by ``x_offset`` along its x axis.

    Returns depth, object id and world hit points ``(X, Y, Z)``.
    """
    u, v, rx, ry = _rays(spec)
    cx, cz, yaw = spec.ego[k]
    c, s = math.cos(yaw), math.sin(yaw)
    ox = cx + c * x_offset
    oz = cz + s * x_offset
    # world ground direction per unit camera depth
    dx = c * rx - s
    dz = s * rx + c
    hcam = spec.camera_height
    depth = np.full(u.shape, np.inf)
    oid = np.full(u.shape, SKY, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(ry > 0, hcam / ry, np.inf)
    hit = np.isfinite(tg)
    depth[hit] = tg[hit]
    oid[hit] = GROUND
    for b_idx, box in enumerate(spec.boxes):
        x0, x1, z0, z1 = box.footprint(k)
        # reject boxes entirely behind the camera plane
        corners = np.array([[x0, z0], [x0, z1], [x1, z0], [x1, z1]]) - [ox, oz]
        ahead = corners @ np.array([-s, c])
        if np.all(ahead <= 0):
            log.info("box %d behind camera at frame %d, skipped", b_idx, k)
            if skipped is not None:
                skipped.append(b_idx)
            continue
        y0, y1 = hcam - box.size[2], hcam
        tmin = np.zeros(u.shape)
        tmax = np.full(u.shape, np.inf)
        for o, dvec, lo, hi in ((ox, dx, x0, x1), (0.0, ry, y0, y1), (oz, dz, z0, z1)):
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo - o) / dvec
                t2 = (hi - o) / dvec
            inside = (o >= lo) & (o <= hi)
            zero = dvec == 0
            ta = np.where(zero, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
            tb = np.where(zero, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
            tmin = np.maximum(tmin, ta)
            tmax = np.minimum(tmax, tb)
        hitb = (tmax >= tmin) & (tmin > 0) & (tmin < depth)
        depth[hitb] = tmin[hitb]
        oid[hitb] = b_idx + 1
    with np.errstate(invalid="ignore"):
        X = ox + dx * depth
        Y = ry * depth
        Z = oz + dz * depth
    return depth, oid, (X, Y, Z)


def _texture(spec: SceneSpec, k: int, oid, pts, ray_dir):
    X, Y, Z = pts
    img = np.zeros(oid.shape, dtype=np.uint8)
    sc = spec.texture_scale
    seed = spec.texture_seed
    g = oid == GROUND
    img[g] = _hash_intensity(np.floor(X[g] / (2 * sc)), np.zeros(g.sum()), np.floor(Z[g] / (2 * sc)), seed)
    for b_idx, box in enumerate(spec.boxes):
        m = oid == b_idx + 1
        if not m.any():
            continue
        bx, bz = box.center_at(k)
        # nudge into the box so the face coordinate floors consistently
        lx = X[m] - bx + 1e-6 * ray_dir[0][m]
        ly = Y[m] + 1e-6 * ray_dir[1][m]
        lz = Z[m] - bz + 1e-6 * ray_dir[2][m]
        img[m] = _hash_intensity(np.floor(lx / sc), np.floor(ly / sc), np.floor(lz / sc), seed + 7919 * (b_idx + 1))
    img[oid == SKY] = 230
    return img


def _render_intensity(spec, k, x_offset=0.0):
    depth, oid, pts = _cast(spec, k, x_offset)
    _, _, rx, ry = _rays(spec)
    _, _, yaw = spec.ego[k]
    c, s = math.cos(yaw), math.sin(yaw)
    return _texture(spec, k, oid, pts, (c * rx - s, ry, s * rx + c))


def _project(spec: SceneSpec, k: int, X, Y, Z):
    """Image coordinates and camera depth of world points in frame ``k``."""
    cx, cz, yaw = spec.ego[k]
    c, s = math.cos(yaw), math.sin(yaw)
    cam = spec.camera
    with np.errstate(divide="ignore", invalid="ignore"):
        px, pz = X - cx, Z - cz
        xc = c * px + s * pz
        zc = -s * px + c * pz
        u = cam.focal_length_px * xc / zc + cam.principal_point[0]
        v = cam.focal_length_px * Y / zc + cam.principal_point[1]
    return u, v, zc


def generate_scene(spec: SceneSpec, k: int, images: bool = True) -> SceneFrame:
    """Exact disparity, free space, dynamic mask and flow for frame ``k``."""
    if not 0 <= k < spec.n_frames:
        raise IndexError(f"frame {k} outside 0..{spec.n_frames - 1}")
    skipped: list = []
    depth, oid, (X, Y, Z) = _cast(spec, k, 0.0, skipped)
    cam = spec.camera
    with np.errstate(divide="ignore"):
        disp = np.where(np.isfinite(depth), cam.fb / depth, np.nan)
    dyn_ids = [i + 1 for i, b in enumerate(spec.boxes) if b.dynamic]
    dynamic_mask = np.isin(oid, dyn_ids)
    obstacle = np.where(oid >= 1, depth, np.inf).min(axis=0)
    flow = np.full(depth.shape + (2,), np.nan)
    if k + 1 < spec.n_frames:
        X1, Z1 = X.copy(), Z.copy()
        for b_idx, box in enumerate(spec.boxes):
            m = oid == b_idx + 1
            vx, vz = box.velocity_at(k)
            X1[m] += vx
            Z1[m] += vz
        u1, v1, _ = _project(spec, k + 1, X1, Y, Z1)
        u0, v0 = _rays(spec)[:2]
        hit = oid != SKY
        flow[..., 0] = np.where(hit, u1 - u0, np.nan)
        flow[..., 1] = np.where(hit, v1 - v0, np.nan)
    frame = SceneFrame(depth, DisparityImage(disp), oid, dynamic_mask, obstacle, flow, skipped_boxes=skipped)
    if images:
        _, _, rx, ry = _rays(spec)
        _, _, yaw = spec.ego[k]
        c, s = math.cos(yaw), math.sin(yaw)
        frame.left = _texture(spec, k, oid, (X, Y, Z), (c * rx - s, ry, s * rx + c))
        frame.right = _render_intensity(spec, k, cam.baseline_m)
    return frame


def free_space_profile(frame: SceneFrame, g: GridGeometry, cam: CameraIntrinsics) -> FreeSpaceProfile:
    """Ground-truth profile on a u-disparity grid: row holding the nearest obstacle disparity."""
    cols = g.col_centers()
    b = np.full(g.n_cols, NO_BOUNDARY, dtype=np.int64)
    w = len(frame.obstacle_depth)
    for i, u in enumerate(cols):
        x = int(round(u))
        if 0 <= x < w and np.isfinite(frame.obstacle_depth[x]):
            j = g.row_index(cam.fb / frame.obstacle_depth[x])
            if j >= 0:
                b[i] = j
    return FreeSpaceProfile(b, g.n_rows)


def planted_flow_field(model: PolynomialFlowModel, n_inliers: int, n_outliers: int, noise_sigma: float = 0.0,
                       outlier_offset: float = 50.0, seed: int = 0, image_size=(1242, 375)):
    """Flow samples whose magnitude follows ``model`` plus noise; outliers get an extra offset.

    Returns ``(samples, is_outlier)``.  Positions are uniform over the centered
    image.  Flow directions are random; magnitudes are ``|model + noise|``.
    """
    if noise_sigma < 0 or outlier_offset < 0:
        raise ValueError("noise and outlier offset must be non-negative")
    rng = np.random.default_rng(seed)
    n = n_inliers + n_outliers
    w, h = image_size
    cx, cy = image_center((h, w))
    u = rng.uniform(-cx, cx, n)
    v = rng.uniform(-cy, cy, n)
    is_out = np.zeros(n, dtype=bool)
    is_out[n_inliers:] = True
    is_out = is_out[rng.permutation(n)]
    psi = evaluate_model(model, u, v) + (rng.normal(0.0, noise_sigma, n) if noise_sigma > 0 else 0.0)
    psi = psi + np.where(is_out, outlier_offset, 0.0)
    ang = rng.uniform(0.0, 2 * math.pi, n)
    samples = [FlowSample(float(a), float(b), float(p * math.cos(t)), float(p * math.sin(t)))
               for a, b, p, t in zip(u, v, psi, ang)]
    return samples, is_out


def corridor_scene(n_frames: int = 10, width: int = 400, height: int = 300, focal: float = 400.0,
                   baseline: float = 0.5, ego_step: float = 0.4, box_speed: float = 1.0,
                   seed: int = 0) -> SceneSpec:
    """Straight corridor with a side street; one box crosses the corridor through the gap."""
    cam = CameraIntrinsics(focal, ((width - 1) / 2.0, (height - 1) / 2.0), baseline)
    half, thick, wall_h = 3.1, 0.4, 2.5
    gap = (9.0, 12.0)
    walls = []
    for sx in (-1, 1):
        xc = sx * (half + thick / 2)
        walls.append(Box((xc, (0.0 + gap[0]) / 2), (thick, gap[0], wall_h)))
        walls.append(Box((xc, (gap[1] + 60.0) / 2), (thick, 60.0 - gap[1], wall_h)))
    mover = Box((-4.5, 10.5), (1.2, 1.2, 1.6), (box_speed, 0.0))
    ego = tuple((0.0, ego_step * k, 0.0) for k in range(n_frames))
    return SceneSpec(cam, (width, height), 1.5, tuple(walls) + (mover,), ego, seed)


def write_sequence(spec: SceneSpec, root) -> None:
    """Write a scene as a pipeline input directory (images, disparity, exact odometry)."""
    from pathlib import Path

    from .disparity import save_disparity, save_gray

    root = Path(root)
    for sub in ("left", "right", "disparity"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "camera.json").write_text(json.dumps(spec.camera.to_dict(), indent=1))
    spec.save(root / "scene.json")
    for k in range(spec.n_frames):
        fr = generate_scene(spec, k)
        name = f"{k:06d}.png"
        save_gray(fr.left, root / "left" / name)
        save_gray(fr.right, root / "right" / name)
        save_disparity(fr.disparity, root / "disparity" / name)
    with open(root / "odometry.csv", "w") as fh:
        for k in range(spec.n_frames - 1):
            fh.write(",".join(repr(float(x)) for x in spec.motion(k).matrix.ravel()) + "\n")
