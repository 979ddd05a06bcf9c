"""Stochastic occupancy grids built from Gaussian measurement likelihoods.

Each measurement ``m_k = (u_k, v_k, d_k)`` with covariance ``tau_k`` adds

    G(delta) = (2 pi)^(-3/2) |tau|^(-p) exp(-1/2 delta^T tau^-1 delta)

to every cell, with ``delta = (u_ij - u_k, 0, d_ij - d_k)``.  ``p`` is 1/2 in
``standard`` mode (the trivariate normal density) and 1 in ``paper-literal``
mode, which keeps the determinant un-rooted.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from . import kernels
from .disparity import MeasurementSet
from .errors import FormatError, LikelihoodError
from .geometry import METRIC, U_DISPARITY, CameraIntrinsics, GridGeometry, Measurement

STANDARD = "standard"
PAPER_LITERAL = "paper-literal"
NORMALIZATION_MODES = (STANDARD, PAPER_LITERAL)

_PEAK = (2.0 * math.pi) ** -1.5


def _det_power(mode: str) -> float:
    if mode == STANDARD:
        return 0.5
    if mode == PAPER_LITERAL:
        return 1.0
    raise ValueError(f"unknown normalization mode {mode!r}; expected one of {NORMALIZATION_MODES}")


def gaussian_likelihood(delta, tau, mode: str = STANDARD) -> float:
    p = _det_power(mode)
    delta = np.asarray(delta, dtype=float).reshape(3)
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (3, 3) or not np.allclose(tau, tau.T, rtol=1e-12, atol=0.0):
        raise LikelihoodError("covariance must be a symmetric 3x3 matrix")
    try:
        chol = np.linalg.cholesky(tau)
    except np.linalg.LinAlgError:
        raise LikelihoodError("covariance is not positive-definite") from None
    w = np.linalg.solve(chol, delta)
    q = float(w @ w)
    det = float(np.prod(np.diag(chol))) ** 2
    return _PEAK * det ** -p * math.exp(-0.5 * q)


def cell_likelihood(cell, m: Measurement, g: GridGeometry, mode: str = STANDARD,
                    cam: Optional[CameraIntrinsics] = None) -> float:
    """Likelihood contributed by one measurement to one cell; ``v`` is ignored."""
    i, j = cell
    a, b = g.center(i, j)
    if g.mode == METRIC:
        if cam is None:
            raise ValueError("metric grid needs camera intrinsics")
        if b <= 0:
            return 0.0
        a = cam.focal_length_px * a / b + cam.principal_point[0]
        b = cam.fb / b
    return gaussian_likelihood((a - m.u, 0.0, b - m.d), m.covariance, mode)


@dataclass
class OccupancyGrid:
    geometry: GridGeometry
    likelihood: np.ndarray
    frame_id: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.likelihood = np.asarray(self.likelihood, dtype=np.float64)
        if self.likelihood.shape != self.geometry.shape:
            raise ValueError(f"likelihood shape {self.likelihood.shape} != geometry {self.geometry.shape}")

    def __add__(self, other: "OccupancyGrid") -> "OccupancyGrid":
        if other.geometry != self.geometry:
            raise ValueError("cannot add grids with different geometry")
        return OccupancyGrid(self.geometry, self.likelihood + other.likelihood, self.frame_id)

    def scaled(self, c: float) -> "OccupancyGrid":
        return OccupancyGrid(self.geometry, self.likelihood * c, self.frame_id)


def _restricted_precision(cov: np.ndarray):
    """Inverse covariance on the (u, d) plane with the v error pinned at 0."""
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise LikelihoodError("a measurement covariance is not positive-definite") from None
    inv = np.linalg.inv(cov)
    return np.column_stack([inv[:, 0, 0], 0.5 * (inv[:, 0, 2] + inv[:, 2, 0]), inv[:, 2, 2]])


def _index_window(lo, hi, origin, step, n):
    """Half-open index window covering coordinates in ``[lo, hi]`` plus one cell margin."""
    p1 = (lo - origin) / step
    p2 = (hi - origin) / step
    a = np.floor(np.minimum(p1, p2)) - 1
    b = np.ceil(np.maximum(p1, p2)) + 2
    a = np.clip(np.nan_to_num(a, nan=0, neginf=0, posinf=n), 0, n)
    b = np.clip(np.nan_to_num(b, nan=n, neginf=0, posinf=n), 0, n)
    return a.astype(np.int64), b.astype(np.int64)


def _boxes(uvd, pinv, g: GridGeometry, radius: float, cam):
    n = len(uvd)
    if not math.isfinite(radius):
        return np.tile(np.array([0, g.n_cols, 0, g.n_rows], dtype=np.int64), (n, 1))
    # bounding box of the ellipse q <= r^2 in (u, d)
    det = pinv[:, 0] * pinv[:, 2] - pinv[:, 1] ** 2
    hu = radius * np.sqrt(pinv[:, 2] / det)
    hd = radius * np.sqrt(pinv[:, 0] / det)
    u, d = uvd[:, 0], uvd[:, 2]
    if g.mode == U_DISPARITY:
        i0, i1 = _index_window(u - hu, u + hu, g.origin[0], g.col_size, g.n_cols)
        j0, j1 = _index_window(d - hd, d + hd, g.origin[1], g.row_step, g.n_rows)
    else:
        f = cam.focal_length_px
        cu = cam.principal_point[0]
        far = g.origin[1] + g.row_step * (g.n_rows + 1)
        d_hi = d + hd
        d_lo = d - hd
        with np.errstate(divide="ignore"):
            z_near = cam.fb / d_hi
            z_far = np.where(d_lo > 0, cam.fb / np.where(d_lo > 0, d_lo, 1.0), np.inf)
        z_far = np.minimum(z_far, far)
        xs = np.stack([(u - hu - cu) * z_near, (u + hu - cu) * z_near,
                       (u - hu - cu) * z_far, (u + hu - cu) * z_far]) / f
        i0, i1 = _index_window(xs.min(axis=0), xs.max(axis=0), g.origin[0], g.col_size, g.n_cols)
        j0, j1 = _index_window(z_near, z_far, g.origin[1], g.row_step, g.n_rows)
    return np.ascontiguousarray(np.column_stack([i0, i1, j0, j1]), dtype=np.int64)


def build_grid(ms: MeasurementSet, g: GridGeometry, mode: str = STANDARD, truncation: float = 4.0,
               cam: Optional[CameraIntrinsics] = None, frame_id: int = 0, backend: str | None = None) -> OccupancyGrid:
    """Accumulate ``D(i, j) = sum_k L_ij(m_k)``.

    Each measurement only touches cells whose Mahalanobis distance in the
    (u, d) plane is at most ``truncation``; pass ``math.inf`` for the exact sum.
    """
    p = _det_power(mode)
    if not truncation > 0:
        raise ValueError("truncation radius must be > 0")
    if g.mode == METRIC and cam is None:
        raise ValueError("metric grid needs camera intrinsics")
    cell_u, cell_d = g.cell_uv_centers(cam)
    if len(ms) == 0:
        return OccupancyGrid(g, np.zeros(g.shape), frame_id)
    pinv = _restricted_precision(ms.cov)
    norm = _PEAK * np.linalg.det(ms.cov) ** -p
    boxes = _boxes(ms.uvd, pinv, g, truncation, cam)
    kern = kernels.get_backend(backend)
    D = kern.accumulate_grid(
        np.ascontiguousarray(cell_u), np.ascontiguousarray(cell_d),
        np.ascontiguousarray(ms.uvd[:, 0]), np.ascontiguousarray(ms.uvd[:, 2]),
        np.ascontiguousarray(pinv), np.ascontiguousarray(norm), boxes, float(truncation) ** 2,
    )
    return OccupancyGrid(g, D, frame_id)


# grid files: 16-bit PGM, far rows at the top, plus a JSON sidecar


def _sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def save_grid(grid: OccupancyGrid, path, exact: bool = True) -> None:
    """16-bit PGM/PNG preview plus a JSON sidecar; ``exact`` also writes the float64 values as ``.npy``."""
    D = grid.likelihood
    lo, hi = float(D.min()), float(D.max())
    scale = hi - lo
    q = np.zeros(D.shape) if scale == 0 else np.round((D - lo) / scale * 65535.0)
    img = q.astype(np.uint16).T[::-1]
    if not cv2.imwrite(str(path), np.ascontiguousarray(img)):
        raise FormatError(f"{path}: could not write grid image")
    meta = {"geometry": grid.geometry.to_dict(), "min": lo, "max": hi, "frame_id": grid.frame_id,
            "layout": "image row 0 = farthest grid row, image column = grid column"}
    if exact:
        np.save(Path(path).with_suffix(".npy"), D)
        meta["values"] = Path(path).with_suffix(".npy").name
    _sidecar(path).write_text(json.dumps(meta, indent=2))


def load_grid(path) -> OccupancyGrid:
    """Read a saved grid; exact values are used when the ``.npy`` companion exists."""
    meta_path = _sidecar(path)
    if not meta_path.is_file():
        raise FormatError(f"{meta_path}: missing grid sidecar")
    meta = json.loads(meta_path.read_text())
    g = GridGeometry.from_dict(meta["geometry"])
    exact = Path(path).with_name(meta["values"]) if "values" in meta else None
    if exact is not None and exact.is_file():
        D = np.load(exact)
        if D.shape != g.shape:
            raise FormatError(f"{exact}: shape {D.shape} does not match geometry {g.shape}")
        return OccupancyGrid(g, D, meta.get("frame_id", 0))
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None or img.dtype != np.uint16 or img.ndim != 2:
        raise FormatError(f"{path}: expected a 16-bit single channel grid image")
    q = img[::-1].T.astype(np.float64)
    D = meta["min"] + q / 65535.0 * (meta["max"] - meta["min"])
    return OccupancyGrid(g, D, meta.get("frame_id", 0))
