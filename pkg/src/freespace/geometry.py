"""Pinhole stereo camera, measurements and grid cell geometry.

Two grid layouts are supported:

``u-disparity``
    columns are image columns ``u``, rows are disparities.  Row 0 holds the
    largest disparity (nearest to the vehicle) so the row index grows with
    distance.
``metric``
    columns are lateral ground coordinates ``x`` and rows are depth ``z``
    in meters, row 0 nearest.

Cells are half-open in index space: a coordinate lying exactly on the border
between two cells belongs to the lower-index one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidMeasurementError

U_DISPARITY = "u-disparity"
METRIC = "metric"
MODES = (U_DISPARITY, METRIC)


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_length_px: float
    principal_point: tuple[float, float]
    baseline_m: float

    def __post_init__(self):
        if not self.focal_length_px > 0:
            raise ValueError(f"focal_length_px must be > 0, got {self.focal_length_px}")
        if not self.baseline_m > 0:
            raise ValueError(f"baseline_m must be > 0, got {self.baseline_m}")
        object.__setattr__(self, "principal_point", tuple(float(c) for c in self.principal_point))

    @property
    def fb(self) -> float:
        """Focal length times baseline; depth = fb / disparity."""
        return self.focal_length_px * self.baseline_m

    def to_dict(self) -> dict:
        return {
            "focal_length_px": self.focal_length_px,
            "principal_point": list(self.principal_point),
            "baseline_m": self.baseline_m,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["focal_length_px"]), tuple(d["principal_point"]), float(d["baseline_m"]))


def _check_spd(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (3, 3):
        raise InvalidMeasurementError(f"covariance must be 3x3, got shape {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=1e-12, atol=0.0):
        raise InvalidMeasurementError("covariance is not symmetric")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise InvalidMeasurementError("covariance is not positive-definite") from None
    return cov


@dataclass(frozen=True)
class Measurement:
    """One stereo observation ``(u, v, d)`` and its error covariance."""

    u: float
    v: float
    d: float
    covariance: np.ndarray = field(default_factory=lambda: np.diag([0.25, 0.25, 1.0]))

    def __post_init__(self):
        cov = _check_spd(self.covariance)
        cov.setflags(write=False)
        object.__setattr__(self, "covariance", cov)

    @property
    def is_valid(self) -> bool:
        return self.d > 0 and math.isfinite(self.d)


def triangulate(m: Measurement, cam: CameraIntrinsics) -> tuple[float, float, float]:
    """Back-project a measurement to camera coordinates (X right, Y down, Z forward)."""
    if not m.is_valid:
        raise InvalidMeasurementError(f"disparity must be positive, got {m.d}")
    z = cam.fb / m.d
    cu, cv = cam.principal_point
    return ((m.u - cu) * z / cam.focal_length_px, (m.v - cv) * z / cam.focal_length_px, z)


def triangulate_arrays(u, v, d, cam: CameraIntrinsics):
    """Vectorised :func:`triangulate`; non-positive disparities give NaN."""
    u, v, d = (np.asarray(a, dtype=float) for a in (u, v, d))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(d > 0, cam.fb / np.where(d > 0, d, 1.0), np.nan)
    cu, cv = cam.principal_point
    f = cam.focal_length_px
    return (u - cu) * z / f, (v - cv) * z / f, z


def project_ground(x, z, cam: CameraIntrinsics):
    """Map ground-plane ``(x, z)`` to ``(u, d)``; the inverse of triangulation on those axes."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    cu = cam.principal_point[0]
    return cam.focal_length_px * x / z + cu, cam.fb / z


def _axis_index(coord, first_center, step, n):
    """Index of the cell containing ``coord`` along one axis, or -1 when outside.

    ``step`` is the signed coordinate increment per index.  Cell ``k`` covers
    ``(k, k + 1]`` in normalised index space (cell 0 also owns its outer edge),
    so shared borders go to the lower index.
    """
    coord = np.asarray(coord, dtype=float)
    t = (coord - (first_center - 0.5 * step)) / step
    with np.errstate(invalid="ignore"):
        idx = np.ceil(t) - 1.0
        idx = np.where(t == 0.0, 0.0, idx)
        ok = np.isfinite(idx) & (idx >= 0) & (idx < n)
    return np.where(ok, idx, -1).astype(np.int64)


@dataclass(frozen=True)
class GridGeometry:
    """Cell layout of an occupancy grid.

    ``origin`` is the coordinate of the center of cell (0, 0): ``(u, d)`` in
    u-disparity mode, ``(x, z)`` meters in metric mode.
    """

    n_cols: int
    n_rows: int
    col_size: float
    row_size: float
    mode: str = U_DISPARITY
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown grid mode {self.mode!r}; expected one of {MODES}")
        if self.n_cols < 1 or self.n_rows < 1:
            raise ValueError("grid needs at least one row and one column")
        if not (self.col_size > 0 and self.row_size > 0):
            raise ValueError("cell sizes must be positive")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def u_disparity(cls, width: int, max_disparity: int, cell: float = 1.0) -> "GridGeometry":
        """Image width by max disparity grid; row ``j`` is centered on ``max_disparity - j*cell``."""
        n_cols = int(math.ceil(width / cell))
        n_rows = int(math.ceil(max_disparity / cell))
        return cls(n_cols, n_rows, cell, cell, U_DISPARITY, (0.0, float(max_disparity)))

    @classmethod
    def metric(cls, cell: float = 0.2, depth: float = 40.0, lateral: float = 20.0) -> "GridGeometry":
        """Ground-plane grid covering ``[-lateral, lateral] x [0, depth]`` meters."""
        n_cols = int(round(2 * lateral / cell))
        n_rows = int(round(depth / cell))
        return cls(n_cols, n_rows, cell, cell, METRIC, (-lateral + 0.5 * cell, 0.5 * cell))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_cols, self.n_rows)

    @property
    def row_step(self) -> float:
        # u-disparity rows run from large to small disparity
        return -self.row_size if self.mode == U_DISPARITY else self.row_size

    def col_centers(self) -> np.ndarray:
        return self.origin[0] + self.col_size * np.arange(self.n_cols)

    def row_centers(self) -> np.ndarray:
        return self.origin[1] + self.row_step * np.arange(self.n_rows)

    def center(self, i: int, j: int) -> tuple[float, float]:
        if not (0 <= i < self.n_cols and 0 <= j < self.n_rows):
            raise IndexError(f"cell ({i}, {j}) outside {self.n_cols}x{self.n_rows} grid")
        return (self.origin[0] + i * self.col_size, self.origin[1] + j * self.row_step)

    def col_index(self, a):
        return _axis_index(a, self.origin[0], self.col_size, self.n_cols)

    def row_index(self, b):
        return _axis_index(b, self.origin[1], self.row_step, self.n_rows)

    def locate(self, a, b):
        """Vectorised cell lookup on native axis coordinates; -1 marks outside."""
        i = self.col_index(a)
        j = self.row_index(b)
        outside = (i < 0) | (j < 0)
        return np.where(outside, -1, i), np.where(outside, -1, j)

    def cell_uv_centers(self, cam: Optional[CameraIntrinsics] = None):
        """Per-cell ``(u, d)`` centers, each shaped ``(n_cols, n_rows)``.

        Metric cells are converted through the camera; cells at or behind the
        camera plane get NaN.
        """
        a = self.col_centers()[:, None]
        b = self.row_centers()[None, :]
        if self.mode == U_DISPARITY:
            return np.broadcast_to(a, self.shape).copy(), np.broadcast_to(b, self.shape).copy()
        if cam is None:
            raise ValueError("metric grid needs camera intrinsics to convert cells to (u, d)")
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(b > 0, b, np.nan)
            u, d = project_ground(a, z, cam)
        return np.broadcast_to(u, self.shape).copy(), np.broadcast_to(d, self.shape).copy()

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_cols": self.n_cols,
            "n_rows": self.n_rows,
            "col_size": self.col_size,
            "row_size": self.row_size,
            "origin": list(self.origin),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridGeometry":
        return cls(
            int(d["n_cols"]),
            int(d["n_rows"]),
            float(d["col_size"]),
            float(d["row_size"]),
            d.get("mode", U_DISPARITY),
            tuple(d.get("origin", (0.0, 0.0))),
        )


def cell_of(m: Measurement, g: GridGeometry, cam: Optional[CameraIntrinsics] = None) -> Optional[tuple[int, int]]:
    """Cell containing a measurement, or ``None`` when it falls outside the grid."""
    if g.mode == U_DISPARITY:
        a, b = m.u, m.d
    else:
        if cam is None:
            raise ValueError("metric grid lookup needs camera intrinsics")
        if not m.is_valid:
            return None
        x, _, z = triangulate(m, cam)
        a, b = x, z
    i, j = g.locate(a, b)
    if i < 0:
        return None
    return int(i), int(j)
