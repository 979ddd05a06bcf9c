"""Disparity images: file I/O, a baseline SAD block matcher, and measurement extraction."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Sequence

import cv2
import numpy as np

from . import kernels
from .errors import FormatError
from .geometry import Measurement

KITTI_SCALE = 256.0


@dataclass(frozen=True)
class DisparityImage:
    """Disparity in pixels; invalid pixels hold NaN."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"disparity must be 2-D, got shape {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)


def _format_of(path, fmt):
    if fmt is not None:
        return fmt
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".png":
        return "png"
    if ext in (".pgm", ".pnm"):
        return "pgm"
    raise FormatError(f"cannot infer image format from extension {ext!r}")


def load_disparity(path, fmt: str | None = None) -> DisparityImage:
    """Read a 16-bit single channel disparity file (``raw / 256``, raw 0 = invalid)."""
    fmt = _format_of(path, fmt)
    if fmt not in ("png", "pgm"):
        raise FormatError(f"unsupported disparity format {fmt!r}")
    if not os.path.isfile(path):
        raise FormatError(f"{path}: file does not exist")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"{path}: unreadable or not a {fmt} image")
    if raw.ndim != 2:
        raise FormatError(f"{path}: expected 1 channel, found {raw.shape[2]}")
    if raw.dtype != np.uint16:
        bits = raw.dtype.itemsize * 8
        raise FormatError(f"{path}: expected 16-bit disparity, found {bits}-bit")
    values = np.where(raw == 0, np.nan, raw.astype(np.float64) / KITTI_SCALE)
    return DisparityImage(values)


def encode_disparity(img: DisparityImage) -> np.ndarray:
    """Quantise to the 16-bit KITTI encoding; invalid and sub-1/256 values map to 0."""
    v = img.values
    raw = np.zeros(v.shape, dtype=np.uint16)
    ok = np.isfinite(v) & (v > 0)
    raw[ok] = np.clip(np.round(v[ok] * KITTI_SCALE), 0, 65535).astype(np.uint16)
    return raw


def save_disparity(img: DisparityImage, path) -> None:
    _format_of(path, None)
    if not cv2.imwrite(str(path), encode_disparity(img)):
        raise FormatError(f"{path}: could not write image")


def load_gray(path) -> np.ndarray:
    """Read an 8-bit image as grayscale; colour inputs are converted."""
    if not os.path.isfile(path):
        raise FormatError(f"{path}: file does not exist")
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"{path}: unreadable image")
    if img.dtype != np.uint8:
        raise FormatError(f"{path}: expected 8-bit image, found {img.dtype.itemsize * 8}-bit")
    if img.ndim == 3:
        if img.shape[2] == 4:
            img = cv2.cvtColor(img, cv2.COLOR_BGRA2GRAY)
        elif img.shape[2] == 3:
            img = cv2.cvtColor(img, cv2.COLOR_BGR2GRAY)
        else:
            raise FormatError(f"{path}: unsupported channel count {img.shape[2]}")
    return img


def save_gray(img: np.ndarray, path) -> None:
    if not cv2.imwrite(str(path), np.asarray(img, dtype=np.uint8)):
        raise FormatError(f"{path}: could not write image")


def block_match(
    left: np.ndarray,
    right: np.ndarray,
    radius: int = 3,
    max_disparity: int = 64,
    uniqueness_ratio: float = 0.9,
    direction: str = "left",
    workers: int = 1,
    backend: str | None = None,
) -> DisparityImage:
    """Winner-take-all SAD block matching along image rows.

    With ``direction="left"`` the left pixel ``x`` is compared against the
    right pixel ``x - d`` (standard rectified geometry); ``"right"`` searches
    ``x + d``.  A pixel is kept only when its best cost is strictly below
    ``uniqueness_ratio`` times the best cost among disparities more than one
    step away from the winner.  Pixels whose window or full search range
    leaves the image are invalid.  ``backend`` picks the kernel ("cython" or
    "python"); the default is the one selected at import.
    """
    left = np.asarray(left)
    right = np.asarray(right)
    if left.shape != right.shape:
        raise ValueError(f"stereo pair dimension mismatch: {left.shape} vs {right.shape}")
    if left.ndim != 2:
        raise ValueError("block matching expects grayscale images")
    if direction not in ("left", "right"):
        raise ValueError(f"direction must be 'left' or 'right', got {direction!r}")
    if radius < 0 or max_disparity < 0:
        raise ValueError("radius and max_disparity must be non-negative")
    sign = 1 if direction == "left" else -1
    lft = np.ascontiguousarray(left, dtype=np.int32)
    rgt = np.ascontiguousarray(right, dtype=np.int32)
    h = lft.shape[0]
    out = np.empty(lft.shape, dtype=np.float64)
    kern = kernels.get_backend(backend).block_match_rows
    if workers <= 1 or h < 2 * workers:
        kern(lft, rgt, radius, max_disparity, sign, float(uniqueness_ratio), 0, h, out)
    else:
        bounds = np.linspace(0, h, workers + 1).astype(int)
        with ThreadPoolExecutor(workers) as ex:
            futs = [
                ex.submit(kern, lft, rgt, radius, max_disparity, sign, float(uniqueness_ratio), int(a), int(b), out)
                for a, b in zip(bounds[:-1], bounds[1:])
            ]
            for f in futs:
                f.result()
    return DisparityImage(out)


@dataclass(frozen=True)
class CovarianceModel:
    """Diagonal measurement covariance; ``sigma_d`` may grow linearly with disparity."""

    sigma_u: float = 0.5
    sigma_v: float = 0.5
    sigma_d: float = 1.0
    sigma_d_per_disparity: float = 0.0

    def __post_init__(self):
        if min(self.sigma_u, self.sigma_v, self.sigma_d) <= 0 or self.sigma_d_per_disparity < 0:
            raise ValueError("covariance sigmas must be positive")

    def diagonals(self, d: np.ndarray) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        sd = self.sigma_d + self.sigma_d_per_disparity * d
        out = np.empty(d.shape + (3,))
        out[..., 0] = self.sigma_u ** 2
        out[..., 1] = self.sigma_v ** 2
        out[..., 2] = sd ** 2
        return out


class MeasurementSet:
    """Ordered measurements stored column-wise.

    ``uvd`` is ``(m, 3)`` and ``cov`` is ``(m, 3, 3)``.
    """

    def __init__(self, uvd, cov):
        uvd = np.asarray(uvd, dtype=np.float64).reshape(-1, 3)
        cov = np.asarray(cov, dtype=np.float64).reshape(-1, 3, 3)
        if len(uvd) != len(cov):
            raise ValueError("uvd and cov lengths differ")
        self.uvd = uvd
        self.cov = cov

    @classmethod
    def empty(cls) -> "MeasurementSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3, 3)))

    @classmethod
    def from_measurements(cls, ms: Sequence[Measurement]) -> "MeasurementSet":
        if not ms:
            return cls.empty()
        return cls([(m.u, m.v, m.d) for m in ms], [m.covariance for m in ms])

    def __len__(self) -> int:
        return len(self.uvd)

    @property
    def count(self) -> int:
        return len(self.uvd)

    def __iter__(self) -> Iterator[Measurement]:
        for (u, v, d), c in zip(self.uvd, self.cov):
            yield Measurement(float(u), float(v), float(d), c)

    def __getitem__(self, idx) -> "MeasurementSet":
        if isinstance(idx, (int, np.integer)):
            idx = [idx]
        return MeasurementSet(self.uvd[idx], self.cov[idx])

    def concat(self, other: "MeasurementSet") -> "MeasurementSet":
        return MeasurementSet(np.vstack([self.uvd, other.uvd]), np.concatenate([self.cov, other.cov]))


def measurements_from_disparity(img: DisparityImage, stride=1, covariance: CovarianceModel | None = None) -> MeasurementSet:
    """One measurement per valid, positive disparity pixel on the stride lattice.

    ``stride`` is an int or a ``(u_stride, v_stride)`` pair.
    """
    su, sv = (stride, stride) if np.isscalar(stride) else stride
    if su < 1 or sv < 1:
        raise ValueError("stride must be >= 1")
    covariance = covariance or CovarianceModel()
    sub = img.values[::sv, ::su]
    vs, us = np.nonzero(np.isfinite(sub) & (sub > 0))
    d = sub[vs, us]
    uvd = np.column_stack([us * su, vs * sv, d]).astype(np.float64)
    cov = np.zeros((len(d), 3, 3))
    diag = covariance.diagonals(d)
    for a in range(3):
        cov[:, a, a] = diag[:, a]
    return MeasurementSet(uvd, cov)
