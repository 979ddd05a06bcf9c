"""Per-column free-space segmentation of an occupancy grid.

Columns are scanned from the row nearest to the vehicle (row 0) outward.
Everything at or beyond the first occupied cell is labelled occupied since it
is hidden behind the obstacle.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import cv2
import numpy as np
from scipy.ndimage import median_filter

from .errors import FormatError
from .occupancy import OccupancyGrid

NO_BOUNDARY = -1

FREE_GRAY = 255
OCCUPIED_GRAY = 128


@dataclass(frozen=True)
class FreeSpaceProfile:
    """``boundary[i]`` is the first occupied row of column ``i`` or ``NO_BOUNDARY``."""

    boundary: np.ndarray
    n_rows: int

    def __post_init__(self):
        b = np.asarray(self.boundary, dtype=np.int64)
        if np.any((b < NO_BOUNDARY) | (b >= self.n_rows)):
            raise ValueError("boundary index out of range")
        b.setflags(write=False)
        object.__setattr__(self, "boundary", b)

    @property
    def n_cols(self) -> int:
        return len(self.boundary)

    @property
    def occupied(self) -> np.ndarray:
        """Boolean ``(n_cols, n_rows)`` labels, True = occupied."""
        j = np.arange(self.n_rows)[None, :]
        b = self.boundary[:, None]
        return (b != NO_BOUNDARY) & (j >= b)

    @property
    def free(self) -> np.ndarray:
        return ~self.occupied

    def to_json(self) -> str:
        return json.dumps({
            "n_rows": self.n_rows,
            "boundary": [None if b == NO_BOUNDARY else int(b) for b in self.boundary],
        })

    @classmethod
    def from_json(cls, text: str) -> "FreeSpaceProfile":
        d = json.loads(text)
        return cls(np.array([NO_BOUNDARY if b is None else b for b in d["boundary"]]), int(d["n_rows"]))


def _values(grid) -> np.ndarray:
    if isinstance(grid, OccupancyGrid):
        return grid.likelihood
    return np.asarray(grid, dtype=float)


def _first_true(mask: np.ndarray) -> np.ndarray:
    hit = mask.any(axis=1)
    return np.where(hit, mask.argmax(axis=1), NO_BOUNDARY)


def smooth_boundary(profile: FreeSpaceProfile, size: int = 3) -> FreeSpaceProfile:
    """Median filter across columns; columns without a boundary count as the far edge."""
    b = np.where(profile.boundary == NO_BOUNDARY, profile.n_rows, profile.boundary)
    sm = median_filter(b, size=size, mode="nearest")
    return FreeSpaceProfile(np.where(sm >= profile.n_rows, NO_BOUNDARY, sm), profile.n_rows)


def threshold_segment(grid, threshold: float = 40.0, smooth: int = 0) -> FreeSpaceProfile:
    """First row (near to far) whose likelihood reaches ``threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    D = _values(grid)
    profile = FreeSpaceProfile(_first_true(D >= threshold), D.shape[1])
    return smooth_boundary(profile, smooth) if smooth > 1 else profile


def transition_segment(grid, threshold: float = 40.0, ordinal: int = 2, smooth: int = 0) -> FreeSpaceProfile:
    """First white cell of the ``ordinal``-th black-to-white transition.

    Cells are white when their likelihood reaches ``threshold``.  A transition
    needs a preceding black cell, so a column that starts white does not count
    its first run.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    if ordinal < 1:
        raise ValueError("transition ordinal must be >= 1")
    white = _values(grid) >= threshold
    rises = np.zeros_like(white)
    rises[:, 1:] = white[:, 1:] & ~white[:, :-1]
    count = np.cumsum(rises, axis=1)
    profile = FreeSpaceProfile(_first_true(rises & (count == ordinal)), white.shape[1])
    return smooth_boundary(profile, smooth) if smooth > 1 else profile


def render_profile(profile: FreeSpaceProfile) -> np.ndarray:
    """8-bit overlay, far rows on top: free white, occupied grey."""
    img = np.where(profile.occupied, OCCUPIED_GRAY, FREE_GRAY).astype(np.uint8)
    return np.ascontiguousarray(img.T[::-1])


def save_profile(profile: FreeSpaceProfile, json_path, pgm_path=None) -> None:
    with open(json_path, "w") as fh:
        fh.write(profile.to_json())
    if pgm_path is not None and not cv2.imwrite(str(pgm_path), render_profile(profile)):
        raise FormatError(f"{pgm_path}: could not write overlay")
