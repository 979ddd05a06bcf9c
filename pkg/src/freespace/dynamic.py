"""Dynamic-object detection from keypoint flow.

A low-order polynomial in centered image coordinates predicts the flow
magnitude of the static background.  It is fitted robustly with RANSAC and
every keypoint whose magnitude departs from the prediction by more than the
inlier threshold is labelled dynamic.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import cv2
import numpy as np
from scipy import ndimage
from scipy.linalg import solve_triangular

from .errors import FitError

# monomial exponents (u power, v power), highest order first
_TERMS = {
    1: [(1, 0), (0, 1), (0, 0)],
    2: [(2, 0), (0, 2), (1, 1), (1, 0), (0, 1), (0, 0)],
    3: [(3, 0), (0, 3), (2, 1), (1, 2), (2, 0), (0, 2), (1, 1), (1, 0), (0, 1), (0, 0)],
}


def n_coefficients(degree: int) -> int:
    return (degree + 1) * (degree + 2) // 2


@dataclass(frozen=True)
class FlowSample:
    """Keypoint at centered coordinates ``(u, v)`` that moved by ``(f_u, f_v)``."""

    u: float
    v: float
    f_u: float
    f_v: float
    psi: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "psi", math.sqrt(self.f_u ** 2 + self.f_v ** 2))


def flow_arrays(samples: Sequence[FlowSample]):
    """``(u, v, psi)`` as float arrays."""
    if len(samples) == 0:
        z = np.zeros(0)
        return z, z.copy(), z.copy()
    a = np.array([(s.u, s.v, s.psi) for s in samples], dtype=np.float64)
    return a[:, 0], a[:, 1], a[:, 2]


@dataclass(frozen=True)
class PolynomialFlowModel:
    """Flow magnitude as a polynomial in centered ``(u, v)``.

    Coefficient order for degree 3 is ``u^3, v^3, u^2 v, u v^2, u^2, v^2, u v,
    u, v, 1``; lower degrees keep the same relative order of their terms.
    """

    degree: int
    coefficients: tuple

    def __post_init__(self):
        if self.degree not in _TERMS:
            raise ValueError(f"degree must be 1, 2 or 3, got {self.degree}")
        c = tuple(float(x) for x in self.coefficients)
        if len(c) != n_coefficients(self.degree):
            raise ValueError(f"degree {self.degree} needs {n_coefficients(self.degree)} coefficients, got {len(c)}")
        object.__setattr__(self, "coefficients", c)

    def __call__(self, u, v):
        return evaluate_model(self, u, v)


def design_matrix(u, v, degree: int) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack([u ** a * v ** b for a, b in _TERMS[degree]], axis=-1)


def evaluate_model(model: PolynomialFlowModel, u, v):
    out = design_matrix(u, v, model.degree) @ np.asarray(model.coefficients)
    return float(out) if np.ndim(out) == 0 else out


def _lstsq(u, v, psi, degree):
    k = n_coefficients(degree)
    if len(psi) < k:
        raise FitError(f"degree {degree} needs at least {k} samples, got {len(psi)}")
    A = design_matrix(u, v, degree)
    scale = np.linalg.norm(A, axis=0)
    if np.any(scale == 0):
        raise FitError("rank-deficient design matrix")
    Q, R = np.linalg.qr(A / scale)
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-10 * diag.max():
        raise FitError("rank-deficient design matrix")
    coef = solve_triangular(R, Q.T @ psi) / scale
    return PolynomialFlowModel(degree, tuple(coef))


def fit_least_squares(samples, degree: int) -> PolynomialFlowModel:
    """Least-squares fit of the flow magnitude via a QR factorisation."""
    return _lstsq(*flow_arrays(samples), degree)


@dataclass(frozen=True)
class RansacConfig:
    """RANSAC settings.

    ``trim_fraction`` < 1 enables concentration steps inside each iteration:
    the subset fit is repeated on the given fraction of subset points with the
    smallest residuals.  Large random subsets are almost never outlier-free,
    so without trimming a single outlier cluster drags every hypothesis.
    ``trim_fraction=1`` gives plain subset fits.
    """

    sample_fraction: float = 0.4
    iterations: int = 20
    inlier_epsilon: float = 2.0
    seed: int = 0
    trim_fraction: float = 0.5
    trim_steps: int = 10

    def __post_init__(self):
        if not 0 < self.sample_fraction <= 1:
            raise ValueError("sample_fraction must be in (0, 1]")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.inlier_epsilon > 0:
            raise ValueError("inlier_epsilon must be > 0")
        if not 0 < self.trim_fraction <= 1:
            raise ValueError("trim_fraction must be in (0, 1]")

    def subset_size(self, n: int) -> int:
        return max(1, math.ceil(self.sample_fraction * n - 1e-9))


@dataclass(frozen=True)
class RansacResult:
    model: PolynomialFlowModel
    inlier_mask: np.ndarray
    residuals: np.ndarray
    seed: int
    best_iteration: int

    @property
    def inlier_count(self) -> int:
        return int(self.inlier_mask.sum())


def _trimmed_fit(u, v, psi, degree, keep, steps):
    model = _lstsq(u, v, psi, degree)
    if keep >= len(psi):
        return model
    chosen = None
    for _ in range(steps):
        res = np.abs(psi - evaluate_model(model, u, v))
        idx = np.sort(np.argsort(res, kind="stable")[:keep])
        if chosen is not None and np.array_equal(idx, chosen):
            break
        chosen = idx
        model = _lstsq(u[idx], v[idx], psi[idx], degree)
    return model


def fit_flow_model_ransac(samples, degree: int, cfg: RansacConfig | None = None) -> RansacResult:
    cfg = cfg or RansacConfig()
    u, v, psi = flow_arrays(samples) if not isinstance(samples, tuple) else samples
    n = len(psi)
    k = cfg.subset_size(n)
    n_coef = n_coefficients(degree)
    if k < n_coef:
        raise FitError(f"{n} samples at fraction {cfg.sample_fraction} give subsets of {k}, "
                       f"degree {degree} needs {n_coef}")
    keep = max(n_coef, math.ceil(cfg.trim_fraction * k))
    best = None  # (count, total residual, iteration, model)
    for it in range(cfg.iterations):
        rng = np.random.default_rng([cfg.seed, it])
        idx = np.sort(rng.choice(n, size=k, replace=False))
        try:
            model = _trimmed_fit(u[idx], v[idx], psi[idx], degree, keep, cfg.trim_steps)
        except FitError:
            continue
        res = np.abs(psi - evaluate_model(model, u, v))
        inl = res <= cfg.inlier_epsilon
        key = (-int(inl.sum()), float(res[inl].sum()), it)
        if best is None or key < best[0]:
            best = (key, model)
    if best is None:
        raise FitError("no RANSAC iteration produced a solvable subset")
    (_, _, best_it), model = best
    inl = np.abs(psi - evaluate_model(model, u, v)) <= cfg.inlier_epsilon
    try:
        model = _lstsq(u[inl], v[inl], psi[inl], degree)
    except FitError:
        pass
    res = np.abs(psi - evaluate_model(model, u, v))
    return RansacResult(model, res <= cfg.inlier_epsilon, res, cfg.seed, best_it)


def classify_dynamic(samples, model: PolynomialFlowModel, inlier_epsilon: float) -> np.ndarray:
    """Boolean mask, True where a sample does not follow the background model."""
    u, v, psi = flow_arrays(samples)
    return np.abs(psi - evaluate_model(model, u, v)) > inlier_epsilon


# keypoints and matching


@dataclass(frozen=True)
class MatchParams:
    harris_sigma: float = 1.0
    harris_k: float = 0.04
    harris_rel_threshold: float = 0.01
    nms_radius: int = 3
    max_corners: int = 800
    patch_radius: int = 5
    search_radius: int = 40
    min_ncc: float = 0.8
    fb_tolerance: float = 1.0


def harris_response(img: np.ndarray, sigma: float = 1.0, k: float = 0.04) -> np.ndarray:
    f = np.asarray(img, dtype=np.float64)
    gx = ndimage.sobel(f, axis=1, mode="nearest")
    gy = ndimage.sobel(f, axis=0, mode="nearest")
    sxx = ndimage.gaussian_filter(gx * gx, sigma, mode="nearest")
    syy = ndimage.gaussian_filter(gy * gy, sigma, mode="nearest")
    sxy = ndimage.gaussian_filter(gx * gy, sigma, mode="nearest")
    return sxx * syy - sxy ** 2 - k * (sxx + syy) ** 2


def harris_corners(img: np.ndarray, sigma=1.0, k=0.04, rel_threshold=0.01, nms_radius=3,
                   max_corners=800, border=0) -> np.ndarray:
    """Integer ``(x, y)`` corner positions, strongest first, greedy non-maximum suppressed."""
    R = harris_response(img, sigma, k)
    rmax = R.max() if R.size else 0.0
    if rmax <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    peak = R == ndimage.maximum_filter(R, size=2 * nms_radius + 1, mode="nearest")
    cand = peak & (R > rel_threshold * rmax)
    if border > 0:
        cand[:border] = cand[-border:] = False
        cand[:, :border] = cand[:, -border:] = False
    ys, xs = np.nonzero(cand)
    order = np.lexsort((xs, ys, -R[ys, xs]))
    taken = np.zeros(R.shape, dtype=bool)
    out = []
    r = nms_radius
    for o in order:
        y, x = ys[o], xs[o]
        if taken[y, x]:
            continue
        out.append((x, y))
        taken[max(0, y - r): y + r + 1, max(0, x - r): x + r + 1] = True
        if len(out) >= max_corners:
            break
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def _best_match(template, image, cx, cy, search, patch):
    """Best zero-mean NCC position of ``template`` around ``(cx, cy)`` in ``image``."""
    h, w = image.shape
    x0, x1 = max(cx - search - patch, 0), min(cx + search + patch + 1, w)
    y0, y1 = max(cy - search - patch, 0), min(cy + search + patch + 1, h)
    region = image[y0:y1, x0:x1]
    if region.shape[0] < template.shape[0] or region.shape[1] < template.shape[1]:
        return None
    score = cv2.matchTemplate(region, template, cv2.TM_CCOEFF_NORMED)
    score = np.nan_to_num(score, nan=-1.0, posinf=-1.0, neginf=-1.0)
    py, px = np.unravel_index(np.argmax(score), score.shape)
    return x0 + px + patch, y0 + py + patch, float(score[py, px])


def image_center(shape) -> tuple[float, float]:
    h, w = shape[:2]
    return (w - 1) / 2.0, (h - 1) / 2.0


def detect_and_match(frame_i: np.ndarray, frame_i1: np.ndarray, params: MatchParams | None = None):
    """Harris corners in ``frame_i`` tracked into ``frame_i1``.

    Sample coordinates are centered on the image (see :func:`image_center`).
    Matches must be mutually consistent: matching back from ``frame_i1`` lands within
    ``fb_tolerance`` pixels of the corner.
    """
    params = params or MatchParams()
    a = np.asarray(frame_i)
    b = np.asarray(frame_i1)
    if a.shape != b.shape:
        raise ValueError(f"frame dimension mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("frames must be grayscale")
    a32 = a.astype(np.float32)
    b32 = b.astype(np.float32)
    p = params.patch_radius
    corners = harris_corners(a, params.harris_sigma, params.harris_k, params.harris_rel_threshold,
                             params.nms_radius, params.max_corners, border=p)
    cx, cy = image_center(a.shape)
    samples = []
    for x, y in corners:
        tmpl = a32[y - p: y + p + 1, x - p: x + p + 1]
        if tmpl.std() == 0:
            continue
        fwd = _best_match(tmpl, b32, x, y, params.search_radius, p)
        if fwd is None or fwd[2] < params.min_ncc:
            continue
        mx, my, _ = fwd
        if my - p < 0 or mx - p < 0 or my + p >= b.shape[0] or mx + p >= b.shape[1]:
            continue
        back = _best_match(b32[my - p: my + p + 1, mx - p: mx + p + 1], a32, mx, my, params.search_radius, p)
        if back is None or abs(back[0] - x) > params.fb_tolerance or abs(back[1] - y) > params.fb_tolerance:
            continue
        samples.append(FlowSample(float(x - cx), float(y - cy), float(mx - x), float(my - y)))
    return samples


# exports


def detections_record(samples, result: RansacResult, center, epsilon: float) -> dict:
    cx, cy = center
    dyn = result.residuals > epsilon
    return {
        "degree": result.model.degree,
        "coefficients": list(result.model.coefficients),
        "seed": result.seed,
        "epsilon": epsilon,
        "best_iteration": result.best_iteration,
        "keypoints": [
            {
                "u": s.u, "v": s.v, "x": s.u + cx, "y": s.v + cy,
                "f_u": s.f_u, "f_v": s.f_v, "psi": s.psi,
                "residual": float(r), "label": "dynamic" if d else "background",
            }
            for s, r, d in zip(samples, result.residuals, dyn)
        ],
    }


def save_detections(record: dict, json_path, csv_path=None) -> None:
    with open(json_path, "w") as fh:
        json.dump(record, fh, indent=1)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "psi", "residual", "label"])
            for i, kp in enumerate(record["keypoints"]):
                w.writerow([i, repr(kp["psi"]), repr(kp["residual"]), kp["label"]])
