"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the terminal
summary) or ``python3 tests/test_acceptance.py``.
"""
import hashlib
import json
import math
import statistics
import sys
import tempfile
import time
from pathlib import Path

import mpmath
import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from conftest import CORRIDOR_CONFIG  # noqa: E402
from freespace.config import PipelineConfig  # noqa: E402
from freespace.disparity import MeasurementSet  # noqa: E402
from freespace.dynamic import FlowSample, PolynomialFlowModel, RansacConfig, classify_dynamic, \
    fit_flow_model_ransac  # noqa: E402
from freespace.geometry import GridGeometry  # noqa: E402
from freespace.mapping import FREE, OCCUPIED, UNKNOWN, AffineTransform2D, estimate_transform  # noqa: E402
from freespace.occupancy import build_grid, cell_likelihood, gaussian_likelihood  # noqa: E402
from freespace.pipeline import run_pipeline  # noqa: E402
from freespace.segmentation import threshold_segment  # noqa: E402
from freespace.synthetic import corridor_scene, planted_flow_field, write_sequence  # noqa: E402

RESULTS: list[str] = []


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    return ok


# 1. sample grid golden test ----------------------------------------------

# printed top (far) to bottom (near); grid columns run near to far
FIG4_ROWS = [
    [43, 241, 24, 31, 2, 343, 45, 21],
    [442, 56.2, 12, 32, 21, 45, 13, 54],
    [121, 22, 112, 45, 454, 32, 13, 1],
    [45.3, 5.2, 234, 78, 223, 45, 90, 4],
    [2.43, 1.4, 112, 4, 56, 6, 11, 67],
    [0.54, 4.3, 23, 3, 34, 14, 21, 5],
    [0, 2.9, 0.3, 7, 12, 17, 23, 2],
    [0, 1.5, 4, 4, 4, 8, 2, 5],
]
FIG4_BOUNDARY_VALUES = [45.3, 56.2, 112, 78, 454, 45, 90, 67]


def fig4_grid():
    return np.asarray(FIG4_ROWS, dtype=float)[::-1].T.copy()


def criterion_1():
    D = fig4_grid()
    times = []
    for _ in range(50):
        t0 = time.perf_counter()
        p = threshold_segment(D, 40.0)
        times.append(time.perf_counter() - t0)
    runtime = statistics.median(times)
    # expected pattern: free strictly before the stated value, occupied from it on
    expect = np.zeros(D.shape, dtype=bool)
    bad_cols = []
    for i, val in enumerate(FIG4_BOUNDARY_VALUES):
        j = int(np.flatnonzero(D[i] == val)[0])
        expect[i, j:] = True
        if p.boundary[i] != j:
            bad_cols.append(f"col {i}: got {D[i, p.boundary[i]]:g}, figure {val:g}")
    got_vals = [float(D[i, b]) for i, b in enumerate(p.boundary)]
    match = int((p.occupied == expect).sum())
    ok = match == D.size and runtime < 1e-3
    return ok, (f"boundary values {got_vals}; {match}/64 cells match; median {runtime * 1e3:.3f} ms"
                + (f"; mismatch {bad_cols}" if bad_cols else ""))


# 2. grid oracle equivalence -------------------------------------------------

def _random_measurements(rng, n):
    uvd = np.column_stack([rng.uniform(0, 31, n), rng.uniform(0, 100, n), rng.uniform(1, 31, n)])
    cov = np.zeros((n, 3, 3))
    for k in range(n):
        A = rng.normal(size=(3, 3)) * 0.5
        cov[k] = A @ A.T + np.diag(rng.uniform(0.3, 2.0, 3) ** 2)
    return MeasurementSet(uvd, cov)


def _brute_force(ms, g):
    D = np.zeros(g.shape)
    for i in range(g.n_cols):
        for j in range(g.n_rows):
            for m in ms:
                D[i, j] += cell_likelihood((i, j), m, g)
    return D


def criterion_2():
    rng = np.random.default_rng(2024)
    ms = _random_measurements(rng, 50)
    g = GridGeometry.u_disparity(32, 32)
    ref = _brute_force(ms, g)
    t0 = time.perf_counter()
    exact = build_grid(ms, g, truncation=math.inf).likelihood
    trunc = build_grid(ms, g, truncation=6.0).likelihood
    runtime = time.perf_counter() - t0
    rel = np.max(np.abs(exact - ref) / np.abs(ref))
    # cells fed only by cut tails are 0 after truncation, so the error is taken
    # relative to the grid scale
    trel = np.max(np.abs(trunc - ref)) / ref.max()
    ok = rel <= 1e-9 and trel <= 1e-6 and runtime < 1.0
    return ok, f"untruncated max rel {rel:.2e}; truncated max err / max {trel:.2e}; {runtime * 1e3:.1f} ms"


# 3. spot values ----------------------------------------------------------

SPOTS = [((0, 0, 0), np.eye(3)), ((1, 0, 0), np.eye(3)), ((1, 0, 2), np.diag([1.0, 1.0, 4.0]))]


def _mp_density(delta, tau, power):
    mpmath.mp.dps = 50
    d = mpmath.matrix(list(delta))
    T = mpmath.matrix(tau.tolist())
    q = (d.T * mpmath.inverse(T) * d)[0]
    return (2 * mpmath.pi) ** mpmath.mpf(-1.5) * mpmath.det(T) ** (-power) * mpmath.exp(-q / 2)


def criterion_3():
    errs, ratios = [], []
    for delta, tau in SPOTS:
        s = gaussian_likelihood(delta, tau, "standard")
        p = gaussian_likelihood(delta, tau, "paper-literal")
        errs.append(abs(s - float(_mp_density(delta, tau, mpmath.mpf(1) / 2))))
        errs.append(abs(p - float(_mp_density(delta, tau, 1))))
        ratios.append(abs(s / p / math.sqrt(np.linalg.det(tau)) - 1))
    ok = max(errs) <= 1e-12 and max(ratios) <= 1e-14
    vals = [f"{gaussian_likelihood(d, t):.10f}" for d, t in SPOTS]
    return ok, f"values {vals}; max abs err {max(errs):.1e}; mode ratio err {max(ratios):.1e}"


# 4. RANSAC plant and recover -------------------------------------------------

# background models stay well above zero over the 1242x375 centred image, so
# the planted magnitudes follow the polynomial without sign folding
PLANTED = {
    1: (0.004, 0.01, 8.0),
    2: (1e-5, 4e-5, 5e-6, 0.004, 0.01, 8.0),
    3: (2e-9, 1e-8, 1e-9, 2e-9, 1e-5, 4e-5, 5e-6, 0.004, 0.01, 8.0),
}
RANSAC = dict(sample_fraction=0.4, iterations=20, inlier_epsilon=2.0)


def _ransac_trials(degree, noise, seeds=range(100)):
    model = PolynomialFlowModel(degree, PLANTED[degree])
    out = []
    for seed in seeds:
        samples, is_out = planted_flow_field(model, 160, 40, noise, 50.0, seed=seed)
        res = fit_flow_model_ransac(samples, degree, RansacConfig(seed=seed, **RANSAC))
        flagged = classify_dynamic(samples, res.model, RANSAC["inlier_epsilon"])
        out.append((float(np.mean(flagged == is_out)), np.asarray(res.model.coefficients), flagged))
    return out


def criterion_4(collect=None):
    t0 = time.perf_counter()
    noisy = {d: _ransac_trials(d, 0.5) for d in (1, 2, 3)}
    runtime = time.perf_counter() - t0
    clean = {d: _ransac_trials(d, 0.0) for d in (1, 2, 3)}
    good = {d: sum(acc >= 0.99 for acc, _, _ in noisy[d]) for d in noisy}
    coef_err = {d: max(float(np.max(np.abs(c / np.asarray(PLANTED[d]) - 1))) for _, c, _ in clean[d]) for d in clean}
    if collect is not None:
        collect["4"] = [(c.tobytes(), f.tobytes()) for d in (1, 2, 3) for trials in (noisy[d], clean[d])
                        for _, c, f in trials]
    ok = all(v >= 99 for v in good.values()) and all(e <= 0.05 for e in coef_err.values()) and runtime < 5.0
    return ok, (f"trials with accuracy >= 99%: {good}; noiseless max coef rel err "
                f"{ {d: f'{e:.1e}' for d, e in coef_err.items()} }; sweep {runtime:.2f} s")


# 5. stationary camera ----------------------------------------------------

def _stationary_trial(seed):
    rng = np.random.default_rng(seed)
    n_bg, n_mv = 85, 15
    u = rng.uniform(-621, 621, n_bg + n_mv)
    v = rng.uniform(-187.5, 187.5, n_bg + n_mv)
    ang = rng.uniform(0, 2 * math.pi, n_mv)
    moving = np.zeros(n_bg + n_mv, dtype=bool)
    moving[rng.choice(n_bg + n_mv, n_mv, replace=False)] = True
    samples, k = [], 0
    for i in range(n_bg + n_mv):
        if moving[i]:
            samples.append(FlowSample(float(u[i]), float(v[i]), 10 * math.cos(ang[k]), 10 * math.sin(ang[k])))
            k += 1
        else:
            samples.append(FlowSample(float(u[i]), float(v[i]), 0.0, 0.0))
    res = fit_flow_model_ransac(samples, 1, RansacConfig(seed=seed))
    flagged = classify_dynamic(samples, res.model, 2.0)
    return flagged, moving


def criterion_5(collect=None):
    exact = 0
    flags = []
    for seed in range(100):
        flagged, moving = _stationary_trial(seed)
        exact += bool(np.array_equal(flagged, moving))
        flags.append(flagged.tobytes())
    if collect is not None:
        collect["5"] = flags
    return exact == 100, f"exactly the 15 movers flagged in {exact}/100 seeds"


# 6. transform recovery -----------------------------------------------------

def criterion_6(collect=None):
    rng = np.random.default_rng(6)
    worst_a = worst_t = 0.0
    mats = []
    for _ in range(100):
        a = rng.uniform(-math.radians(10), math.radians(10))
        r = rng.uniform(0, 2)
        phi = rng.uniform(0, 2 * math.pi)
        truth = AffineTransform2D.rigid(a, r * math.cos(phi), r * math.sin(phi))
        n = int(rng.integers(10, 31))
        src = np.column_stack([rng.uniform(-10, 10, n), rng.uniform(0, 40, n)])
        tf = estimate_transform(src, truth.apply(src))
        worst_a = max(worst_a, abs(tf.angle - a))
        worst_t = max(worst_t, float(np.max(np.abs(tf.translation - truth.translation))))
        mats.append(tf.matrix.tobytes())
    if collect is not None:
        collect["6"] = mats
    ok = worst_a <= 1e-6 and worst_t <= 1e-6
    return ok, f"worst angle err {worst_a:.1e} rad; worst translation err {worst_t:.1e} m over 100 trials"


# 7. end-to-end corridor mapping -----------------------------------------------

def _overlap(X, Z, h, footprint):
    x0, x1, z0, z1 = footprint
    return (X + h > x0) & (X - h < x1) & (Z + h > z0) & (Z - h < z1)


def _embed(a, off, base_off, shape, fill):
    out = np.full(shape, fill, dtype=a.dtype)
    s = np.asarray(off) - base_off
    out[s[0]:s[0] + a.shape[0], s[1]:s[1] + a.shape[1]] = a
    return out


def run_corridor(out_dir):
    spec = corridor_scene()
    seq = Path(out_dir) / "sequence"
    write_sequence(spec, seq)
    history = []

    def on_fuse(k, gmap):
        history.append((gmap.offset.copy(), gmap.state.copy(), gmap.count.copy()))

    t0 = time.perf_counter()
    rep = run_pipeline(PipelineConfig.from_dict(CORRIDOR_CONFIG), seq, Path(out_dir) / "out", on_fuse=on_fuse)
    runtime = time.perf_counter() - t0
    return spec, rep, history, runtime


def criterion_7(out_dir):
    spec, rep, history, runtime = run_corridor(out_dir)
    gmap = rep["map_object"]
    cs, h = gmap.cell_size, gmap.cell_size / 2
    # global cell i covers (i cs, (i + 1) cs]
    i = np.arange(gmap.shape[0]) + gmap.offset[0]
    j = np.arange(gmap.shape[1]) + gmap.offset[1]
    X, Z = np.meshgrid((i + 0.5) * cs, (j + 0.5) * cs, indexing="ij")
    static = np.zeros(gmap.shape, dtype=bool)
    swept = np.zeros(gmap.shape, dtype=bool)
    for box in spec.boxes:
        if box.dynamic:
            for k in range(spec.n_frames):
                swept |= _overlap(X, Z, h, box.footprint(k))
        else:
            static |= _overlap(X, Z, h, box.footprint(0))
    state = gmap.state
    observed = (gmap.count > 0) & (state != UNKNOWN)
    agree = float(np.mean(((state == OCCUPIED) == static)[observed]))

    S = np.array([_embed(s, o, gmap.offset, gmap.shape, UNKNOWN) for o, s, _ in history])
    C = np.array([_embed(c, o, gmap.offset, gmap.shape, 0) for o, _, c in history])
    transient = swept & ~static
    last_unknown = np.full(gmap.shape, -1)
    for t in range(len(S)):
        last_unknown[S[t] == UNKNOWN] = t
    went_unknown = transient & (S == UNKNOWN).any(axis=0) & (C[-1] > 0)
    reobserved = np.zeros(gmap.shape, dtype=bool)
    for t in range(len(S) - 1):
        reobserved |= (last_unknown == t) & (C[-1] > C[t])
    cycled = went_unknown & reobserved
    ended_free = int((cycled & (state == FREE)).sum())
    ghosts = int((transient & (state == OCCUPIED)).sum())
    ok = agree >= 0.98 and cycled.sum() > 0 and ended_free == cycled.sum() and ghosts == 0 and runtime < 30
    return ok, (f"agreement {agree:.4f} over {int(observed.sum())} observed cells; "
                f"{ended_free}/{int(cycled.sum())} box cells went unknown and ended free after re-observation; "
                f"{ghosts} box cells left occupied; {runtime:.1f} s")


# 8. determinism ----------------------------------------------------------

def _digest_dir(root):
    out = {}
    for p in sorted(Path(root).rglob("*")):
        if not p.is_file():
            continue
        data = p.read_bytes()
        if p.name == "report.json":
            rep = json.loads(data)
            rep.pop("timings", None)
            data = json.dumps(rep, sort_keys=True).encode()
        out[str(p.relative_to(root))] = hashlib.sha256(data).hexdigest()
    return out


def criterion_8(tmp):
    runs = []
    for r in ("a", "b"):
        collect = {}
        criterion_4(collect)
        criterion_5(collect)
        criterion_6(collect)
        run_corridor(Path(tmp) / r)
        collect["7"] = _digest_dir(Path(tmp) / r / "out")
        runs.append(collect)
    same = {k: runs[0][k] == runs[1][k] for k in ("4", "5", "6", "7")}
    ok = all(same.values())
    return ok, f"identical reruns per criterion {same}; {len(runs[0]['7'])} pipeline artifacts compared"


# pytest entry points ----------------------------------------------------------

def test_criterion_1_sample_grid_golden():
    ok, detail = criterion_1()
    assert report(1, ok, detail), detail


def test_criterion_2_grid_matches_brute_force():
    ok, detail = criterion_2()
    assert report(2, ok, detail), detail


def test_criterion_3_spot_values():
    ok, detail = criterion_3()
    assert report(3, ok, detail), detail


def test_criterion_4_ransac_plant_and_recover():
    ok, detail = criterion_4()
    assert report(4, ok, detail), detail


def test_criterion_5_stationary_camera():
    ok, detail = criterion_5()
    assert report(5, ok, detail), detail


def test_criterion_6_transform_recovery():
    ok, detail = criterion_6()
    assert report(6, ok, detail), detail


def test_criterion_7_corridor_mapping(tmp_path):
    ok, detail = criterion_7(tmp_path)
    assert report(7, ok, detail), detail


def test_criterion_8_determinism(tmp_path):
    ok, detail = criterion_8(tmp_path)
    assert report(8, ok, detail), detail


if __name__ == "__main__":
    fns = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6]
    with tempfile.TemporaryDirectory() as tmp:
        results = [report(n, *fn()) for n, fn in enumerate(fns, 1)]
        results.append(report(7, *criterion_7(Path(tmp) / "c7")))
        results.append(report(8, *criterion_8(Path(tmp) / "c8")))
    sys.exit(0 if all(results) else 1)
