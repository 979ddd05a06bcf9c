import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freespace.disparity import MeasurementSet
from freespace.errors import LikelihoodError
from freespace.geometry import CameraIntrinsics, GridGeometry, Measurement
from freespace.occupancy import OccupancyGrid, build_grid, cell_likelihood, gaussian_likelihood, load_grid, \
    save_grid

mpmath.mp.dps = 40


def mp_gaussian(delta, tau, p):
    """High-precision reference density."""
    d = mpmath.matrix(delta)
    T = mpmath.matrix(tau)
    q = (d.T * mpmath.inverse(T) * d)[0]
    return (2 * mpmath.pi) ** mpmath.mpf(-1.5) * mpmath.det(T) ** (-p) * mpmath.exp(-q / 2)


# the quoted approximations; the third rounds (2 pi)^-1.5 / 2 / e = 0.01167900
# slightly off, so quoted values are only checked to 5e-7
TABLE = [
    ((0, 0, 0), np.eye(3), 0.0634936),
    ((1, 0, 0), np.eye(3), 0.0385108),
    ((1, 0, 2), np.diag([1.0, 1.0, 4.0]), 0.0116787),
]


@pytest.mark.parametrize("delta,tau,approx", TABLE)
def test_tabulated_spot_values(delta, tau, approx):
    ref = float(mp_gaussian(delta, tau.tolist(), mpmath.mpf(1) / 2))
    got = gaussian_likelihood(delta, tau)
    assert abs(got - ref) <= 1e-12
    assert got == pytest.approx(approx, abs=5e-7)


@pytest.mark.parametrize("delta,tau,_", TABLE)
def test_modes_differ_by_root_determinant(delta, tau, _):
    s = gaussian_likelihood(delta, tau, "standard")
    p = gaussian_likelihood(delta, tau, "paper-literal")
    assert s / p == pytest.approx(math.sqrt(np.linalg.det(tau)), rel=1e-14)
    ref = float(mp_gaussian(delta, tau.tolist(), 1))
    assert abs(p - ref) <= 1e-12


def test_invalid_covariance_and_mode():
    with pytest.raises(LikelihoodError):
        gaussian_likelihood((0, 0, 0), np.diag([1.0, 0.0, 1.0]))
    with pytest.raises(LikelihoodError):
        gaussian_likelihood((0, 0, 0), np.eye(2))
    with pytest.raises(ValueError):
        gaussian_likelihood((0, 0, 0), np.eye(3), "log")


def test_cell_likelihood_examples():
    g = GridGeometry.u_disparity(32, 32)
    u, d = g.center(5, 7)
    assert cell_likelihood((5, 7), Measurement(u, 3.0, d, np.eye(3)), g) == gaussian_likelihood((0, 0, 0), np.eye(3))
    tau = np.diag([1.0, 1.0, 4.0])
    val = cell_likelihood((5, 7), Measurement(u - 1, 0.0, d - 2, tau), g)
    assert val == pytest.approx(float((2 * mpmath.pi) ** -1.5 / 2 / mpmath.e), rel=1e-13)
    a = cell_likelihood((5, 7), Measurement(u + 0.3, 1.0, d, tau), g)
    b = cell_likelihood((5, 7), Measurement(u + 0.3, 99.0, d, tau), g)
    assert a == b


def brute_force(ms, g, mode="standard", cam=None):
    D = np.zeros(g.shape)
    for i in range(g.n_cols):
        for j in range(g.n_rows):
            for m in ms:
                D[i, j] += cell_likelihood((i, j), m, g, mode, cam)
    return D


def random_set(rng, n, width=32, max_d=32, correlated=False):
    uvd = np.column_stack([rng.uniform(0, width - 1, n), rng.uniform(0, 100, n), rng.uniform(1, max_d - 1, n)])
    cov = np.zeros((n, 3, 3))
    for k in range(n):
        if correlated:
            A = rng.normal(size=(3, 3))
            cov[k] = A @ A.T + np.diag(rng.uniform(0.2, 1.5, 3))
        else:
            cov[k] = np.diag(rng.uniform(0.2, 2.0, 3) ** 2)
    return MeasurementSet(uvd, cov)


@pytest.mark.parametrize("backend", ["python", "cython"])
@pytest.mark.parametrize("correlated", [False, True])
def test_untruncated_grid_matches_brute_force(backend, correlated):
    from freespace import kernels
    if backend == "cython" and kernels.BACKEND != "cython":
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(11)
    ms = random_set(rng, 50, correlated=correlated)
    g = GridGeometry.u_disparity(32, 32)
    D = build_grid(ms, g, truncation=math.inf, backend=backend).likelihood
    ref = brute_force(ms, g)
    np.testing.assert_allclose(D, ref, rtol=1e-9, atol=1e-300)


def test_truncated_grid_close_to_exact():
    rng = np.random.default_rng(3)
    ms = random_set(rng, 50, correlated=True)
    g = GridGeometry.u_disparity(32, 32)
    exact = build_grid(ms, g, truncation=math.inf).likelihood
    trunc = build_grid(ms, g, truncation=6.0).likelihood
    # error measured against the grid scale: cells fed only by a cut tail are 0
    assert np.max(np.abs(trunc - exact)) <= 1e-6 * exact.max()
    assert np.all(trunc <= exact * (1 + 1e-12))


def test_metric_grid_matches_brute_force():
    cam = CameraIntrinsics(100.0, (15.5, 10.0), 0.5)
    rng = np.random.default_rng(5)
    ms = random_set(rng, 20, width=32, max_d=20)
    g = GridGeometry.metric(0.5, 8.0, 3.0)
    D = build_grid(ms, g, truncation=math.inf, cam=cam).likelihood
    np.testing.assert_allclose(D, brute_force(ms, g, cam=cam), rtol=1e-9, atol=1e-300)


def test_paper_literal_mode_grid():
    rng = np.random.default_rng(8)
    ms = random_set(rng, 10)
    g = GridGeometry.u_disparity(32, 32)
    D = build_grid(ms, g, "paper-literal", math.inf).likelihood
    np.testing.assert_allclose(D, brute_force(ms, g, "paper-literal"), rtol=1e-9, atol=1e-300)


def test_empty_set_gives_zero_grid():
    g = GridGeometry.u_disparity(16, 16)
    D = build_grid(MeasurementSet.empty(), g).likelihood
    assert D.shape == g.shape and not D.any()


def test_duplicate_measurements_double_grid():
    rng = np.random.default_rng(9)
    ms = random_set(rng, 30)
    g = GridGeometry.u_disparity(32, 32)
    a = build_grid(ms, g).likelihood
    b = build_grid(ms.concat(ms), g).likelihood
    np.testing.assert_allclose(b, 2 * a, rtol=1e-13)


def test_metric_grid_requires_camera():
    with pytest.raises(ValueError):
        build_grid(MeasurementSet.empty(), GridGeometry.metric(0.5, 5, 2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 15), st.integers(1, 15))
def test_grid_is_additive_over_disjoint_sets(seed, n1, n2):
    rng = np.random.default_rng(seed)
    a, b = random_set(rng, n1), random_set(rng, n2)
    g = GridGeometry.u_disparity(32, 32)
    whole = build_grid(a.concat(b), g).likelihood
    parts = build_grid(a, g).likelihood + build_grid(b, g).likelihood
    np.testing.assert_allclose(whole, parts, rtol=1e-12, atol=1e-15)
    assert np.all(whole >= 0)


@settings(max_examples=40, deadline=None)
@given(st.floats(2, 29), st.floats(2, 29), st.floats(0.3, 2.0), st.floats(0.3, 2.0))
def test_single_measurement_peaks_at_its_cell(u, d, su, sd):
    g = GridGeometry.u_disparity(32, 32)
    ms = MeasurementSet([(u, 0.0, d)], [np.diag([su ** 2, 1.0, sd ** 2])])
    D = build_grid(ms, g).likelihood
    i, j = np.unravel_index(np.argmax(D), D.shape)
    assert abs(g.col_centers()[i] - u) <= 0.5 + 1e-9
    assert abs(g.row_centers()[j] - d) <= 0.5 + 1e-9


def test_grid_add_and_scale():
    g = GridGeometry.u_disparity(4, 4)
    a = OccupancyGrid(g, np.ones(g.shape))
    assert np.all((a + a).likelihood == 2) and np.all(a.scaled(3).likelihood == 3)
    with pytest.raises(ValueError):
        a + OccupancyGrid(GridGeometry.u_disparity(5, 4), np.ones((5, 4)))


def test_grid_file_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    g = GridGeometry.u_disparity(20, 12)
    grid = OccupancyGrid(g, rng.uniform(0, 100, g.shape), frame_id=4)
    save_grid(grid, tmp_path / "g.pgm")
    back = load_grid(tmp_path / "g.pgm")
    np.testing.assert_array_equal(back.likelihood, grid.likelihood)
    assert back.geometry == g and back.frame_id == 4
    # without the exact values the 16-bit image is used
    (tmp_path / "g.npy").unlink()
    approx = load_grid(tmp_path / "g.pgm")
    np.testing.assert_allclose(approx.likelihood, grid.likelihood, atol=100 / 65535 * 0.51)
