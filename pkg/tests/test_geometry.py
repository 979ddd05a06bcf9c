import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freespace.errors import InvalidMeasurementError
from freespace.geometry import CameraIntrinsics, GridGeometry, Measurement, cell_of, project_ground, triangulate, \
    triangulate_arrays

CAM = CameraIntrinsics(1000.0, (600.0, 180.0), 0.5)


def test_triangulate_on_axis():
    x, y, z = triangulate(Measurement(600.0, 180.0, 100.0), CAM)
    assert (x, y, z) == (0.0, 0.0, 5.0)


def test_triangulate_lateral_offset():
    x, y, z = triangulate(Measurement(800.0, 180.0, 100.0), CAM)
    assert x == pytest.approx(1.0, abs=1e-12)
    assert y == 0.0
    assert z == pytest.approx(5.0, abs=1e-12)


def test_triangulate_zero_disparity_rejected():
    with pytest.raises(InvalidMeasurementError):
        triangulate(Measurement(10.0, 10.0, 0.0), CAM)


def test_triangulate_arrays_marks_invalid():
    x, y, z = triangulate_arrays([600, 600], [180, 180], [100.0, 0.0], CAM)
    assert z[0] == 5.0 and np.isnan(z[1]) and np.isnan(x[1])


def test_measurement_rejects_bad_covariance():
    with pytest.raises(InvalidMeasurementError):
        Measurement(0, 0, 1, np.diag([1.0, -1.0, 1.0]))
    with pytest.raises(InvalidMeasurementError):
        Measurement(0, 0, 1, np.array([[1.0, 0.5, 0], [0, 1, 0], [0, 0, 1]]))
    with pytest.raises(InvalidMeasurementError):
        Measurement(0, 0, 1, np.eye(2))


def test_camera_validation_and_roundtrip():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, (0, 0), 0.5)
    with pytest.raises(ValueError):
        CameraIntrinsics(100.0, (0, 0), 0.0)
    assert CameraIntrinsics.from_dict(CAM.to_dict()) == CAM
    assert CAM.fb == 500.0


def test_cell_at_origin_center():
    g = GridGeometry.u_disparity(32, 32)
    u, d = g.center(0, 0)
    assert cell_of(Measurement(u, 0.0, d), g) == (0, 0)


def test_shared_boundary_goes_to_lower_index():
    g = GridGeometry.u_disparity(32, 32)
    # u = 0.5 is the border between columns 0 and 1
    assert cell_of(Measurement(0.5, 0.0, 20.0), g)[0] == 0
    # d = 20.5 is the border between rows 11 (d=21) and 12 (d=20)
    assert cell_of(Measurement(3.0, 0.0, 20.5), g)[1] == 11
    gm = GridGeometry.metric(0.2, 10.0, 2.0)
    assert int(gm.col_index(0.0)) == int(gm.col_index(-0.1))
    assert int(gm.row_index(1.0)) == int(gm.row_index(0.9))


def test_beyond_max_depth_is_outside():
    g = GridGeometry.metric(0.2, 10.0, 5.0)
    far = Measurement(600.0, 180.0, CAM.fb / 12.0)
    assert cell_of(far, g, CAM) is None
    near = Measurement(600.0, 180.0, CAM.fb / 5.0)
    assert cell_of(near, g, CAM) is not None
    assert cell_of(Measurement(5.0, 0.0, 100.0), GridGeometry.u_disparity(32, 32)) is None


def test_geometry_roundtrip_and_validation():
    g = GridGeometry.metric(0.25, 12.0, 4.0)
    assert GridGeometry.from_dict(g.to_dict()) == g
    with pytest.raises(ValueError):
        GridGeometry(0, 3, 1.0, 1.0)
    with pytest.raises(ValueError):
        GridGeometry(3, 3, 1.0, 1.0, "polar")
    with pytest.raises(IndexError):
        g.center(g.n_cols, 0)


def test_metric_cell_centers_project_like_triangulation():
    g = GridGeometry.metric(0.5, 10.0, 3.0)
    u, d = g.cell_uv_centers(CAM)
    xs, zs = np.meshgrid(g.col_centers(), g.row_centers(), indexing="ij")
    X, _, Z = triangulate_arrays(u, np.full(u.shape, 180.0), d, CAM)
    np.testing.assert_allclose(X, xs, atol=1e-12)
    np.testing.assert_allclose(Z, zs, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.floats(0.5, 60))
def test_project_then_triangulate_is_identity(x, z):
    u, d = project_ground(x, z, CAM)
    X, _, Z = triangulate(Measurement(float(u), 180.0, float(d)), CAM)
    assert math.isclose(X, x, rel_tol=1e-9, abs_tol=1e-9)
    assert math.isclose(Z, z, rel_tol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(-2.0, 40.0, allow_nan=False))
def test_located_cell_contains_coordinate(u):
    g = GridGeometry.u_disparity(32, 32)
    i = int(g.col_index(u))
    if i < 0:
        assert u <= -0.5 or u > 31.5
    else:
        c = g.col_centers()[i]
        assert c - 0.5 < u <= c + 0.5 or (i == 0 and u == -0.5)
