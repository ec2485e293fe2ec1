import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wideslam.camera import CameraModel, elevation, fisheye_camera, pal_camera
from wideslam.checks import angle_between, check_camera_jacobian, sample_in_fov
from wideslam.exceptions import ConfigError, Degenerate, OutOfFov


def _scalar_taylor(coeffs, pp, x, y, z):
    # independent per-point evaluation with the math module
    s = math.sqrt(x * x + y * y)
    th = math.atan(z / s)
    r = sum(a * th ** i for i, a in enumerate(coeffs))
    return pp[0] + r * x / s, pp[1] + r * y / s


def _scalar_kb(coeffs, pp, x, y, z):
    s = math.sqrt(x * x + y * y)
    a = math.atan2(s, z)
    r = sum(k * a ** (2 * i + 1) for i, k in enumerate(coeffs))
    return pp[0] + r * x / s, pp[1] + r * y / s


def test_elevation_examples():
    assert elevation(np.array([1.0, 0, 0])) == 0.0
    assert elevation(np.array([0.0, 1, 1])) == pytest.approx(np.pi / 4, abs=1e-15)
    assert elevation(np.array([1.0, 1, -np.sqrt(2)])) == pytest.approx(-np.pi / 4, abs=1e-15)
    with pytest.raises(Degenerate):
        elevation(np.array([0.0, 0, 1]))


def test_planar_point_keeps_v_at_principal_point():
    cam = pal_camera()
    u, v = cam.project(np.array([2.0, 0.0, 0.5]))
    assert v == cam.principal_point[1]
    assert u > cam.principal_point[0]


def test_on_axis_maps_to_principal_point():
    cam = fisheye_camera()
    np.testing.assert_array_equal(cam.project(np.array([0.0, 0.0, 3.0])), cam.principal_point)
    with pytest.raises(Degenerate):
        cam.jacobian_project(np.array([0.0, 0.0, 3.0]))


def test_projection_matches_scalar_formula(cam, rng):
    P = sample_in_fov(cam, 200, rng)
    U = cam.project(P)
    f = _scalar_taylor if cam.kind == "taylor" else _scalar_kb
    ref = np.array([f(cam.rho_coeffs, cam.principal_point, *p) for p in P])
    np.testing.assert_allclose(U, ref, rtol=0, atol=1e-9)


def test_project_errors(cam):
    with pytest.raises(Degenerate):
        cam.project(np.zeros(3))
    lo, _ = cam.elevation_range
    below = np.array([np.cos(lo - 0.1), 0.0, np.sin(lo - 0.1)])
    with pytest.raises(OutOfFov):
        cam.project(below)


def test_principal_point_unprojects_to_axis(cam):
    if cam.elevation_range[1] < np.pi / 2:
        with pytest.raises(OutOfFov):
            cam.unproject(np.array(cam.principal_point))
    else:
        np.testing.assert_allclose(cam.unproject(np.array(cam.principal_point)), [0, 0, 1], atol=1e-15)


def test_unproject_out_of_range_radius(cam):
    r_hi = cam.radius_range[1]
    with pytest.raises(OutOfFov):
        cam.unproject(np.array(cam.principal_point) + [r_hi * 1.01, 0.0])


def test_roundtrip_includes_negative_half_plane(cam, rng):
    P = sample_in_fov(cam, 1000, rng)
    assert np.any(P[:, 2] < 0)
    B = cam.unproject(cam.project(P))
    np.testing.assert_allclose(np.linalg.norm(B, axis=1), 1.0, atol=1e-12)
    assert np.max(angle_between(P, B)) < 1e-8
    np.testing.assert_allclose(cam.project(B), cam.project(P), atol=1e-6)


def test_taylor_negative_z_roundtrip():
    cam = pal_camera()
    p = np.array([1.0, -0.5, -0.4])
    b = cam.unproject(cam.project(p))
    assert b[2] < 0
    assert angle_between(p, b)[0] < 1e-8


def test_jacobian_against_finite_differences(cam):
    assert check_camera_jacobian(cam, n=1000, seed=3) < 1e-5


def test_jacobian_annihilates_ray_direction(cam, rng):
    P = sample_in_fov(cam, 50, rng)
    J = cam.jacobian_project(P)
    Jp = np.einsum("nij,nj->ni", J, P)
    assert np.max(np.abs(Jp)) < 1e-9 * np.max(np.abs(J))


def test_jacobian_symmetry_at_x_zero():
    cam = pal_camera()
    J = cam.jacobian_project(np.array([0.0, 2.0, 0.3]))
    assert J[1, 0] == 0.0


@settings(max_examples=60, deadline=None)
@given(az=st.floats(-np.pi, np.pi), el=st.floats(-0.5, 0.85), lam=st.floats(0.01, 100.0))
def test_ray_invariance(az, el, lam):
    cam = pal_camera()
    p = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    np.testing.assert_allclose(cam.project(lam * p), cam.project(p), atol=1e-10)


def test_kb_equidistant_radius():
    cam = CameraModel("kb", (120.0,), (256.0, 256.0), (np.radians(-5), np.pi / 2), (512, 512))
    p = np.array([0.3, 0.4, 0.7])
    a = math.atan2(0.5, 0.7)
    r = np.linalg.norm(cam.project(p) - cam.principal_point)
    assert r == pytest.approx(120.0 * a, rel=1e-14)


def test_zp_coefficients_used_for_unprojection():
    cam = pal_camera()
    zp_cam = CameraModel("taylor", cam.rho_coeffs, cam.principal_point, cam.elevation_range,
                         cam.image_size, zp_coeffs=cam.fit_zp(degree=10))
    p = np.array([1.0, 0.2, 0.1])
    # the fitted polynomial only approximates the inverse
    assert angle_between(zp_cam.unproject(cam.project(p)), p)[0] < 1e-4


@pytest.mark.parametrize("kwargs", [
    dict(rho_coeffs=(100.0, 50.0, 0.0, -300.0)),  # not monotone
    dict(elevation_range=(0.5, 0.2)),
    dict(principal_point=(-1.0, 10.0)),
    dict(kind="mei"),
])
def test_construction_rejects_bad_intrinsics(kwargs):
    base = dict(kind="taylor", rho_coeffs=(351.9, -224.0, 0.0, 8.0), principal_point=(640.0, 480.0),
                elevation_range=(np.radians(-30), np.radians(50)), image_size=(1280, 960))
    base.update(kwargs)
    with pytest.raises(ConfigError):
        CameraModel(**base)


def test_dict_roundtrip(cam):
    again = CameraModel.from_dict(cam.to_dict())
    p = np.array([1.0, 0.5, 0.2])
    np.testing.assert_allclose(again.project(p), cam.project(p), rtol=1e-14)
