import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wideslam.checks import check_exp_log, check_pose_jacobian
from wideslam.exceptions import NearCut
from wideslam.se3 import (
    Pose,
    exp,
    jacobian_pose_perturbation,
    log,
    project_to_so3,
    skew,
    so3_exp,
)

finite = st.floats(-2.0, 2.0, allow_nan=False)
twists = arrays(np.float64, 6, elements=finite).filter(lambda x: np.linalg.norm(x[:3]) < 3.0)
points = arrays(np.float64, 3, elements=st.floats(-10, 10))


def test_exp_zero_is_identity():
    T = exp(np.zeros(6))
    np.testing.assert_array_equal(T.R, np.eye(3))
    np.testing.assert_array_equal(T.t, np.zeros(3))


def test_exp_quarter_turn_about_z():
    T = exp(np.r_[0, 0, np.pi / 2, 0, 0, 0])
    np.testing.assert_allclose(T.R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)


def test_log_identity_and_pure_translation():
    np.testing.assert_array_equal(log(Pose.identity()), np.zeros(6))
    t = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(log(Pose(np.eye(3), t)), np.r_[0, 0, 0, t], atol=1e-15)


def test_log_near_cut_raises():
    with pytest.raises(NearCut):
        log(exp(np.r_[np.pi - 1e-8, 0, 0, 0, 0, 0]))


def test_exp_log_roundtrip_1000_samples():
    assert check_exp_log(n=1000, seed=0) < 1e-10


@settings(max_examples=100, deadline=None)
@given(xi=twists)
def test_exp_log_property(xi):
    np.testing.assert_allclose(log(exp(xi)), xi, atol=1e-10)


def test_small_angle_branch_is_continuous():
    for a in (1e-10, 1e-8 * 0.99, 1e-8 * 1.01, 1e-6):
        xi = np.r_[a, -a, 0.5 * a, 1.0, 2.0, 3.0]
        np.testing.assert_allclose(log(exp(xi)), xi, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(xi=twists, p=points)
def test_act_matches_homogeneous_multiply(xi, p):
    T = exp(xi)
    ref = (T.matrix() @ np.r_[p, 1.0])[:3]
    np.testing.assert_allclose(T.act(p), ref, atol=1e-12)
    np.testing.assert_allclose(T.inverse().act(T.act(p)), p, atol=1e-10)


def test_identity_act_is_noop():
    p = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(Pose.identity().act(p), p)


@settings(max_examples=50, deadline=None)
@given(a=twists, b=twists, c=twists)
def test_group_axioms(a, b, c):
    A, B, C = exp(a), exp(b), exp(c)
    np.testing.assert_allclose(((A @ B) @ C).matrix(), (A @ (B @ C)).matrix(), atol=1e-10)
    np.testing.assert_allclose((A @ A.inverse()).matrix(), np.eye(4), atol=1e-10)
    assert abs(np.linalg.norm(A.quaternion) - 1.0) < 1e-12


def test_skew_is_cross_product(rng):
    a, b = rng.normal(size=3), rng.normal(size=3)
    np.testing.assert_allclose(skew(a) @ b, np.cross(a, b), atol=1e-15)


def test_pose_jacobian_blocks(rng):
    T = exp(rng.normal(size=6))
    p0 = T.inverse().act(np.zeros(3))
    J = jacobian_pose_perturbation(T, p0)
    np.testing.assert_allclose(J[:, :3], 0.0, atol=1e-12)
    for _ in range(5):
        J = jacobian_pose_perturbation(T, rng.normal(size=3))
        np.testing.assert_array_equal(J[:, 3:], np.eye(3))


def test_pose_jacobian_against_finite_differences(rng):
    h = 1e-6
    for _ in range(100):
        T = exp(np.r_[rng.normal(0, 0.5, 3), rng.normal(size=3)])
        p = rng.normal(size=3) * 3
        J = jacobian_pose_perturbation(T, p)
        Jn = np.empty((3, 6))
        for i in range(6):
            d = np.zeros(6)
            d[i] = h
            Jn[:, i] = ((exp(d) @ T).act(p) - (exp(-d) @ T).act(p)) / (2 * h)
        assert np.linalg.norm(J - Jn) / np.linalg.norm(Jn) < 1e-5


def test_chained_pixel_jacobian(cam):
    assert check_pose_jacobian(cam, n=1000, seed=5) < 1e-5


def test_orthonormalize_repairs_drift(rng):
    R = so3_exp(rng.normal(size=3)) + 1e-6 * rng.normal(size=(3, 3))
    Q = project_to_so3(R)
    np.testing.assert_allclose(Q @ Q.T, np.eye(3), atol=1e-14)
    assert np.linalg.det(Q) == pytest.approx(1.0, abs=1e-14)
    assert np.linalg.norm(Q - R) < 1e-5


def test_quaternion_roundtrip(rng):
    T = exp(rng.normal(size=6))
    T2 = Pose.from_quaternion(T.quaternion, T.t)
    np.testing.assert_allclose(T2.R, T.R, atol=1e-14)
