"""SE(3) poses and the tangent-space maps used throughout the optimiser.

Conventions (fixed project-wide):

* a :class:`Pose` maps world coordinates into the camera frame,
  ``p_cam = R @ p_world + t``;
* twists are rotation-first, ``xi = (phi, rho)``;
* perturbations are applied on the left, ``T <- exp(dxi) @ T``.
"""
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .exceptions import NearCut

_SMALL = 1e-8
# below this angle the cancelling coefficients switch to their series
_SERIES = 0.1
CUT_MARGIN = 1e-6


def skew(v):
    """Cross-product matrix; works on ``(3,)`` or ``(N, 3)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _rodrigues_coeffs(theta):
    """``sin t / t``, ``(1 - cos t) / t^2`` and ``(t - sin t) / t^3``."""
    th2 = theta * theta
    small = theta < _SMALL
    series = theta < _SERIES
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - th2 / 6.0, np.sin(safe) / safe)
    half = np.sin(0.5 * safe) / (0.5 * safe)
    b = np.where(small, 0.5 - th2 / 24.0, 0.5 * half * half)
    c = np.where(series, 1.0 / 6.0 - th2 / 120.0 + th2 ** 2 / 5040.0 - th2 ** 3 / 362880.0
                 + th2 ** 4 / 39916800.0, (safe - np.sin(safe)) / (safe ** 3))
    return a, b, c


def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b, _ = _rodrigues_coeffs(theta)
    K = skew(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_left_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    _, b, c = _rodrigues_coeffs(theta)
    K = skew(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + b[..., None, None] * K + c[..., None, None] * (K @ K)


def so3_log(R):
    """Rotation vector of a single rotation matrix (angle < pi - 1e-6)."""
    R = np.asarray(R, dtype=float)
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(w)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(s, c)
    if theta >= np.pi - CUT_MARGIN:
        raise NearCut(f"rotation angle {theta:.9f} too close to pi")
    if theta < _SMALL:
        return w * (1.0 + theta * theta / 6.0)
    if theta > 3.0:
        # sin(theta) is small here; recover the axis from the symmetric part
        S = 0.5 * (R + R.T) - c * np.eye(3)
        S /= 1.0 - c
        k = int(np.argmax(np.diag(S)))
        axis = S[:, k] / np.sqrt(max(S[k, k], 1e-300))
        if axis @ w < 0:
            axis = -axis
        return theta * axis
    return w * (theta / s)


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.array(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.array(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quaternion(cls, q, t):
        """``q`` in (x, y, z, w) order; normalised on the way in."""
        q = np.asarray(q, dtype=float)
        q = q / np.linalg.norm(q)
        return cls(Rotation.from_quat(q).as_matrix(), t)

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @property
    def quaternion(self):
        """Unit quaternion (x, y, z, w) with non-negative w."""
        q = Rotation.from_matrix(self.R).as_quat()
        return q if q[3] >= 0 else -q

    @property
    def center(self):
        """Camera centre in world coordinates."""
        return -self.R.T @ self.t

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def compose(self, other):
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    __matmul__ = compose

    def inverse(self):
        return Pose(self.R.T, -self.R.T @ self.t)

    def act(self, p):
        p = np.asarray(p, dtype=float)
        if p.ndim == 1:
            return self.R @ p + self.t
        return p @ self.R.T + self.t

    def retract(self, dxi):
        """Left update ``exp(dxi) @ self``."""
        return exp(dxi) @ self

    def copy(self):
        return Pose(self.R.copy(), self.t.copy())

    def orthonormalized(self):
        """Same pose with ``R`` projected back onto SO(3).

        Chains of products drift off the manifold slowly; ``inverse`` assumes
        an orthonormal ``R``, so repeated extrapolation amplifies the drift.
        """
        return Pose(project_to_so3(self.R), self.t)

    def __repr__(self):
        return f"Pose(q={np.round(self.quaternion, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


def project_to_so3(M):
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.ones(3)
    D[2] = np.sign(np.linalg.det(U @ Vt))
    return (U * D) @ Vt


def exp(xi):
    """Closed-form exponential of a rotation-first twist."""
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[:3], xi[3:]
    return Pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def log(T):
    """Inverse of :func:`exp`; raises :class:`NearCut` close to angle pi."""
    phi = so3_log(T.R)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < _SERIES:
        t2 = theta * theta
        coef = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0 + t2 ** 3 / 1209600.0
    else:
        h = 0.5 * theta
        coef = (1.0 - h * np.cos(h) / np.sin(h)) / (theta * theta)
    V_inv = np.eye(3) - 0.5 * K + coef * (K @ K)
    return np.concatenate([phi, V_inv @ T.t])


def compose(a, b):
    return a.compose(b)


def inverse(T):
    return T.inverse()


def act(T, p):
    return T.act(p)


def jacobian_pose_perturbation(T, p):
    """d(T p)/d(dxi) under ``exp(dxi) T``: ``[-(T p)^, I]``.

    Returns ``(3, 6)`` for one point and ``(N, 3, 6)`` for a stack.
    """
    q = T.act(p)
    return perturbation_jacobian_at(q)


def perturbation_jacobian_at(q):
    """Same as :func:`jacobian_pose_perturbation` given camera-frame ``q``."""
    q = np.asarray(q, dtype=float)
    J = np.zeros(q.shape[:-1] + (3, 6))
    J[..., :3] = -skew(q)
    J[..., 3:] = np.eye(3)
    return J


def rotation_angle(R):
    """Geodesic angle of a rotation matrix, in radians."""
    R = np.asarray(R, dtype=float)
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(np.linalg.norm(w), 0.5 * (np.trace(R) - 1.0)))
