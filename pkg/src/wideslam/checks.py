"""Numerical self-test battery: Jacobians, round trips, covariance propagation."""
import time
from dataclasses import dataclass

import numpy as np

from .camera import fisheye_camera, pal_camera
from .se3 import exp, jacobian_pose_perturbation, log, so3_exp, so3_left_jacobian
from .uncertainty import (
    observation_errors,
    point_covariance,
    project_point_uncertainty,
    project_pose_uncertainty,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<32s} value={self.value:.3e} tol={self.tolerance:.1e} ({self.seconds:.2f}s)"


def angle_between(a, b):
    """Angle between (stacks of) vectors, accurate near zero."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    return np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), np.sum(a * b, axis=1))


def sample_in_fov(cam, n, rng, depth=(1.0, 10.0), margin_deg=0.5):
    """``n`` camera-frame points strictly inside the FoV and the image."""
    lo, hi = cam.elevation_range
    m = np.radians(margin_deg)
    out = np.zeros((0, 3))
    while out.shape[0] < n:
        k = 2 * (n - out.shape[0]) + 16
        el = rng.uniform(lo + m, min(hi, np.pi / 2) - m, k)
        az = rng.uniform(-np.pi, np.pi, k)
        d = rng.uniform(*depth, k)
        P = d[:, None] * np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        ok = cam.in_fov(P)
        ok[ok] = cam.in_image(cam.project_unchecked(P[ok]))
        out = np.vstack([out, P[ok]])
    return out[:n]


def default_cameras():
    return {"taylor": pal_camera(), "kb": fisheye_camera()}


def _rel_rows(A, B):
    """Per-sample relative Frobenius error of stacked matrices."""
    num = np.linalg.norm((A - B).reshape(A.shape[0], -1), axis=1)
    den = np.linalg.norm(B.reshape(B.shape[0], -1), axis=1)
    return num / np.maximum(den, 1e-300)


def _rel(A, B):
    return np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-300)


def check_camera_jacobian(cam, n=1000, seed=0):
    """Worst relative error of the projection Jacobian against central differences."""
    rng = np.random.default_rng(seed)
    P = sample_in_fov(cam, n, rng)
    h = 1e-6 * np.linalg.norm(P, axis=1, keepdims=True)
    J = np.stack([cam.jacobian_project(p) for p in P])
    cols = []
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        cols.append((cam.project_unchecked(P + h * e) - cam.project_unchecked(P - h * e)) / (2 * h))
    Jn = np.stack(cols, axis=-1)
    return float(np.max(_rel_rows(J, Jn)))


def check_pose_jacobian(cam, n=1000, seed=0):
    """Full chain ``d pi(exp(dxi) T p) / d dxi`` against central differences.

    ``exp(dxi) T p = exp(dxi) q`` so the differences only need the
    camera-frame point.
    """
    rng = np.random.default_rng(seed)
    Q = sample_in_fov(cam, n, rng)
    J = np.empty((n, 2, 6))
    for k, q in enumerate(Q):
        T = exp(np.r_[rng.normal(0, 0.3, 3), rng.normal(0, 1, 3)])
        J[k] = cam.jacobian_project(q) @ jacobian_pose_perturbation(T, T.inverse().act(q))
    h = 1e-6
    cols = []
    for i in range(6):
        d = np.zeros(6)
        d[i] = h
        cols.append((cam.project_unchecked(exp(d).act(Q)) - cam.project_unchecked(exp(-d).act(Q))) / (2 * h))
    Jn = np.stack(cols, axis=-1)
    return float(np.max(_rel_rows(J, Jn)))


def check_roundtrip(cam, n=1000, seed=0):
    rng = np.random.default_rng(seed)
    P = sample_in_fov(cam, n, rng)
    B = cam.unproject(cam.project_unchecked(P))
    return float(np.max(angle_between(P, B)))


def check_exp_log(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        xi = np.r_[rng.normal(0, 0.8, 3), rng.normal(0, 2, 3)]
        if np.linalg.norm(xi[:3]) > 3.0:
            continue
        worst = max(worst, float(np.max(np.abs(log(exp(xi)) - xi))))
    return worst


def check_point_propagation(cam, n_samples=100_000, seed=0):
    """First-order pixel covariance of an uncertain point vs Monte Carlo."""
    rng = np.random.default_rng(seed)
    T = exp(np.r_[0.1, -0.2, 0.3, 0.2, 0.1, -0.1])
    q = sample_in_fov(cam, 1, rng, depth=(3.0, 3.0))[0]
    p = T.inverse().act(q)
    A = rng.normal(size=(3, 3))
    S3 = 1e-6 * (A @ A.T + np.eye(3))
    prop = project_point_uncertainty(cam, T, p, S3, np.zeros((2, 2)))
    X = rng.multivariate_normal(p, S3, size=n_samples)
    U = cam.project_unchecked(T.act(X))
    mc = np.cov(U.T)
    return _rel(mc, prop)


def check_pose_propagation(cam, n_samples=100_000, seed=0):
    """First-order pixel covariance from an uncertain pose vs Monte Carlo."""
    rng = np.random.default_rng(seed)
    T = exp(np.r_[0.1, -0.2, 0.3, 0.2, 0.1, -0.1])
    q = sample_in_fov(cam, 1, rng, depth=(3.0, 3.0))[0]
    p = T.inverse().act(q)
    A = rng.normal(size=(6, 6))
    S6 = 1e-7 * (A @ A.T + np.eye(6))
    prop = project_pose_uncertainty(cam, T, p, S6, np.zeros((2, 2)))
    D = rng.multivariate_normal(np.zeros(6), S6, size=n_samples)
    R = so3_exp(D[:, :3])
    t = np.einsum("nij,nj->ni", so3_left_jacobian(D[:, :3]), D[:, 3:])
    Q = np.einsum("nij,nj->ni", R, np.broadcast_to(q, (n_samples, 3))) + t
    U = cam.project_unchecked(Q)
    return _rel(np.cov(U.T), prop)


def check_point_covariance(seed=0):
    """Batched point covariance against an explicit per-observation loop."""
    rng = np.random.default_rng(seed)
    n = 12
    Rs = np.array([exp(np.r_[rng.normal(0, 0.3, 3), 0, 0, 0]).R for _ in range(n)])
    ts = rng.normal(size=(n, 3))
    p = rng.normal(size=3) * 3
    B = rng.normal(size=(n, 3))
    B /= np.linalg.norm(B, axis=1, keepdims=True)
    r = observation_errors(Rs, ts, np.broadcast_to(p, (n, 3)), B)
    S = point_covariance(r, 0.1).sigma3
    ref = np.zeros((3, 3))
    for k in range(n):
        q = Rs[k] @ p + ts[k]
        e = Rs[k].T @ (q - np.linalg.norm(q) * B[k])
        ref += np.outer(e, e)
    ref /= n - 1
    return _rel(S, ref)


def run_checks(cameras=None, n=1000, mc_samples=100_000):
    """Run every check; returns a list of :class:`CheckResult`."""
    cameras = cameras or default_cameras()
    plan = []
    for kind, cam in cameras.items():
        plan += [
            (f"camera_jacobian[{kind}]", lambda c=cam: check_camera_jacobian(c, n), 1e-5),
            (f"pose_jacobian[{kind}]", lambda c=cam: check_pose_jacobian(c, n), 1e-5),
            (f"roundtrip[{kind}]", lambda c=cam: check_roundtrip(c, n), 1e-8),
            (f"point_propagation[{kind}]", lambda c=cam: check_point_propagation(c, mc_samples), 0.05),
            (f"pose_propagation[{kind}]", lambda c=cam: check_pose_propagation(c, mc_samples), 0.05),
        ]
    plan += [
        ("se3_exp_log", lambda: check_exp_log(n), 1e-9),
        ("point_covariance", check_point_covariance, 1e-14),
    ]
    results = []
    for name, fn, tol in plan:
        t0 = time.perf_counter()
        try:
            v = float(fn())
            ok = bool(np.isfinite(v) and v < tol)
        except Exception:  # a crashing check is a failing check
            v, ok = float("nan"), False
        results.append(CheckResult(name, ok, v, tol, time.perf_counter() - t0))
    return results
