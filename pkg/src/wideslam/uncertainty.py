"""Point and pose uncertainty.

Past map points and fixed keyframe poses enter the optimiser as
*measurements*. Their covariance is pushed through the projection to widen
the 2x2 pixel covariance of each observation:

* point:  ``S' = (J_pi R) S3 (J_pi R)^T + S_px``
* pose:   ``S'' = (J_pi [-(T p)^ I]) S6 (...)^T + S_px``

``S3`` comes from the 3D observation errors of a landmark,
``r_k = R_k^T (T_k p - |T_k p| * unproject(u_k))``, accumulated as
``sum r r^T / (N - 1)``. ``S6`` is the inverse of the keyframe's 6x6
Gauss-Newton block from the last solve in which it was free.
"""
import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import NumericalError, Singular
from .se3 import perturbation_jacobian_at

log = logging.getLogger(__name__)

JITTER = 1e-12


@dataclass
class PointUncertainty:
    sigma3: np.ndarray
    n_obs: int


@dataclass
class PoseUncertainty:
    sigma6: np.ndarray


@dataclass
class MeasurementNoise:
    sigma2: np.ndarray

    @classmethod
    def isotropic(cls, sigma_px):
        return cls(float(sigma_px) ** 2 * np.eye(2))


def symmetrize_psd(A):
    """Symmetrise and clamp negative eigenvalues to zero (single or stacked)."""
    A = np.asarray(A, dtype=float)
    S = 0.5 * (A + np.swapaxes(A, -1, -2))
    w, V = np.linalg.eigh(S)
    if np.all(w >= 0):
        return S
    w = np.clip(w, 0.0, None)
    out = (V * w[..., None, :]) @ np.swapaxes(V, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def information_from_covariance(cov):
    """Inverse of a (stack of) covariance(s) after symmetrising and jitter.

    Both the classical and the uncertainty-weighted factors go through here,
    so a zero uncertainty term yields bit-identical information matrices.
    """
    cov = np.asarray(cov, dtype=float)
    S = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    k = S.shape[-1]
    tr = np.trace(S, axis1=-2, axis2=-1)
    S = S + (JITTER * tr / k)[..., None, None] * np.eye(k)
    info = np.linalg.inv(S)
    return 0.5 * (info + np.swapaxes(info, -1, -2))


def point_observation_error(cam, T_k, p, u_kp):
    """3D observation error of world point ``p`` seen at pixel ``u_kp`` from ``T_k``.

    The observed unit bearing is scaled by the predicted range ``|T_k p|`` and
    the camera-frame difference is rotated back into the world frame.
    """
    q = T_k.act(np.asarray(p, dtype=float))
    cam.project(q)  # FoV / degeneracy checks
    b = cam.unproject(u_kp)
    return T_k.R.T @ (q - np.linalg.norm(q) * b)


def observation_errors(Rs, ts, P, B):
    """Vectorised :func:`point_observation_error` given bearings ``B``."""
    q = np.einsum("nij,nj->ni", Rs, P) + ts
    d = q - np.linalg.norm(q, axis=1, keepdims=True) * B
    return np.einsum("nji,nj->ni", Rs, d)


def point_covariance(residuals, prior_sigma):
    """Point covariance from a set of 3D residuals.

    With fewer than two residuals the estimate is undefined and
    ``prior_sigma**2 * I`` is returned instead.
    """
    r = np.asarray(residuals, dtype=float).reshape(-1, 3)
    n = r.shape[0]
    if n < 2:
        return PointUncertainty(float(prior_sigma) ** 2 * np.eye(3), n)
    S = r.T @ r / (n - 1)
    return PointUncertainty(0.5 * (S + S.T), n)


def point_covariances_grouped(residuals, group, n_groups, prior_sigma):
    """Batch :func:`point_covariance`: ``group[i]`` indexes the landmark of row i."""
    residuals = np.asarray(residuals, dtype=float).reshape(-1, 3)
    outer = residuals[:, :, None] * residuals[:, None, :]
    S = np.zeros((n_groups, 3, 3))
    np.add.at(S, group, outer)
    counts = np.bincount(group, minlength=n_groups)
    ok = counts >= 2
    S[ok] /= (counts[ok] - 1)[:, None, None]
    S[~ok] = float(prior_sigma) ** 2 * np.eye(3)
    S = 0.5 * (S + np.swapaxes(S, 1, 2))
    return S, counts


def project_point_uncertainty(cam, T_i, p_hat, sigma3, sigma2):
    """Pixel covariance of an observation of an uncertain world point."""
    sigma3 = getattr(sigma3, "sigma3", sigma3)
    sigma2 = getattr(sigma2, "sigma2", sigma2)
    q = T_i.act(np.asarray(p_hat, dtype=float))
    G = cam.jacobian_project(q) @ T_i.R
    out = G @ np.asarray(sigma3) @ G.T + np.asarray(sigma2)
    return 0.5 * (out + out.T)


def point_uncertainty_covariances(J_pi, R, S3, S2):
    """Vectorised point-uncertainty propagation.

    ``J_pi`` is ``(N, 2, 3)`` at the camera-frame points, ``R`` the shared
    3x3 rotation (or ``(N, 3, 3)``), ``S3`` ``(N, 3, 3)``, ``S2`` ``(N, 2, 2)``.
    """
    G = J_pi @ R
    out = G @ S3 @ np.swapaxes(G, 1, 2) + S2
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def project_pose_uncertainty(cam, T_p, p_j, sigma6, sigma2):
    """Pixel covariance of an observation made from an uncertain pose."""
    sigma6 = getattr(sigma6, "sigma6", sigma6)
    sigma2 = getattr(sigma2, "sigma2", sigma2)
    q = T_p.act(np.asarray(p_j, dtype=float))
    G = cam.jacobian_project(q) @ perturbation_jacobian_at(q)
    out = G @ np.asarray(sigma6) @ G.T + np.asarray(sigma2)
    return 0.5 * (out + out.T)


def pose_uncertainty_covariances(J_pi, Q, S6, S2):
    """Vectorised pose-uncertainty propagation at camera-frame points ``Q``."""
    G = J_pi @ perturbation_jacobian_at(Q)
    out = G @ S6 @ np.swapaxes(G, 1, 2) + S2
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def pose_covariance_from_solve(hessian_block):
    """``(H + lambda I)^-1`` with ``lambda = 1e-9 * trace(H) / 6``."""
    H = np.asarray(hessian_block, dtype=float)
    H = 0.5 * (H + H.T)
    tr = float(np.trace(H))
    if not np.isfinite(tr) or tr <= 0:
        raise Singular("Hessian block has non-positive trace")
    A = H + 1e-9 * tr / 6.0 * np.eye(6)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise Singular("Hessian block is not positive definite") from exc
    Linv = np.linalg.inv(L)
    cov = Linv.T @ Linv
    if not np.all(np.isfinite(cov)):
        raise Singular("Hessian block inverse is not finite")
    return PoseUncertainty(symmetrize_psd(cov))


def landmark_residuals(map_state, lm):
    """Current 3D residuals of every history entry of one landmark."""
    if not lm.history:
        return np.zeros((0, 3))
    poses = [map_state.frame_pose(h[0]) for h in lm.history]
    Rs = np.array([T.R for T in poses])
    ts = np.array([T.t for T in poses])
    B = np.array([h[2] for h in lm.history])
    P = np.broadcast_to(lm.position, B.shape)
    return observation_errors(Rs, ts, P, B)


def refresh_point_uncertainties(map_state, landmark_ids=None, prior_sigma=None):
    """Recompute the point covariance of the given landmarks (all by default)."""
    if prior_sigma is None:
        prior_sigma = map_state.point_prior_sigma
    ids = list(map_state.landmarks) if landmark_ids is None else [
        i for i in landmark_ids if i in map_state.landmarks]
    if not ids:
        return
    pose_cache = {}
    rows_R, rows_t, rows_P, rows_B, group = [], [], [], [], []
    for g, lm_id in enumerate(ids):
        lm = map_state.landmarks[lm_id]
        for frame_id, _, bearing in lm.history:
            T = pose_cache.get(frame_id)
            if T is None:
                T = pose_cache[frame_id] = map_state.frame_pose(frame_id)
            rows_R.append(T.R)
            rows_t.append(T.t)
            rows_P.append(lm.position)
            rows_B.append(bearing)
            group.append(g)
    if rows_R:
        res = observation_errors(np.array(rows_R), np.array(rows_t),
                                 np.array(rows_P), np.array(rows_B))
        group = np.array(group)
    else:
        res = np.zeros((0, 3))
        group = np.zeros(0, dtype=int)
    S, counts = point_covariances_grouped(res, group, len(ids), prior_sigma)
    S = symmetrize_psd(S)
    for g, lm_id in enumerate(ids):
        lm = map_state.landmarks[lm_id]
        lm.sigma3 = S[g]
        lm.n_obs = int(counts[g])
        lm.residuals = res[group == g]


def refresh_pose_uncertainties(map_state, keyframe_ids=None):
    ids = list(map_state.keyframes) if keyframe_ids is None else keyframe_ids
    for kf_id in ids:
        kf = map_state.keyframes[kf_id]
        if kf.hessian is None:
            continue
        try:
            kf.sigma6 = pose_covariance_from_solve(kf.hessian).sigma6
        except NumericalError as exc:
            log.warning("keyframe %d: pose covariance fell back to prior (%s)", kf_id, exc)
            kf.sigma6 = np.zeros((6, 6))


def refresh_all_uncertainties(map_state, cam=None):
    """Recompute every landmark's point covariance and every keyframe's pose covariance.

    ``cam`` is accepted for interface symmetry; bearings are cached at
    observation time so the camera is not needed again.
    """
    refresh_point_uncertainties(map_state)
    refresh_pose_uncertainties(map_state)
