"""Robust Levenberg-Marquardt over poses and points.

One engine serves three objectives:

* tracking -- a single free pose against fixed map points, each observation
  weighted by the point-uncertainty covariance;
* local BA -- a window of free keyframes plus every point they observe;
  keyframes outside the window that see those points stay fixed and their
  observations are weighted by the pose-uncertainty covariance;
* global BA -- everything free except the first keyframe.

Residuals are whitened by the per-observation information matrix and passed
through a Huber kernel. Points are eliminated with the Schur complement.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .exceptions import Diverged, GaugeUnderconstrained, TooFewMatches
from .se3 import Pose, exp, perturbation_jacobian_at
from .uncertainty import (
    information_from_covariance,
    point_uncertainty_covariances,
    pose_uncertainty_covariances,
    refresh_all_uncertainties,
)

log = logging.getLogger(__name__)

STANDARD = "standard"
POINT_UNC = "point_unc"
POSE_UNC = "pose_unc"
_ROLE_CODE = {STANDARD: 0, POINT_UNC: 1, POSE_UNC: 2}

CHI2_2DOF_95 = 5.991


@dataclass
class SolverConfig:
    max_iters: int = 20
    lambda0: float = 1e-4
    huber_chi2: float = CHI2_2DOF_95
    rel_tol: float = 1e-8
    max_retries: int = 10
    use_point_unc: bool = True
    use_pose_unc: bool = True
    window: int = 5


@dataclass
class ReprojectionFactor:
    keyframe_id: int
    landmark_id: int
    measured: np.ndarray
    info2: np.ndarray
    role: str = STANDARD


@dataclass
class SolveReport:
    iterations: int = 0
    chi2_initial: float = 0.0
    chi2_final: float = 0.0
    n_inliers: int = 0
    n_outliers: int = 0
    converged: bool = False
    hessian_blocks: dict = field(default_factory=dict)
    chi2_history: list = field(default_factory=list)
    outliers: list = field(default_factory=list)
    factors: list = field(default_factory=list)
    null_dims: int = None

    def summary(self):
        return {
            "iterations": self.iterations,
            "chi2_initial": self.chi2_initial,
            "chi2_final": self.chi2_final,
            "n_inliers": self.n_inliers,
            "n_outliers": self.n_outliers,
            "converged": self.converged,
        }


def robust_weight(chi2, kernel_delta):
    """Huber IRLS weight: 1 inside the kernel, ``delta / sqrt(chi2)`` outside."""
    chi2 = np.asarray(chi2, dtype=float)
    r = np.sqrt(chi2)
    w = np.where(r <= kernel_delta, 1.0, kernel_delta / np.where(r > 0, r, 1.0))
    return float(w) if w.ndim == 0 else w


def robust_cost(chi2, kernel_delta):
    chi2 = np.asarray(chi2, dtype=float)
    r = np.sqrt(chi2)
    return np.where(r <= kernel_delta, chi2, 2.0 * kernel_delta * r - kernel_delta ** 2)


def _block_sum(blocks, idx, n):
    """Sum ``blocks[m]`` into bucket ``idx[m]``; returns ``(n,) + block shape``."""
    shape = blocks.shape[1:]
    flat = blocks.reshape(blocks.shape[0], int(np.prod(shape)))
    out = np.empty((n, flat.shape[1]))
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(idx, weights=flat[:, c], minlength=n)
    return out.reshape((n,) + shape)


class _Problem:
    """Arrays describing one least-squares problem; mutated in place by the solve."""

    def __init__(self, cam, R, t, P, pose_free, point_free, pose_idx, point_idx,
                 pixels, sigma2, roles, S3=None, S6=None, active=None):
        self.cam = cam
        self.R = np.array(R, dtype=float)
        self.t = np.array(t, dtype=float)
        self.P = np.array(P, dtype=float)
        self.pose_free = np.asarray(pose_free, dtype=bool)
        self.point_free = np.asarray(point_free, dtype=bool)
        self.pose_idx = np.asarray(pose_idx, dtype=int)
        self.point_idx = np.asarray(point_idx, dtype=int)
        self.pixels = np.asarray(pixels, dtype=float)
        self.sigma2 = np.asarray(sigma2, dtype=float)
        self.roles = np.asarray(roles, dtype=int)
        n_pose, n_pt = self.R.shape[0], self.P.shape[0]
        self.S3 = np.zeros((n_pt, 3, 3)) if S3 is None else np.asarray(S3, dtype=float)
        self.S6 = np.zeros((n_pose, 6, 6)) if S6 is None else np.asarray(S6, dtype=float)
        m = self.pose_idx.size
        self.active = np.ones(m, dtype=bool) if active is None else np.asarray(active, dtype=bool)

        self.free_poses = np.flatnonzero(self.pose_free)
        self.free_points = np.flatnonzero(self.point_free)
        self.pose_slot = -np.ones(n_pose, dtype=int)
        self.pose_slot[self.free_poses] = np.arange(self.free_poses.size)
        self.point_slot = -np.ones(n_pt, dtype=int)
        self.point_slot[self.free_points] = np.arange(self.free_points.size)

    # -- evaluation ---------------------------------------------------------
    def camera_points(self, R=None, t=None, P=None):
        R = self.R if R is None else R
        t = self.t if t is None else t
        P = self.P if P is None else P
        Ri = R[self.pose_idx]
        return np.einsum("nij,nj->ni", Ri, P[self.point_idx]) + t[self.pose_idx]

    def information(self):
        """Per-observation information at the current estimate."""
        cov = self.sigma2.copy()
        q = None
        for code in (1, 2):
            sel = self.roles == code
            if not np.any(sel):
                continue
            if q is None:
                q = self.camera_points()
                J = self.cam.jacobian_unchecked(q)
            if code == 1:
                cov[sel] = point_uncertainty_covariances(
                    J[sel], self.R[self.pose_idx[sel]], self.S3[self.point_idx[sel]], self.sigma2[sel])
            else:
                cov[sel] = pose_uncertainty_covariances(
                    J[sel], q[sel], self.S6[self.pose_idx[sel]], self.sigma2[sel])
        return information_from_covariance(cov)

    def chi2(self, info, R=None, t=None, P=None):
        q = self.camera_points(R, t, P)
        e = self.cam.project_unchecked(q) - self.pixels
        return np.einsum("ni,nij,nj->n", e, info, e), e, q

    # -- normal equations ---------------------------------------------------
    def linearize(self, info, delta):
        chi2, e, q = self.chi2(info)
        w = robust_weight(chi2, delta) * self.active
        Winfo = info * w[:, None, None]
        J_pi = self.cam.jacobian_unchecked(q)
        Jx = J_pi @ perturbation_jacobian_at(q)
        Jp = J_pi @ self.R[self.pose_idx]
        JxW = np.swapaxes(Jx, 1, 2) @ Winfo
        JpW = np.swapaxes(Jp, 1, 2) @ Winfo
        lin = {}
        pf = self.pose_free[self.pose_idx] & self.active
        lf = self.point_free[self.point_idx] & self.active
        nfp, nfl = self.free_poses.size, self.free_points.size
        slot_p = self.pose_slot[self.pose_idx]
        slot_l = self.point_slot[self.point_idx]
        lin["Hpp"] = _block_sum((JxW @ Jx)[pf], slot_p[pf], nfp)
        lin["gp"] = _block_sum(np.einsum("nij,nj->ni", JxW, e)[pf], slot_p[pf], nfp)
        lin["Hll"] = _block_sum((JpW @ Jp)[lf], slot_l[lf], nfl)
        lin["gl"] = _block_sum(np.einsum("nij,nj->ni", JpW, e)[lf], slot_l[lf], nfl)
        both = pf & lf
        lin["Hpl"] = (JxW @ Jp)[both]
        lin["Hpl_p"] = slot_p[both]
        lin["Hpl_l"] = slot_l[both]
        return lin

    def solve_step(self, lin, lam):
        nfp, nfl = self.free_poses.size, self.free_points.size
        Hpp = lin["Hpp"].copy()
        gp = lin["gp"].reshape(-1)
        if nfp:
            d = np.einsum("kii->ki", Hpp)
            d += lam * (d + 1e-12 * max(d.max(), 1e-300))
        A = scipy.linalg.block_diag(*Hpp) if nfp else np.zeros((0, 0))
        if nfl == 0:
            dx = _solve_spd(A, -gp) if nfp else np.zeros(0)
            return dx.reshape(-1, 6), np.zeros((0, 3))
        V = lin["Hll"].copy()
        dv = np.einsum("kii->ki", V)
        dv += lam * (dv + 1e-12 * max(dv.max(), 1e-300))
        Vinv = np.linalg.inv(V)
        gl = lin["gl"]
        if nfp == 0:
            dl = -np.einsum("kij,kj->ki", Vinv, gl)
            return np.zeros((0, 6)), dl
        blocks = lin["Hpl"]
        rows = (6 * lin["Hpl_p"])[:, None, None] + np.arange(6)[None, :, None]
        cols = (3 * lin["Hpl_l"])[:, None, None] + np.arange(3)[None, None, :]
        rows = np.broadcast_to(rows, blocks.shape).ravel()
        cols = np.broadcast_to(cols, blocks.shape).ravel()
        W = sp.csr_matrix((blocks.ravel(), (rows, cols)), shape=(6 * nfp, 3 * nfl))
        Y = W @ _block_diag_sparse(Vinv)
        S = A - (Y @ W.T).toarray()
        b = -gp + Y @ gl.reshape(-1)
        dx = _solve_spd(S, b)
        rhs = -gl.reshape(-1) - W.T @ dx
        dl = np.einsum("kij,kj->ki", Vinv, rhs.reshape(-1, 3))
        return dx.reshape(-1, 6), dl

    def trial(self, dx, dl):
        R, t, P = self.R.copy(), self.t.copy(), self.P.copy()
        for slot, k in enumerate(self.free_poses):
            D = exp(dx[slot])
            R[k] = D.R @ R[k]
            t[k] = D.R @ t[k] + D.t
        if self.free_points.size:
            P[self.free_points] += dl
        return R, t, P

    def schur_nullity(self, info, delta, rel=1e-9):
        lin = self.linearize(info, delta)
        nfp = self.free_poses.size
        A = scipy.linalg.block_diag(*lin["Hpp"]) if nfp else np.zeros((0, 0))
        if self.free_points.size and nfp:
            Vinv = np.linalg.inv(lin["Hll"])
            blocks = lin["Hpl"]
            rows = (6 * lin["Hpl_p"])[:, None, None] + np.arange(6)[None, :, None]
            cols = (3 * lin["Hpl_l"])[:, None, None] + np.arange(3)[None, None, :]
            W = sp.csr_matrix((blocks.ravel(), (np.broadcast_to(rows, blocks.shape).ravel(),
                                                np.broadcast_to(cols, blocks.shape).ravel())),
                              shape=(6 * nfp, 3 * self.free_points.size))
            S = A - (W @ _block_diag_sparse(Vinv) @ W.T).toarray()
        else:
            S = A
        ev = np.linalg.eigvalsh(0.5 * (S + S.T))
        return int(np.sum(ev < rel * ev.max())) if ev.size else 0


def _block_diag_sparse(blocks):
    n, k, _ = blocks.shape
    rows = (k * np.arange(n))[:, None, None] + np.arange(k)[None, :, None]
    cols = (k * np.arange(n))[:, None, None] + np.arange(k)[None, None, :]
    rows = np.broadcast_to(rows, blocks.shape).ravel()
    cols = np.broadcast_to(cols, blocks.shape).ravel()
    return sp.csr_matrix((blocks.ravel(), (rows, cols)), shape=(n * k, n * k))


def _solve_spd(A, b):
    try:
        c = scipy.linalg.cho_factor(0.5 * (A + A.T), check_finite=False)
        return scipy.linalg.cho_solve(c, b, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        return np.linalg.lstsq(A, b, rcond=None)[0]


def _run_lm(prob, cfg):
    """Levenberg-Marquardt loop; returns a :class:`SolveReport` (no outlier pass)."""
    delta = np.sqrt(cfg.huber_chi2)
    rep = SolveReport()
    lam = cfg.lambda0
    info = prob.information()

    def cost_of(info_, R=None, t=None, P=None):
        c2, _, _ = prob.chi2(info_, R, t, P)
        return float(np.sum(robust_cost(c2, delta) * prob.active))

    cost = cost_of(info)
    if not np.isfinite(cost):
        raise Diverged("initial cost is not finite")
    rep.chi2_initial = cost
    rep.chi2_history.append(cost)
    tiny = 1e-30 * max(1, prob.pose_idx.size)
    for it in range(cfg.max_iters):
        if it:
            info = prob.information()
            cost = cost_of(info)
        if cost <= tiny:
            rep.converged = True
            break
        lin = prob.linearize(info, delta)
        accepted = False
        for _ in range(cfg.max_retries):
            dx, dl = prob.solve_step(lin, lam)
            if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dl))):
                lam *= 2.0
                continue
            R, t, P = prob.trial(dx, dl)
            new_cost = cost_of(info, R, t, P)
            if np.isfinite(new_cost) and new_cost < cost:
                prob.R, prob.t, prob.P = R, t, P
                lam /= 3.0
                accepted = True
                break
            lam *= 2.0
        rep.iterations = it + 1
        if not accepted:
            # no lambda produced a decrease: we are at a (local) minimum
            rep.converged = True
            break
        rel = (cost - new_cost) / cost
        cost = new_cost
        rep.chi2_history.append(cost)
        if rel < cfg.rel_tol:
            rep.converged = True
            break
    info = prob.information()
    final_chi2, _, _ = prob.chi2(info)
    rep.chi2_final = float(np.sum(robust_cost(final_chi2, delta) * prob.active))
    if not np.isfinite(rep.chi2_final) or not np.all(np.isfinite(prob.P)):
        raise Diverged("optimisation produced non-finite values")
    rep._final_info = info
    rep._final_chi2 = final_chi2
    return rep


def _finish(prob, rep, cfg, pose_ids, point_ids):
    delta = np.sqrt(cfg.huber_chi2)
    chi2 = rep._final_chi2
    out = chi2 > cfg.huber_chi2
    rep.n_outliers = int(np.sum(out))
    rep.n_inliers = int(out.size - rep.n_outliers)
    rep.outliers = [(pose_ids[prob.pose_idx[m]], point_ids[prob.point_idx[m]])
                    for m in np.flatnonzero(out)]
    lin = prob.linearize(rep._final_info, delta)
    rep.hessian_blocks = {pose_ids[k]: lin["Hpp"][slot].copy()
                          for slot, k in enumerate(prob.free_poses)}
    rep._outlier_mask = out
    return rep


# ---------------------------------------------------------------- tracking
def solve_tracking(map_state, frame, matches, cam, cfg):
    """Pose-only solve against fixed landmarks.

    Parameters
    ----------
    frame : Keyframe-like
        Provides ``pose`` (the initial guess) and ``id``.
    matches : list of (landmark_id, pixel[, sigma_px])
    cfg : SolverConfig

    Returns
    -------
    (Pose, SolveReport)
        ``report.outliers`` lists ``(frame.id, landmark_id)`` pairs beyond the
        chi-square gate.
    """
    if len(matches) < 6:
        raise TooFewMatches(f"tracking needs >= 6 matches, got {len(matches)}")
    lm_ids = [m[0] for m in matches]
    pixels = np.array([m[1] for m in matches], dtype=float)
    sig = np.array([m[2] if len(m) > 2 else 1.0 for m in matches], dtype=float)
    P = np.array([map_state.landmarks[i].position for i in lm_ids])
    S3 = np.array([map_state.landmarks[i].sigma3 for i in lm_ids])
    n = len(matches)
    role = _ROLE_CODE[POINT_UNC] if cfg.use_point_unc else _ROLE_CODE[STANDARD]
    prob = _Problem(cam, frame.pose.R[None], frame.pose.t[None], P,
                    pose_free=[True], point_free=np.zeros(n, bool),
                    pose_idx=np.zeros(n, int), point_idx=np.arange(n),
                    pixels=pixels, sigma2=sig[:, None, None] ** 2 * np.eye(2),
                    roles=np.full(n, role), S3=S3)
    rep = _run_lm(prob, cfg)
    out = rep._final_chi2 > cfg.huber_chi2
    if np.any(out) and np.sum(~out) >= 6:
        first = rep
        prob.active = ~out
        rep = _run_lm(prob, cfg)
        rep.chi2_initial = first.chi2_initial
        rep.iterations += first.iterations
        rep.chi2_history = first.chi2_history + rep.chi2_history
    _finish(prob, rep, cfg, [frame.id], lm_ids)
    return Pose(prob.R[0], prob.t[0]).orthonormalized(), rep


# ---------------------------------------------------------------- BA
def _build_ba(map_state, cam, free_kfs, fixed_kfs, measurement_kfs, landmark_ids, cfg):
    """Assemble a BA problem.

    ``fixed_kfs`` are held constant; those also in ``measurement_kfs`` get
    pose-uncertainty weighted factors when enabled.
    """
    kf_ids = list(free_kfs) + list(fixed_kfs)
    kf_slot = {k: i for i, k in enumerate(kf_ids)}
    lm_slot = {l: i for i, l in enumerate(landmark_ids)}
    R = np.array([map_state.keyframes[k].pose.R for k in kf_ids])
    t = np.array([map_state.keyframes[k].pose.t for k in kf_ids])
    P = np.array([map_state.landmarks[l].position for l in landmark_ids]).reshape(-1, 3)
    S6 = np.array([map_state.keyframes[k].sigma6 for k in kf_ids])
    pose_idx, point_idx, pixels, roles, sig = [], [], [], [], []
    pose_role = _ROLE_CODE[POSE_UNC] if cfg.use_pose_unc else _ROLE_CODE[STANDARD]
    measurement_kfs = set(measurement_kfs)
    for l in landmark_ids:
        lm = map_state.landmarks[l]
        for k, px in lm.observations.items():
            slot = kf_slot.get(k)
            if slot is None:
                continue
            pose_idx.append(slot)
            point_idx.append(lm_slot[l])
            pixels.append(px)
            roles.append(pose_role if k in measurement_kfs else _ROLE_CODE[STANDARD])
            sig.append(map_state.sigma_px)
    sig = np.asarray(sig, dtype=float)
    prob = _Problem(cam, R, t, P,
                    pose_free=[True] * len(free_kfs) + [False] * len(fixed_kfs),
                    point_free=np.ones(len(landmark_ids), bool),
                    pose_idx=pose_idx, point_idx=point_idx,
                    pixels=np.array(pixels).reshape(-1, 2),
                    sigma2=sig[:, None, None] ** 2 * np.eye(2),
                    roles=roles, S6=S6)
    return prob, kf_ids


def _write_back(map_state, prob, kf_ids, landmark_ids, rep):
    for slot in prob.free_poses:
        kf = map_state.keyframes[kf_ids[slot]]
        kf.pose = Pose(prob.R[slot], prob.t[slot]).orthonormalized()
    for i, l in enumerate(landmark_ids):
        map_state.landmarks[l].position = prob.P[i].copy()
    for k, H in rep.hessian_blocks.items():
        map_state.keyframes[k].hessian = H


def _optimisable_landmarks(map_state, source_kfs, allowed_kfs):
    allowed = set(allowed_kfs)
    ids = set()
    for k in source_kfs:
        ids.update(map_state.keyframes[k].observations)
    return sorted(l for l in ids
                  if sum(1 for k in map_state.landmarks[l].observations if k in allowed) >= 2)


def solve_local_ba(map_state, local_ids, fixed_ids, cam, cfg):
    """Windowed BA: free ``local_ids`` and their points; ``fixed_ids`` act as measurements.

    When ``fixed_ids`` is empty the oldest local keyframe is hard-fixed to
    anchor the gauge.
    """
    order = {k: i for i, k in enumerate(map_state.keyframe_ids())}
    local = sorted(set(local_ids), key=order.__getitem__)
    fixed = sorted(set(fixed_ids), key=order.__getitem__)
    if set(local) & set(fixed):
        raise ValueError("local and fixed keyframe sets overlap")
    if len(local) + len(fixed) < 2:
        raise GaugeUnderconstrained("local BA needs at least two keyframes")
    measurement = list(fixed)
    hard = list(fixed)
    if not fixed:
        hard = [local[0]]
        local = local[1:]
    if local:
        landmarks = _optimisable_landmarks(map_state, local, local + hard)
    else:
        landmarks = _optimisable_landmarks(map_state, hard, hard)
    prob, kf_ids = _build_ba(map_state, cam, local, hard, measurement, landmarks, cfg)
    for k in map_state.keyframes.values():
        k.role = "idle"
    for k in local:
        map_state.keyframes[k].role = "local"
    for k in hard:
        map_state.keyframes[k].role = "fixed"
    if prob.pose_idx.size == 0:
        return SolveReport(converged=True)
    rep = _run_lm(prob, cfg)
    _finish(prob, rep, cfg, kf_ids, landmarks)
    _write_back(map_state, prob, kf_ids, landmarks, rep)
    rep.factors = _factor_list(prob, kf_ids, landmarks, rep._final_info)
    return rep


def solve_global_ba(map_state, cam, cfg, fix_first=True, refresh=True, check_gauge=False):
    """All keyframes and points free except the first keyframe (gauge anchor)."""
    ids = map_state.keyframe_ids()
    if fix_first:
        free, hard = ids[1:], ids[:1]
    else:
        free, hard = ids, []
    landmarks = _optimisable_landmarks(map_state, ids, ids)
    prob, kf_ids = _build_ba(map_state, cam, free, hard, [], landmarks, cfg)
    if prob.pose_idx.size == 0:
        return SolveReport(converged=True)
    null_dims = None
    if check_gauge:
        null_dims = prob.schur_nullity(prob.information(), np.sqrt(cfg.huber_chi2))
    rep = _run_lm(prob, cfg)
    _finish(prob, rep, cfg, kf_ids, landmarks)
    _write_back(map_state, prob, kf_ids, landmarks, rep)
    rep.null_dims = null_dims
    if refresh:
        refresh_all_uncertainties(map_state, cam)
    return rep


def _factor_list(prob, kf_ids, landmark_ids, info):
    names = {v: k for k, v in _ROLE_CODE.items()}
    return [ReprojectionFactor(kf_ids[prob.pose_idx[m]], landmark_ids[prob.point_idx[m]],
                               prob.pixels[m], info[m], names[int(prob.roles[m])])
            for m in range(prob.pose_idx.size)]


def default_local_window(map_state, window):
    """Last ``window`` keyframes plus the older keyframes sharing a landmark with them."""
    ids = map_state.keyframe_ids()
    local = ids[-window:]
    seen = set()
    for k in local:
        seen.update(map_state.keyframes[k].observations)
    fixed = [k for k in ids[:-window]
             if any(l in seen for l in map_state.keyframes[k].observations)] if len(ids) > window else []
    return local, fixed
