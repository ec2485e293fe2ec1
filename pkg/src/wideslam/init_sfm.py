"""Two-view structure from motion on bearing vectors.

Wide-FoV epipolar curves are not lines in the image, so everything here works
on unit bearings: the eight-point essential matrix, a RANSAC loop scored by the
angular distance of the second bearing to the epipolar plane, decomposition
with signed-depth cheirality (bearings may point behind the image plane), and
midpoint triangulation.
"""
import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    AmbiguousCheirality,
    DegenerateConfig,
    DegenerateEpipolarPlane,
    InitFailed,
    NoModel,
    NumericalError,
    ParallelRays,
)
from .mapstate import Keyframe, MapState
from .se3 import Pose, skew
from .uncertainty import refresh_all_uncertainties

log = logging.getLogger(__name__)

_RANK_TOL = 1e-10


@dataclass
class RansacConfig:
    thresh_rad: float = 1e-3
    max_iters: int = 10000
    min_inlier_ratio: float = 0.3
    confidence: float = 0.99
    chunk: int = 256


@dataclass
class InitConfig:
    ransac: RansacConfig = None
    min_parallax_deg: float = 1.0
    min_landmarks: int = 30
    sigma_px: float = 1.0
    max_history: int = 20
    point_prior_frac: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.ransac is None:
            self.ransac = RansacConfig()


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _constraint_rows(ba, bb):
    # b_b^T E b_a = sum_ij b_b[i] E[i, j] b_a[j]
    return (bb[..., :, None] * ba[..., None, :]).reshape(ba.shape[:-1] + (9,))


def project_to_essential(E):
    """Closest matrix with singular values (s, s, 0), s the mean of the top two."""
    U, s, Vt = np.linalg.svd(E)
    m = 0.5 * (s[..., 0] + s[..., 1])
    S = np.zeros(s.shape)
    S[..., 0] = m
    S[..., 1] = m
    return (U * S[..., None, :]) @ Vt


def eight_point(bearings_a, bearings_b):
    """Least-squares essential matrix with ``b_b^T E b_a = 0``; needs >= 8 pairs."""
    ba = _unit(bearings_a)
    bb = _unit(bearings_b)
    if ba.shape[0] < 8 or ba.shape != bb.shape:
        raise DegenerateConfig("eight-point needs at least 8 correspondences")
    A = _constraint_rows(ba, bb)
    _, s, Vt = np.linalg.svd(A)
    if s.size < 8 or s[7] <= _RANK_TOL * s[0]:
        raise DegenerateConfig("constraint matrix has rank < 8")
    E = Vt[-1].reshape(3, 3)
    E = project_to_essential(E)
    return E / np.linalg.norm(E)


def _eight_point_batch(ba, bb, idx):
    """Vectorised minimal solves; returns ``(E, ok)`` for each sample row of ``idx``."""
    A = _constraint_rows(ba[idx], bb[idx])           # (K, 8, 9)
    # the last column of a complete QR of A^T spans the null space; much
    # cheaper than a batched SVD
    Q, Rq = np.linalg.qr(np.swapaxes(A, 1, 2), mode="complete")
    d = np.abs(np.diagonal(Rq, axis1=1, axis2=2))
    ok = d.min(axis=1) > _RANK_TOL * d.max(axis=1)
    E = project_to_essential(Q[:, :, -1].reshape(-1, 3, 3))
    n = np.linalg.norm(E, axis=(1, 2))
    ok &= n > 0
    E = E / np.where(n > 0, n, 1.0)[:, None, None]
    return E, ok


def epipolar_angular_error(E, bearing_a, bearing_b):
    """Angle between ``bearing_b`` and the epipolar plane with normal ``E @ bearing_a``.

    Works on single vectors or ``(N, 3)`` stacks; invariant to scaling ``E``.
    """
    E = np.asarray(E, dtype=float)
    ba = np.asarray(bearing_a, dtype=float)
    bb = _unit(bearing_b)
    n = ba @ E.T
    nn = np.linalg.norm(n, axis=-1)
    if np.any(nn <= 0):
        raise DegenerateEpipolarPlane("epipolar plane normal vanishes")
    num = np.abs(np.sum(bb * n, axis=-1))
    return np.arcsin(np.clip(num / nn, 0.0, 1.0))


def _inlier_counts(E, rows, outer_a, thresh):
    """Inliers per hypothesis, as two matrix products.

    ``rows`` holds ``vec(b_b b_a^T)`` and ``outer_a`` ``vec(b_a b_a^T)`` per
    correspondence, so ``b_b^T E b_a`` and ``|E b_a|^2`` are both linear in
    the flattened ``E`` and ``E^T E``. Squared sines are compared to skip the
    arcsin.
    """
    K = E.shape[0]
    num = E.reshape(K, 9) @ rows.T
    nn2 = (np.swapaxes(E, 1, 2) @ E).reshape(K, 9) @ outer_a.T
    ok = (num * num < np.sin(thresh) ** 2 * nn2) & (nn2 > 0)
    return ok.sum(axis=1)


def ransac_essential(bearings_a, bearings_b, cfg=None, seed=0):
    """Eight-point RANSAC with an angular inlier test.

    Deterministic for a given ``(data, seed, cfg)``; equal inlier counts are
    resolved in favour of the earliest hypothesis.

    Returns
    -------
    (E, inlier_mask)
    """
    cfg = cfg or RansacConfig()
    ba = _unit(bearings_a)
    bb = _unit(bearings_b)
    n = ba.shape[0]
    if n < 8:
        raise NoModel("RANSAC needs at least 8 correspondences")
    rows = _constraint_rows(ba, bb)
    outer_a = _constraint_rows(ba, ba)
    rng = np.random.default_rng(seed)
    best_count, best_E = -1, None
    needed = cfg.max_iters
    done = 0
    while done < min(needed, cfg.max_iters):
        k = min(cfg.chunk, cfg.max_iters - done)
        idx = np.argsort(rng.random((k, n)), axis=1)[:, :8]
        E, ok = _eight_point_batch(ba, bb, idx)
        done += k
        if not np.any(ok):
            continue
        E = E[ok]
        counts = _inlier_counts(E, rows, outer_a, cfg.thresh_rad)
        j = int(np.argmax(counts))  # first maximum
        if counts[j] > best_count:
            best_count, best_E = int(counts[j]), E[j]
            ratio = best_count / n
            if ratio >= 1.0:
                needed = done
            elif ratio > 8.0 / n:
                p_good = ratio ** 8
                needed = int(np.ceil(np.log(1 - cfg.confidence) / np.log1p(-p_good)))
    if best_E is None or best_count / n < cfg.min_inlier_ratio:
        raise NoModel(f"best inlier ratio {max(best_count, 0) / n:.3f} below minimum")
    mask = epipolar_angular_error(best_E, ba, bb) < cfg.thresh_rad
    # refit on the inliers, keep the refit only if it does not lose support
    for _ in range(2):
        if mask.sum() < 8:
            break
        try:
            E_ref = eight_point(ba[mask], bb[mask])
        except DegenerateConfig:
            break
        m2 = epipolar_angular_error(E_ref, ba, bb) < cfg.thresh_rad
        if m2.sum() < mask.sum():
            break
        best_E, mask = E_ref, m2
    if mask.sum() / n < cfg.min_inlier_ratio:
        raise NoModel("inlier ratio dropped below minimum after refit")
    return best_E, mask


def triangulate_midpoint(T_a, T_b, b_a, b_b):
    """Midpoint of the common perpendicular of two viewing rays.

    ``b_a``/``b_b`` are camera-frame bearings (single or stacked). Returns
    ``(points, depth_a, depth_b)`` with signed ray parameters as depths.
    """
    b_a = _unit(b_a)
    b_b = _unit(b_b)
    single = b_a.ndim == 1
    b_a, b_b = np.atleast_2d(b_a), np.atleast_2d(b_b)
    ca, cb = T_a.center, T_b.center
    da = b_a @ T_a.R        # R^T b, row form
    db = b_b @ T_b.R
    w0 = ca - cb
    b = np.sum(da * db, axis=1)
    d = da @ w0
    e = db @ w0
    denom = 1.0 - b * b
    if np.any(denom <= np.sin(1e-6) ** 2):
        raise ParallelRays("viewing rays are (nearly) parallel")
    s = (b * e - d) / denom
    u = (e - b * d) / denom
    X = 0.5 * ((ca + s[:, None] * da) + (cb + u[:, None] * db))
    if single:
        return X[0], float(s[0]), float(u[0])
    return X, s, u


def _triangulate_safe(T_a, T_b, b_a, b_b):
    """Like :func:`triangulate_midpoint` but flags parallel rays instead of raising."""
    b_a, b_b = _unit(np.atleast_2d(b_a)), _unit(np.atleast_2d(b_b))
    da = b_a @ T_a.R
    db = b_b @ T_b.R
    cosang = np.sum(da * db, axis=1)
    ok = 1.0 - cosang * cosang > np.sin(1e-6) ** 2
    X = np.full(b_a.shape, np.nan)
    s = np.full(b_a.shape[0], np.nan)
    u = np.full(b_a.shape[0], np.nan)
    if np.any(ok):
        X[ok], s[ok], u[ok] = triangulate_midpoint(T_a, T_b, b_a[ok], b_b[ok])
    return X, s, u, ok, np.degrees(np.arccos(np.clip(cosang, -1, 1)))


def essential_candidates(E):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    out = []
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for sign in (1.0, -1.0):
            out.append(Pose(R, sign * t))
    return out


def decompose_essential(E, bearings_a, bearings_b):
    """Relative pose (frame a -> frame b, unit translation) from an essential matrix.

    Among the four candidates, picks the one with the most correspondences at
    positive signed depth along both rays.
    """
    ba = _unit(np.atleast_2d(bearings_a))
    bb = _unit(np.atleast_2d(bearings_b))
    if ba.shape[0] < 1:
        raise AmbiguousCheirality("no correspondences to test cheirality")
    scores = []
    I = Pose.identity()
    cands = essential_candidates(E)
    for T in cands:
        _, s, u, ok, _ = _triangulate_safe(I, T, ba, bb)
        scores.append(int(np.sum(ok & (s > 0) & (u > 0))))
    order = np.argsort(scores)[::-1]
    if scores[order[0]] == 0 or scores[order[0]] == scores[order[1]]:
        raise AmbiguousCheirality(f"cheirality scores {scores} have no strict winner")
    return cands[int(order[0])]


def relative_essential(T):
    """``t^ R`` for a relative pose."""
    return skew(T.t) @ T.R


def initialize_map(frame_a, frame_b, cam, cfg=None, matches=None):
    """Build a two-keyframe map.

    ``frame_a`` and ``frame_b`` are ``(frame_id, timestamp, {track_id: pixel})``
    tuples. The first keyframe sits at the origin and the baseline has unit
    length. Landmarks must pass the parallax gate and have positive signed
    depth in both views; a two-view global BA and an uncertainty refresh follow.
    """
    from .solver import SolverConfig, solve_global_ba

    cfg = cfg or InitConfig()
    id_a, ts_a, obs_a = frame_a
    id_b, ts_b, obs_b = frame_b
    if matches is None:
        matches = sorted(set(obs_a) & set(obs_b))
    ua = np.array([obs_a[m] for m in matches]).reshape(-1, 2)
    ub = np.array([obs_b[m] for m in matches]).reshape(-1, 2)
    ok = cam.valid_pixels(ua) & cam.valid_pixels(ub) if len(matches) else np.zeros(0, bool)
    matches = [m for m, k in zip(matches, ok) if k]
    if len(matches) < max(8, cfg.min_landmarks):
        raise InitFailed(f"only {len(matches)} usable matches")
    ua, ub = ua[ok], ub[ok]
    ba, bb = cam.unproject(ua), cam.unproject(ub)
    try:
        E, mask = ransac_essential(ba, bb, cfg.ransac, seed=cfg.seed)
        T_b = decompose_essential(E, ba[mask], bb[mask])
    except NumericalError as exc:
        raise InitFailed(f"two-view geometry failed: {exc}") from exc

    I = Pose.identity()
    X, s, u, nonpar, parallax = _triangulate_safe(I, T_b, ba, bb)
    good = mask & nonpar & (s > 0) & (u > 0) & (parallax >= cfg.min_parallax_deg)
    if good.sum() < cfg.min_landmarks:
        raise InitFailed(f"only {int(good.sum())} landmarks pass the parallax/depth gates")

    m = MapState(max_history=cfg.max_history, sigma_px=cfg.sigma_px)
    kf_a = m.add_keyframe(Keyframe(id_a, ts_a, I, measurements=dict(obs_a)))
    kf_b = m.add_keyframe(Keyframe(id_b, ts_b, T_b, measurements=dict(obs_b)))
    for i in np.flatnonzero(good):
        lm = m.new_landmark(matches[i], X[i])
        m.add_observation(kf_a.id, lm.id, ua[i], ba[i])
        m.add_observation(kf_b.id, lm.id, ub[i], bb[i])

    scfg = SolverConfig()
    rep = solve_global_ba(m, cam, scfg, refresh=False)
    for kf_id, lm_id in rep.outliers:
        m.remove_observation(kf_id, lm_id)
    for lm_id in [l for l, lm in m.landmarks.items() if len(lm.observations) < 2]:
        m.remove_landmark(lm_id)
    if len(m.landmarks) < cfg.min_landmarks:
        raise InitFailed("too few landmarks survive two-view BA")
    normalize_scale(m, kf_a.id, kf_b.id)
    m.point_prior_sigma = cfg.point_prior_frac * m.median_depth()
    refresh_all_uncertainties(m, cam)
    return m


def normalize_scale(m, kf_a, kf_b):
    """Rescale the map so the two keyframe centres are one unit apart.

    Assumes ``kf_a`` is at the origin of the world frame.
    """
    d = np.linalg.norm(m.keyframes[kf_b].pose.center - m.keyframes[kf_a].pose.center)
    if d <= 0:
        raise InitFailed("zero baseline")
    scale = 1.0 / d
    for kf in m.keyframes.values():
        kf.pose = Pose(kf.pose.R, kf.pose.t * scale)
        if kf.hessian is not None:
            # translation rows/cols carry units of length
            D = np.diag([1.0, 1.0, 1.0, 1 / scale, 1 / scale, 1 / scale])
            kf.hessian = D @ kf.hessian @ D
    for lm in m.landmarks.values():
        lm.position = lm.position * scale
