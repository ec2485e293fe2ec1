"""Loop proposal, epipolar verification and SE(3) loop correction.

Appearance-based retrieval is replaced by proximity of estimated keyframe
positions; 2D-2D matches between two keyframes are their shared track ids.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import NoModel, NumericalError, TooFewMatches
from .init_sfm import RansacConfig, _triangulate_safe, decompose_essential, ransac_essential
from .se3 import Pose, exp, log
from .solver import SolverConfig, solve_global_ba

logger = logging.getLogger(__name__)


@dataclass
class LoopConfig:
    radius_frac: float = 0.1
    min_gap: int = 20
    min_inlier_ratio: float = 0.5
    thresh_rad: float = 1e-3
    ransac_iters: int = 2000
    seed: int = 0


@dataclass
class LoopCandidate:
    current_kf: int
    candidate_kf: int
    matches: list = field(default_factory=list)
    verified: bool = False
    relative_pose: Pose = None
    inlier_ratio: float = 0.0

    def __post_init__(self):
        if self.current_kf == self.candidate_kf:
            raise ValueError("a loop candidate must pair two different keyframes")


def propose_candidates(map_state, current_kf, cfg=None):
    """Keyframes near ``current_kf`` in estimated position, at least ``min_gap`` keyframes older.

    Keyframes that already share landmarks with ``current_kf`` are skipped:
    their association is already in the map. Sorted by distance.
    """
    cfg = cfg or LoopConfig()
    ids = map_state.keyframe_ids()
    if len(ids) < cfg.min_gap:
        return []
    pos = {k: i for i, k in enumerate(ids)}
    ic = pos[current_kf]
    radius = cfg.radius_frac * map_state.scene_extent()
    c_cur = map_state.keyframes[current_kf].pose.center
    covis = map_state.covisibility(current_kf)
    out = []
    for k in ids[: max(ic - cfg.min_gap + 1, 0)]:
        if covis.get(k, 0) > 0:
            continue
        d = np.linalg.norm(map_state.keyframes[k].pose.center - c_cur)
        if d <= radius:
            out.append((d, pos[k], k))
    out.sort()
    return [LoopCandidate(current_kf, k) for _, _, k in out]


def _rotation_fit(ba, bb):
    """Best rotation with ``bb ~ R ba`` (Kabsch on unit vectors)."""
    U, _, Vt = np.linalg.svd(bb.T @ ba)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


def verify_bearings(ba, bb, cfg=None, depths_a=None):
    """Epipolar verification of matched bearings (``a`` candidate, ``b`` current).

    A rotation-only fit is tried first so that zero-baseline pairs (including a
    keyframe against itself) verify with a pure rotation. Otherwise an
    essential matrix is fitted by RANSAC and decomposed; the unit translation
    is scaled by the median ratio of ``depths_a`` (known map depths in frame
    ``a``, NaN where unknown) to the triangulated depths.

    Returns
    -------
    (verified, relative_pose, inlier_ratio)
        ``relative_pose`` maps frame ``a`` into frame ``b``.
    """
    cfg = cfg or LoopConfig()
    ba = np.asarray(ba, dtype=float)
    bb = np.asarray(bb, dtype=float)
    n = ba.shape[0]
    if n < 8:
        raise TooFewMatches(f"verification needs >= 8 matches, got {n}")
    R = _rotation_fit(ba, bb)
    ang = np.arctan2(np.linalg.norm(np.cross(ba @ R.T, bb), axis=1), np.sum((ba @ R.T) * bb, axis=1))
    rot_ratio = float(np.mean(ang < cfg.thresh_rad))
    if rot_ratio >= cfg.min_inlier_ratio:
        return True, Pose(R, np.zeros(3)), rot_ratio
    rcfg = RansacConfig(thresh_rad=cfg.thresh_rad, max_iters=cfg.ransac_iters,
                        min_inlier_ratio=cfg.min_inlier_ratio)
    try:
        E, mask = ransac_essential(ba, bb, rcfg, seed=cfg.seed)
        T = decompose_essential(E, ba[mask], bb[mask])
    except NoModel:
        return False, None, rot_ratio
    except NumericalError as exc:
        logger.debug("verification failed: %s", exc)
        return False, None, 0.0
    ratio = float(mask.mean())
    scale = 1.0
    if depths_a is not None:
        _, s, u, ok, _ = _triangulate_safe(Pose.identity(), T, ba, bb)
        d = np.asarray(depths_a, dtype=float)
        good = mask & ok & (s > 0) & np.isfinite(d) & (d > 0)
        if np.any(good):
            scale = float(np.median(d[good] / s[good]))
    return ratio >= cfg.min_inlier_ratio, Pose(T.R, T.t * scale), ratio


def candidate_matches(map_state, cand):
    """Shared track ids of the two keyframes, sorted."""
    a = map_state.keyframes[cand.candidate_kf].measurements
    b = map_state.keyframes[cand.current_kf].measurements
    return sorted(set(a) & set(b))


def verify_candidate(map_state, cand, cam, cfg=None):
    """Run epipolar verification on ``cand`` in place and return it."""
    cfg = cfg or LoopConfig()
    tracks = cand.matches or candidate_matches(map_state, cand)
    cand.matches = list(tracks)
    if len(tracks) < 8:
        raise TooFewMatches(f"only {len(tracks)} shared tracks")
    kf_a = map_state.keyframes[cand.candidate_kf]
    kf_b = map_state.keyframes[cand.current_kf]
    ua = np.array([kf_a.measurements[t] for t in tracks])
    ub = np.array([kf_b.measurements[t] for t in tracks])
    ok = cam.valid_pixels(ua) & cam.valid_pixels(ub)
    if ok.sum() < 8:
        raise TooFewMatches("too few matches unproject inside the FoV")
    ua, ub = ua[ok], ub[ok]
    tracks = [t for t, k in zip(tracks, ok) if k]
    depths = np.full(len(tracks), np.nan)
    for i, t in enumerate(tracks):
        for lm_id in map_state.track_index.get(t, []):
            if lm_id in kf_a.observations:
                depths[i] = np.linalg.norm(kf_a.pose.act(map_state.landmarks[lm_id].position))
                break
    verified, T, ratio = verify_bearings(cam.unproject(ua), cam.unproject(ub), cfg, depths)
    cand.verified = bool(verified)
    cand.relative_pose = T if verified else None
    cand.inlier_ratio = ratio
    return cand


def apply_loop_correction(map_state, cand):
    """Move keyframes between candidate and current towards the loop constraint.

    The correction ``C`` (a world-frame rigid motion) that puts the current
    keyframe at ``relative_pose @ T_candidate`` is spread over the loop:
    keyframe ``k`` receives ``exp(alpha_k log C)`` with ``alpha`` rising
    linearly from 0 at the candidate to 1 at the current keyframe; later
    keyframes take the full correction. Each landmark follows its first
    observer.

    Returns the correction ``C``.
    """
    ids = map_state.keyframe_ids()
    pos = {k: i for i, k in enumerate(ids)}
    ia, ib = pos[cand.candidate_kf], pos[cand.current_kf]
    T_cur = map_state.keyframes[cand.current_kf].pose
    T_new = cand.relative_pose @ map_state.keyframes[cand.candidate_kf].pose
    C = T_new.inverse() @ T_cur
    xi = log(C)
    corr = {}
    for k in ids:
        i = pos[k]
        if i <= ia:
            continue
        alpha = min(1.0, (i - ia) / (ib - ia))
        corr[k] = exp(alpha * xi)
    for lm in map_state.landmarks.values():
        first = min(lm.observations, key=pos.__getitem__, default=None)
        if first in corr:
            lm.position = corr[first].act(lm.position)
    for k, Ck in corr.items():
        kf = map_state.keyframes[k]
        kf.pose = kf.pose @ Ck.inverse()
    return C


def fuse_duplicates(map_state):
    """Merge landmarks sharing a track id into the oldest one; returns the merge count."""
    n = 0
    for track_id in sorted(map_state.track_index):
        ids = sorted(map_state.track_index.get(track_id, []))
        for drop in ids[1:]:
            map_state.merge_landmarks(ids[0], drop)
            n += 1
    return n


def close_loop(map_state, cand, cam, cfg=None, solver_cfg=None):
    """Correct, fuse, global BA and refresh uncertainties, in that order."""
    if not cand.verified or cand.relative_pose is None:
        raise ValueError("close_loop needs a verified candidate")
    apply_loop_correction(map_state, cand)
    fused = fuse_duplicates(map_state)
    rep = solve_global_ba(map_state, cam, solver_cfg or SolverConfig(), refresh=True)
    rep.fused = fused
    return rep
