import copy

import numpy as np
import pytest

from wideslam.evaluation import Trajectory, ate_rmse
from wideslam.exceptions import GaugeUnderconstrained, TooFewMatches
from wideslam.mapstate import Keyframe
from wideslam.se3 import exp, log, rotation_angle
from wideslam.solver import (
    POINT_UNC,
    POSE_UNC,
    STANDARD,
    SolverConfig,
    default_local_window,
    robust_weight,
    solve_global_ba,
    solve_local_ba,
    solve_tracking,
)

DELTA = np.sqrt(5.991)


def _perturb(m, rng, frac=0.01, skip_first=True):
    ids = m.keyframe_ids()
    for k in ids[1:] if skip_first else ids:
        m.keyframes[k].pose = exp(rng.normal(0, frac, 6)) @ m.keyframes[k].pose
    for lm in m.landmarks.values():
        lm.position = lm.position + rng.normal(0, frac, 3)


def _kf_ate(m, gt):
    ids = m.keyframe_ids()
    ts = [m.keyframes[k].timestamp for k in ids]
    est = Trajectory.from_poses(ts, [m.keyframes[k].pose.inverse() for k in ids])
    ref = Trajectory.from_poses(ts, [gt[k].inverse() for k in ids])
    return ate_rmse(est, ref)


def _matches(m, tracks, frame_index, sigma=1.0):
    f = tracks.frame_ids[frame_index]
    sel = tracks.obs_frame == frame_index
    lm_of = {lm.track_id: lm.id for lm in m.landmarks.values()}
    return f, [(lm_of[t], uv, sigma) for t, uv in zip(tracks.obs_landmark[sel], tracks.obs_uv[sel])
               if t in lm_of]


# ---------------------------------------------------------------- kernel
def test_robust_weight_examples():
    assert robust_weight(0.0, DELTA) == 1.0
    assert robust_weight(DELTA ** 2, DELTA) == 1.0
    assert robust_weight(4 * DELTA ** 2, DELTA) == pytest.approx(0.5, rel=1e-15)


# ---------------------------------------------------------------- tracking
def test_tracking_fixed_point(gt_map):
    m, gt, cam, tracks = gt_map(n_frames=12, kf_every=3)
    fid, matches = _matches(m, tracks, 5)
    T_gt = tracks.gt_pose(5)
    T, rep = solve_tracking(m, Keyframe(fid, 0.0, T_gt), matches, cam, SolverConfig())
    assert np.abs(T.matrix() - T_gt.matrix()).max() < 1e-10
    assert rep.chi2_final < 1e-12


def test_tracking_recovers_perturbed_pose(gt_map):
    m, gt, cam, tracks = gt_map(n_frames=12, kf_every=3)
    fid, matches = _matches(m, tracks, 7)
    T_gt = tracks.gt_pose(7)
    guess = exp(np.r_[np.radians(2.0) * np.array([0.6, 0.0, 0.8]), 0.02, -0.01, 0.0]) @ T_gt
    T, _ = solve_tracking(m, Keyframe(fid, 0.0, guess), matches, cam, SolverConfig())
    assert np.linalg.norm(log(T @ T_gt.inverse())) < 1e-6


def test_tracking_needs_six_matches(gt_map):
    m, gt, cam, tracks = gt_map(n_frames=12, kf_every=3)
    fid, matches = _matches(m, tracks, 4)
    with pytest.raises(TooFewMatches):
        solve_tracking(m, Keyframe(fid, 0.0, tracks.gt_pose(4)), matches[:5], cam, SolverConfig())


def test_tracking_flags_outliers(gt_map):
    m, gt, cam, tracks = gt_map(n_frames=12, kf_every=3)
    fid, matches = _matches(m, tracks, 4)
    bad = {matches[i][0] for i in range(0, 40, 4)}
    matches = [(l, uv + (25.0 if l in bad else 0.0), s) for l, uv, s in matches]
    T, rep = solve_tracking(m, Keyframe(fid, 0.0, tracks.gt_pose(4)), matches, cam, SolverConfig())
    assert {l for _, l in rep.outliers} == bad
    assert np.linalg.norm(log(T @ tracks.gt_pose(4).inverse())) < 1e-8


def _heteroscedastic_tracking_errors(seed):
    """Pose errors (weighted, uniform) with half the points displaced per their covariance."""
    from conftest import build_gt_map

    m, gt, cam, tracks = build_gt_map(n_frames=6, n_landmarks=120, pixel_sigma=0.5, seed=seed, kf_every=3)
    rng = np.random.default_rng(1000 + seed)
    s = 0.05
    for i, lm in enumerate(sorted(m.landmarks.values(), key=lambda l: l.id)):
        if i % 2:
            lm.position = lm.position + rng.normal(0, s, 3)
            lm.sigma3 = s * s * np.eye(3)
        else:
            lm.sigma3 = np.zeros((3, 3))
    fid, matches = _matches(m, tracks, 4, sigma=0.5)
    T_gt = tracks.gt_pose(4)
    errs = []
    for use in (True, False):
        cfg = SolverConfig(use_point_unc=use, huber_chi2=1e6)
        T, _ = solve_tracking(m, Keyframe(fid, 0.0, T_gt), matches, cam, cfg)
        errs.append(np.linalg.norm(T.inverse().t - T_gt.inverse().t))
    return errs


def test_point_weighting_helps_heteroscedastic_tracking():
    errs = np.array([_heteroscedastic_tracking_errors(seed) for seed in range(20)])
    assert errs[:, 0].mean() < errs[:, 1].mean()
    assert np.sum(errs[:, 0] < errs[:, 1]) >= 14


# ---------------------------------------------------------------- local BA
def test_local_ba_noise_free_converges(gt_map, rng):
    m, gt, cam, _ = gt_map(n_frames=12, n_landmarks=150)
    ids = m.keyframe_ids()
    local, fixed = ids[-5:], ids[:3]
    for k in local:
        m.keyframes[k].pose = exp(rng.normal(0, 0.01, 6)) @ m.keyframes[k].pose
    for lm in m.landmarks.values():
        lm.position = lm.position + rng.normal(0, 0.01, 3)
    rep = solve_local_ba(m, local, fixed, cam, SolverConfig())
    assert rep.chi2_final < 1e-16 * len(rep.factors)
    # fixed keyframes anchor the gauge, so no alignment is needed
    for k in local:
        assert np.abs(m.keyframes[k].pose.matrix() - gt[k].matrix()).max() < 1e-9
    assert _kf_ate(m, gt) < 1e-9


def test_local_ba_fixed_keyframes_untouched(gt_map, rng):
    m, gt, cam, _ = gt_map(n_frames=10, n_landmarks=100, pixel_sigma=0.5)
    ids = m.keyframe_ids()
    before = {k: m.keyframes[k].pose.matrix().copy() for k in ids[:4]}
    rep = solve_local_ba(m, ids[4:], ids[:4], cam, SolverConfig())
    for k, M in before.items():
        np.testing.assert_array_equal(m.keyframes[k].pose.matrix(), M)
    roles = {f.role for f in rep.factors if f.keyframe_id in before}
    assert roles == {POSE_UNC}
    assert {f.role for f in rep.factors if f.keyframe_id not in before} == {STANDARD}
    assert set(rep.hessian_blocks) == set(ids[4:])


def test_local_ba_all_fixed_equals_per_landmark_solves(gt_map, rng):
    m, gt, cam, _ = gt_map(n_frames=6, n_landmarks=30, pixel_sigma=0.5)
    for lm in m.landmarks.values():
        lm.position = lm.position + rng.normal(0, 0.02, 3)
    ids = m.keyframe_ids()
    joint = copy.deepcopy(m)
    solve_local_ba(joint, [], ids, cam, SolverConfig(huber_chi2=1e6))
    for lm_id in list(m.landmarks)[:10]:
        single = copy.deepcopy(m)
        for other in list(single.landmarks):
            if other != lm_id:
                single.remove_landmark(other)
        solve_local_ba(single, [], ids, cam, SolverConfig(huber_chi2=1e6))
        np.testing.assert_allclose(single.landmarks[lm_id].position, joint.landmarks[lm_id].position,
                                   atol=1e-9)


def test_local_ba_rejects_overlap_and_tiny_problems(gt_map):
    m, gt, cam, _ = gt_map(n_frames=4, n_landmarks=30)
    ids = m.keyframe_ids()
    with pytest.raises(ValueError):
        solve_local_ba(m, ids[:2], ids[1:3], cam, SolverConfig())
    with pytest.raises(GaugeUnderconstrained):
        solve_local_ba(m, ids[:1], [], cam, SolverConfig())


def test_default_local_window(gt_map):
    m, gt, cam, _ = gt_map(n_frames=9, n_landmarks=40)
    local, fixed = default_local_window(m, 5)
    ids = m.keyframe_ids()
    assert local == ids[-5:]
    assert fixed == ids[:-5]


# ---------------------------------------------------------------- zeroed uncertainty
def _zero_uncertainties(m):
    for lm in m.landmarks.values():
        lm.sigma3 = np.zeros((3, 3))
    for kf in m.keyframes.values():
        kf.sigma6 = np.zeros((6, 6))


def test_zeroed_point_uncertainty_reproduces_classical_tracking(gt_map):
    m, gt, cam, tracks = gt_map(n_frames=12, kf_every=3, pixel_sigma=0.5)
    _zero_uncertainties(m)
    fid, matches = _matches(m, tracks, 7, sigma=0.5)
    guess = exp(np.r_[0.01, 0, 0, 0.01, 0, 0]) @ tracks.gt_pose(7)
    Tw, rw = solve_tracking(m, Keyframe(fid, 0.0, guess), matches, cam, SolverConfig(use_point_unc=True))
    Tc, rc = solve_tracking(m, Keyframe(fid, 0.0, guess), matches, cam, SolverConfig(use_point_unc=False))
    assert np.abs(Tw.matrix() - Tc.matrix()).max() < 1e-10
    assert rw.chi2_history == rc.chi2_history


def test_zeroed_pose_uncertainty_reproduces_classical_local_ba(gt_map, rng):
    m, gt, cam, _ = gt_map(n_frames=10, n_landmarks=100, pixel_sigma=0.5)
    _zero_uncertainties(m)
    _perturb(m, rng)
    ids = m.keyframe_ids()
    weighted, classical = copy.deepcopy(m), copy.deepcopy(m)
    rw = solve_local_ba(weighted, ids[4:], ids[:4], cam, SolverConfig(use_pose_unc=True))
    rc = solve_local_ba(classical, ids[4:], ids[:4], cam, SolverConfig(use_pose_unc=False))
    for fw, fc in zip(rw.factors, rc.factors):
        assert (fw.keyframe_id, fw.landmark_id) == (fc.keyframe_id, fc.landmark_id)
        np.testing.assert_array_equal(fw.info2, fc.info2)
    for k in ids:
        assert np.abs(weighted.keyframes[k].pose.matrix() - classical.keyframes[k].pose.matrix()).max() < 1e-10
    for l in m.landmarks:
        assert np.abs(weighted.landmarks[l].position - classical.landmarks[l].position).max() < 1e-10


def test_pose_uncertainty_widens_fixed_factors(gt_map):
    m, gt, cam, _ = gt_map(n_frames=8, n_landmarks=60, pixel_sigma=0.5)
    ids = m.keyframe_ids()
    for k in ids[:3]:
        m.keyframes[k].sigma6 = 1e-4 * np.eye(6)
    rep = solve_local_ba(m, ids[3:], ids[:3], cam, SolverConfig(use_pose_unc=True))
    base = 1.0 / m.sigma_px ** 2
    for f in rep.factors:
        if f.role == POSE_UNC:
            assert np.linalg.eigvalsh(f.info2).max() < base


# ---------------------------------------------------------------- global BA
def test_global_ba_criterion_scene(gt_map, rng):
    m, gt, cam, _ = gt_map(n_frames=20, n_landmarks=500)
    assert len(m.keyframes) == 20 and len(m.landmarks) == 500
    _perturb(m, rng)
    rep = solve_global_ba(m, cam, SolverConfig(), refresh=False)
    assert _kf_ate(m, gt) < 1e-6
    assert all(b <= a for a, b in zip(rep.chi2_history, rep.chi2_history[1:]))


def test_global_ba_keeps_first_keyframe_and_refreshes(gt_map, rng):
    m, gt, cam, _ = gt_map(n_frames=8, n_landmarks=80, pixel_sigma=0.5)
    _perturb(m, rng)
    first = m.keyframe_ids()[0]
    M0 = m.keyframes[first].pose.matrix().copy()
    solve_global_ba(m, cam, SolverConfig(), refresh=True)
    np.testing.assert_array_equal(m.keyframes[first].pose.matrix(), M0)
    for k in m.keyframe_ids()[1:]:
        S = m.keyframes[k].sigma6
        assert np.trace(S) > 0 and np.allclose(S, S.T, atol=1e-12 * np.abs(S).max())
    assert all(lm.n_obs >= 2 for lm in m.landmarks.values())


def test_gauge_freedom_is_detected(gt_map):
    m, gt, cam, _ = gt_map(n_frames=6, n_landmarks=60)
    free = solve_global_ba(copy.deepcopy(m), cam, SolverConfig(max_iters=1), fix_first=False,
                           refresh=False, check_gauge=True)
    anchored = solve_global_ba(copy.deepcopy(m), cam, SolverConfig(max_iters=1), fix_first=True,
                               refresh=False, check_gauge=True)
    assert free.null_dims == 7
    assert anchored.null_dims == 1  # monocular scale


def test_noise_free_loop_map_recovers_ground_truth(gt_map, rng):
    m, gt, cam, _ = gt_map(n_frames=24, n_landmarks=150, kf_every=2)
    _perturb(m, rng, frac=0.005)
    solve_global_ba(m, cam, SolverConfig(), refresh=False)
    assert _kf_ate(m, gt) < 1e-8
    worst = max(rotation_angle(m.keyframes[k].pose.R @ gt[k].R.T) for k in m.keyframe_ids())
    assert worst < 1e-8
