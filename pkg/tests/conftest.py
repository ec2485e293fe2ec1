import numpy as np
import pytest

from wideslam.camera import fisheye_camera, pal_camera


@pytest.fixture(params=["taylor", "kb"])
def cam(request):
    return pal_camera() if request.param == "taylor" else fisheye_camera()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def build_gt_map(n_frames=20, n_landmarks=200, pixel_sigma=0.0, seed=0, kf_every=1, **scn):
    """Map whose keyframes and landmarks sit exactly at ground truth."""
    from wideslam.sim import Scenario, drifting_loop_map, generate

    s = Scenario(n_frames=n_frames, n_landmarks=n_landmarks, pixel_sigma=pixel_sigma,
                 jitter_frac=scn.pop("jitter_frac", 0.0), seed=seed, **scn)
    tracks = generate(s)
    cam = s.camera_model()
    m, gt = drifting_loop_map(tracks, cam, lap_frames=10 ** 6, kf_every=kf_every,
                              drift_deg=0.0, drift_frac=0.0)
    return m, gt, cam, tracks


@pytest.fixture
def gt_map():
    return build_gt_map


def keyframe_ate(m, gt):
    """ATE of the keyframe poses of ``m`` against ``gt`` (keyframe id -> world-to-camera)."""
    from wideslam.evaluation import Trajectory, ate_rmse

    ids = sorted(m.keyframes)
    ts = [m.keyframes[k].timestamp for k in ids]
    est = Trajectory.from_poses(ts, [m.keyframes[k].pose.inverse() for k in ids])
    ref = Trajectory.from_poses(ts, [gt[k].inverse() for k in ids])
    return ate_rmse(est, ref)


def drifting_loop(seed=0, drift_deg=3.0, drift_frac=0.05, pixel_sigma=0.5, jitter_frac=0.3):
    """A 1.25-lap circle with accumulated drift and an open loop."""
    from wideslam.sim import Scenario, drifting_loop_map, generate
    from wideslam.uncertainty import refresh_all_uncertainties

    s = Scenario(n_frames=80, laps=1.25, seed=seed, pixel_sigma=pixel_sigma, jitter_frac=jitter_frac)
    tracks = generate(s)
    cam = s.camera_model()
    m, gt = drifting_loop_map(tracks, cam, lap_frames=64, drift_deg=drift_deg, drift_frac=drift_frac)
    refresh_all_uncertainties(m)
    return m, gt, cam
