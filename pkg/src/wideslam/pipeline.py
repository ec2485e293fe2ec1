"""Keyframe SLAM back end driven by a tracks file.

Per frame: track the pose against the local map, append the matched
observations to each point's history and refresh its covariance. Every
``run.kf_every`` frames a keyframe is inserted, new points are triangulated
against recent keyframes, a windowed BA runs and pose covariances are
refreshed. Each keyframe is also checked for loop candidates.
"""
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import camera_from_config, make_config
from .evaluation import Trajectory, evaluate
from .exceptions import InitFailed, InputError, TooFewMatches, TrackingLost
from .init_sfm import InitConfig, RansacConfig, _triangulate_safe, initialize_map
from .loop import LoopConfig, close_loop, propose_candidates, verify_candidate
from .mapstate import Keyframe
from .se3 import Pose
from .sim import TrackSet
from .solver import SolverConfig, default_local_window, solve_local_ba, solve_tracking
from .uncertainty import refresh_point_uncertainties, refresh_pose_uncertainties

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    trajectory: Trajectory
    report: dict
    map: object = None
    timing: dict = field(default_factory=dict)


def solver_config(cfg):
    return SolverConfig(
        max_iters=cfg["ba.max_iters"],
        lambda0=cfg["ba.lambda0"],
        huber_chi2=cfg["ba.huber_chi2"],
        rel_tol=cfg["ba.rel_tol"],
        use_point_unc=cfg["run.use_point_unc"],
        use_pose_unc=cfg["run.use_pose_unc"],
        window=cfg["ba.window"],
    )


def _angle_threshold(cfg, key_rad, key_px, cam):
    px = cfg.get(key_px)
    if px is not None and px > 0:
        return float(px) / cam.median_scale()
    return float(cfg[key_rad])


class _Runner:
    def __init__(self, tracks, cfg, cam):
        self.cfg = cfg
        self.cam = cam
        self.tracks = tracks
        self.scfg = solver_config(cfg)
        self.frames = tracks.frame_observations()
        sig = tracks.obs_sigma
        self.min_sigma = cfg["unc.min_pixel_sigma"]
        self.sigma_px = max(float(np.median(sig)) if sig.size else 1.0, self.min_sigma)
        self.map = None
        self.report = {"frames": [], "keyframes": [], "local_ba": [], "loops": []}
        self.last_kf_frame = None
        self.last_loop_kf = None
        self.prev_poses = []

    # ---------------------------------------------------------------- init
    def initialize(self):
        cfg = self.cfg
        icfg = InitConfig(
            ransac=RansacConfig(
                thresh_rad=_angle_threshold(cfg, "init.ransac_thresh_rad", "init.ransac_thresh_px", self.cam),
                max_iters=cfg["init.ransac_iters"],
                min_inlier_ratio=cfg["init.min_inlier_ratio"]),
            min_parallax_deg=cfg["init.min_parallax_deg"],
            min_landmarks=cfg["init.min_landmarks"],
            sigma_px=self.sigma_px,
            max_history=cfg["unc.max_history"],
            point_prior_frac=cfg["unc.point_prior"],
            seed=cfg["seed"],
        )
        if len(self.frames) < 2:
            raise InitFailed("need at least two frames")
        f0 = self.frames[0]
        last_exc = None
        step = cfg["run.kf_every"]
        for k in range(step, min(cfg["init.max_offset"], len(self.frames) - 1) + 1, step):
            fk = self.frames[k]
            try:
                self.map = initialize_map(f0[:3], fk[:3], self.cam, icfg)
            except InitFailed as exc:
                last_exc = exc
                log.info("init with frames %d/%d failed: %s", f0[0], fk[0], exc)
                continue
            self.report["init"] = {"frames": [f0[0], fk[0]], "landmarks": len(self.map.landmarks)}
            self.last_kf_frame = fk[0]
            return k
        raise InitFailed(f"no frame pair initialised the map ({last_exc})")

    # ---------------------------------------------------------------- tracking
    def local_landmarks(self):
        ids = self.map.keyframe_ids()
        window = ids[-self.cfg["ba.window"]:]
        kfs = set(window)
        for k in window[-1:]:
            kfs.update(k2 for k2, _ in self.map.covisibility(k).most_common(self.cfg["ba.window"]))
        out = {}
        # newer keyframes first so a duplicated track resolves to the newest point
        for k in sorted(kfs, key=ids.index, reverse=True):
            for lm_id in self.map.keyframes[k].observations:
                lm = self.map.landmarks[lm_id]
                out.setdefault(lm.track_id, lm_id)
        return out

    def predict_pose(self, frame_id):
        if len(self.prev_poses) >= 2:
            (_, a), (_, b) = self.prev_poses[-2:]
            return ((b @ a.inverse()) @ b).orthonormalized()
        return self.prev_poses[-1][1]

    def track(self, frame):
        fid, ts, obs, sig = frame
        local = self.local_landmarks()
        tids = [t for t in sorted(obs) if t in local]
        px = np.array([obs[t] for t in tids]).reshape(-1, 2)
        ok = self.cam.valid_pixels(px) if tids else np.zeros(0, bool)
        tids = [t for t, k in zip(tids, ok) if k]
        px = px[ok]
        matches = [(local[t], px[i], max(sig[t], self.min_sigma)) for i, t in enumerate(tids)]
        guess = Keyframe(fid, ts, self.predict_pose(fid))
        try:
            pose, rep = solve_tracking(self.map, guess, matches, self.cam, self.scfg)
        except TooFewMatches as exc:
            raise TrackingLost(f"frame {fid}: {exc}") from exc
        bad = {l for _, l in rep.outliers}
        inliers = [(m[0], t, px[i]) for i, (m, t) in enumerate(zip(matches, tids)) if m[0] not in bad]
        self.report["frames"].append({
            "frame": fid, "matches": len(matches), "inliers": len(inliers),
            "chi2": rep.chi2_final, "iterations": rep.iterations,
        })
        return pose, inliers

    def record(self, fid, ts, pose, inliers, ref_kf):
        self.map.set_frame_pose(fid, ts, pose, ref_kf)
        if inliers:
            B = self.cam.unproject(np.array([p for _, _, p in inliers]))
            for (lm_id, _, p), b in zip(inliers, B):
                self.map.record_history(lm_id, fid, p, b)
            refresh_point_uncertainties(self.map, [l for l, _, _ in inliers])
        self.prev_poses.append((fid, pose))
        self.prev_poses = self.prev_poses[-2:]

    # ---------------------------------------------------------------- keyframes
    def insert_keyframe(self, frame, pose, inliers):
        fid, ts, obs, _ = frame
        kf = self.map.add_keyframe(Keyframe(fid, ts, pose, measurements=dict(obs)))
        B = self.cam.unproject(np.array([p for _, _, p in inliers])) if inliers else []
        for (lm_id, _, p), b in zip(inliers, B):
            self.map.add_observation(kf.id, lm_id, p, b)
        n_new = self.triangulate(kf)
        return kf, n_new

    def triangulate(self, kf):
        """New points from tracks this keyframe shares with recent keyframes but the map lacks."""
        cam = self.cam
        ids = self.map.keyframe_ids()
        window = [k for k in ids[-self.cfg["ba.window"]:] if k != kf.id]
        known = set(self.map.track_index)
        todo = sorted(t for t in kf.measurements if t not in known)
        if not todo or not window:
            return 0
        px_b = np.array([kf.measurements[t] for t in todo])
        okb = cam.valid_pixels(px_b)
        gate = self.cfg["run.triangulate_chi2"] * self.sigma_px ** 2
        min_par = self.cfg["init.min_parallax_deg"]
        n_new = 0
        done = set()
        for other in window:  # oldest first: widest baseline
            ko = self.map.keyframes[other]
            sel = [i for i, t in enumerate(todo) if okb[i] and t in ko.measurements and t not in done]
            if not sel:
                continue
            ts_ = [todo[i] for i in sel]
            pa = np.array([ko.measurements[t] for t in ts_])
            oka = cam.valid_pixels(pa)
            if not np.any(oka):
                continue
            sel = [i for i, k in zip(sel, oka) if k]
            ts_ = [t for t, k in zip(ts_, oka) if k]
            pa = pa[oka]
            pb = px_b[sel]
            ba, bb = cam.unproject(pa), cam.unproject(pb)
            X, s, u, ok, parallax = _triangulate_safe(ko.pose, kf.pose, ba, bb)
            ok &= (s > 0) & (u > 0) & (parallax >= min_par)
            for i in np.flatnonzero(ok):
                qa, qb = ko.pose.act(X[i]), kf.pose.act(X[i])
                if not (cam.in_fov(qa) and cam.in_fov(qb)):
                    continue
                ea = cam.project_unchecked(qa[None])[0] - pa[i]
                eb = cam.project_unchecked(qb[None])[0] - pb[i]
                if ea @ ea > gate or eb @ eb > gate:
                    continue
                lm = self.map.new_landmark(ts_[i], X[i])
                self.map.add_observation(other, lm.id, pa[i], ba[i])
                self.map.add_observation(kf.id, lm.id, pb[i], bb[i])
                done.add(ts_[i])
                n_new += 1
        return n_new

    def local_ba(self, kf):
        local, fixed = default_local_window(self.map, self.cfg["ba.window"])
        rep = solve_local_ba(self.map, local, fixed, self.cam, self.scfg)
        for kf_id, lm_id in rep.outliers:
            self.map.remove_observation(kf_id, lm_id)
        touched = set()
        for k in local:
            touched.update(self.map.keyframes[k].observations)
        for lm_id in sorted(touched):
            lm = self.map.landmarks.get(lm_id)
            if lm is not None and len(lm.observations) < 2:
                self.map.remove_landmark(lm_id)
        refresh_point_uncertainties(self.map, sorted(t for t in touched if t in self.map.landmarks))
        refresh_pose_uncertainties(self.map, local)
        self.report["local_ba"].append({
            "keyframe": kf.id, "local": len(local), "fixed": len(fixed),
            "chi2_history": rep.chi2_history, "iterations": rep.iterations,
            "inliers": rep.n_inliers, "outliers": rep.n_outliers,
        })

    # ---------------------------------------------------------------- loops
    def try_loop(self, kf):
        cfg = self.cfg
        if not cfg["loop.enabled"]:
            return
        lcfg = LoopConfig(
            radius_frac=cfg["loop.radius_frac"],
            min_gap=cfg["loop.min_gap"],
            min_inlier_ratio=cfg["loop.min_inlier_ratio"],
            thresh_rad=_angle_threshold(cfg, "init.ransac_thresh_rad", "loop.thresh_px", self.cam),
            seed=cfg["seed"],
        )
        ids = self.map.keyframe_ids()
        if self.last_loop_kf is not None and ids.index(kf.id) - ids.index(self.last_loop_kf) < lcfg.min_gap:
            return
        for cand in propose_candidates(self.map, kf.id, lcfg):
            try:
                verify_candidate(self.map, cand, self.cam, lcfg)
            except TooFewMatches:
                continue
            entry = {"current": kf.id, "candidate": cand.candidate_kf,
                     "inlier_ratio": cand.inlier_ratio, "verified": cand.verified}
            if cand.verified:
                rep = close_loop(self.map, cand, self.cam, lcfg, self.scfg)
                entry["chi2_final"] = rep.chi2_final
                entry["fused"] = rep.fused
                self.report["loops"].append(entry)
                self.last_loop_kf = kf.id
                return
            self.report["loops"].append(entry)

    # ---------------------------------------------------------------- driver
    def run(self):
        k_init = self.initialize()
        ids = self.map.keyframe_ids()
        kf0 = self.map.keyframes[ids[0]]
        self.prev_poses = [(ids[0], kf0.pose)]
        # frames between the two initial keyframes
        for frame in self.frames[1:k_init]:
            pose, inliers = self.track(frame)
            self.record(frame[0], frame[1], pose, inliers, ids[0])
        self.prev_poses = self.prev_poses[-1:] + [(ids[1], self.map.keyframes[ids[1]].pose)]
        for frame in self.frames[k_init + 1:]:
            pose, inliers = self.track(frame)
            fid = frame[0]
            if fid - self.last_kf_frame >= self.cfg["run.kf_every"]:
                kf, n_new = self.insert_keyframe(frame, pose, inliers)
                self.last_kf_frame = fid
                self.local_ba(kf)
                self.report["keyframes"].append({"keyframe": fid, "new_landmarks": n_new,
                                                 "landmarks": len(self.map.landmarks)})
                self.try_loop(kf)
                self.prev_poses = [self.prev_poses[-1], (fid, kf.pose)]
            else:
                ref = self.map.keyframe_ids()[-1]
                self.record(fid, frame[1], pose, inliers, ref)
        stamps, poses = self.map.trajectory()
        return Trajectory.from_poses(stamps, poses)


def run_pipeline(tracks, cfg=None, cam=None):
    """Run the full back end on a :class:`~wideslam.sim.TrackSet`.

    Returns a :class:`RunResult`; ``report`` holds per-frame and per-BA
    statistics plus, when the tracks carry ground truth, ATE/RPE.
    """
    cfg = make_config(cfg)
    cam = cam or camera_from_config(cfg)
    if not isinstance(tracks, TrackSet):
        raise InputError("run_pipeline expects a TrackSet")
    t0 = time.perf_counter()
    runner = _Runner(tracks, cfg, cam)
    traj = runner.run()
    elapsed = time.perf_counter() - t0
    report = runner.report
    m = runner.map
    report["summary"] = {
        "frames": len(traj),
        "keyframes": len(m.keyframes),
        "landmarks": len(m.landmarks),
        "loops_closed": sum(1 for e in report["loops"] if e.get("verified")),
    }
    if len(tracks.frame_ids):
        gt = Trajectory.from_poses(tracks.timestamps, [p.inverse() for p in tracks.gt_poses()])
        report["eval"] = evaluate(traj, gt, cfg["eval.rpe_delta"], cfg["eval.assoc_tol"])
    return RunResult(traj, report, m, {"pipeline_s": elapsed})


class WideFovSLAM(BaseEstimator):
    """Estimator wrapper: ``fit`` runs the pipeline on a TrackSet.

    Parameters
    ----------
    use_point_unc, use_pose_unc : bool
        Weight observations by point / fixed-pose uncertainty.
    kf_every : int
        Keyframe spacing in frames.
    window : int
        Local BA window size.
    loop : bool
        Enable loop closing.
    seed : int
        RANSAC seed.
    config : dict or None
        Extra flat config overrides.
    """

    def __init__(self, use_point_unc=True, use_pose_unc=True, kf_every=3, window=5,
                 loop=True, seed=0, config=None):
        self.use_point_unc = use_point_unc
        self.use_pose_unc = use_pose_unc
        self.kf_every = kf_every
        self.window = window
        self.loop = loop
        self.seed = seed
        self.config = config

    def _full_config(self):
        over = dict(self.config or {})
        over.update({
            "run.use_point_unc": self.use_point_unc,
            "run.use_pose_unc": self.use_pose_unc,
            "run.kf_every": self.kf_every,
            "ba.window": self.window,
            "loop.enabled": self.loop,
            "seed": self.seed,
        })
        return make_config(over)

    def fit(self, X, y=None):
        if not isinstance(X, TrackSet):
            raise InputError("WideFovSLAM.fit expects a TrackSet")
        if self.kf_every < 1 or self.window < 2:
            raise InputError("kf_every must be >= 1 and window >= 2")
        res = run_pipeline(X, self._full_config())
        self.trajectory_ = res.trajectory
        self.report_ = res.report
        self.map_ = res.map
        return self

    def predict(self, X=None):
        """Estimated camera-in-world trajectory of the fitted sequence."""
        check_is_fitted(self, "trajectory_")
        return self.trajectory_

    def score(self, X, y=None):
        """Negative ATE RMS against the ground truth carried by ``X``."""
        check_is_fitted(self, "trajectory_")
        gt = Trajectory.from_poses(X.timestamps, [p.inverse() for p in X.gt_poses()])
        return -evaluate(self.trajectory_, gt)["ate"]
