"""Mutable estimation state: keyframes, landmarks, observations."""
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .se3 import Pose


@dataclass(eq=False)
class Keyframe:
    """A frame whose pose takes part in bundle adjustment.

    ``observations`` holds the associations used by the optimiser
    (landmark id -> pixel). ``measurements`` keeps everything the frame saw,
    keyed by track id, so later keyframes can triangulate new points and the
    loop verifier can build 2D-2D matches.
    """

    id: int
    timestamp: float
    pose: Pose
    observations: dict = field(default_factory=dict)
    measurements: dict = field(default_factory=dict)
    sigma6: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))
    hessian: np.ndarray = None
    role: str = "idle"


@dataclass(eq=False)
class Landmark:
    id: int
    track_id: int
    position: np.ndarray
    observations: dict = field(default_factory=dict)
    # (frame_id, pixel, bearing), oldest first
    history: list = field(default_factory=list)
    sigma3: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    n_obs: int = 0
    residuals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))


@dataclass(eq=False)
class FrameRecord:
    """Any tracked frame; its pose is stored relative to a reference keyframe."""

    id: int
    timestamp: float
    ref_kf: int
    rel: Pose


class MapState:
    def __init__(self, max_history=20, point_prior_sigma=0.0, sigma_px=1.0):
        self.keyframes = {}
        self.landmarks = {}
        self.frames = {}
        self.track_index = {}
        self.max_history = int(max_history)
        self.point_prior_sigma = float(point_prior_sigma)
        self.sigma_px = float(sigma_px)
        self._next_landmark = 0

    # ----------------------------------------------------------- keyframes
    def add_keyframe(self, kf):
        self.keyframes[kf.id] = kf
        self.frames[kf.id] = FrameRecord(kf.id, kf.timestamp, kf.id, Pose.identity())
        return kf

    def keyframe_ids(self):
        return list(self.keyframes)

    def frame_pose(self, frame_id):
        rec = self.frames[frame_id]
        if rec.ref_kf == frame_id and frame_id in self.keyframes:
            return self.keyframes[frame_id].pose
        return rec.rel @ self.keyframes[rec.ref_kf].pose

    def set_frame_pose(self, frame_id, timestamp, pose, ref_kf):
        ref = self.keyframes[ref_kf].pose
        self.frames[frame_id] = FrameRecord(frame_id, timestamp, ref_kf, pose @ ref.inverse())

    # ----------------------------------------------------------- landmarks
    def new_landmark(self, track_id, position):
        lm = Landmark(self._next_landmark, int(track_id), np.array(position, dtype=float))
        self._next_landmark += 1
        self.landmarks[lm.id] = lm
        self.track_index.setdefault(lm.track_id, []).append(lm.id)
        return lm

    def add_observation(self, kf_id, lm_id, pixel, bearing):
        pixel = np.asarray(pixel, dtype=float)
        self.keyframes[kf_id].observations[lm_id] = pixel
        lm = self.landmarks[lm_id]
        lm.observations[kf_id] = pixel
        self.record_history(lm_id, kf_id, pixel, bearing)

    def record_history(self, lm_id, frame_id, pixel, bearing):
        lm = self.landmarks[lm_id]
        lm.history = [h for h in lm.history if h[0] != frame_id]
        lm.history.append((frame_id, np.asarray(pixel, dtype=float), np.asarray(bearing, dtype=float)))
        lm.history.sort(key=lambda h: h[0])
        if len(lm.history) > self.max_history:
            lm.history = lm.history[-self.max_history:]

    def remove_observation(self, kf_id, lm_id):
        self.keyframes[kf_id].observations.pop(lm_id, None)
        lm = self.landmarks.get(lm_id)
        if lm is not None:
            lm.observations.pop(kf_id, None)
            lm.history = [h for h in lm.history if h[0] != kf_id]

    def remove_landmark(self, lm_id):
        lm = self.landmarks.pop(lm_id)
        for kf_id in lm.observations:
            self.keyframes[kf_id].observations.pop(lm_id, None)
        ids = self.track_index.get(lm.track_id, [])
        if lm_id in ids:
            ids.remove(lm_id)
        if not ids:
            self.track_index.pop(lm.track_id, None)

    def merge_landmarks(self, keep_id, drop_id):
        """Fold ``drop_id`` into ``keep_id``; histories are concatenated and capped."""
        keep = self.landmarks[keep_id]
        drop = self.landmarks[drop_id]
        for kf_id, px in list(drop.observations.items()):
            if kf_id not in keep.observations:
                self.keyframes[kf_id].observations[keep_id] = px
                keep.observations[kf_id] = px
        seen = {h[0] for h in keep.history}
        merged = keep.history + [h for h in drop.history if h[0] not in seen]
        merged.sort(key=lambda h: h[0])
        keep.history = merged[-self.max_history:]
        self.remove_landmark(drop_id)

    def covisibility(self, kf_id):
        """Counter of keyframe id -> number of shared landmarks."""
        counts = Counter()
        for lm_id in self.keyframes[kf_id].observations:
            for other in self.landmarks[lm_id].observations:
                if other != kf_id:
                    counts[other] += 1
        return counts

    def scene_extent(self):
        """RMS distance of keyframe centres from their centroid."""
        centers = np.array([kf.pose.center for kf in self.keyframes.values()])
        if len(centers) < 2:
            return 0.0
        return float(np.sqrt(np.mean(np.sum((centers - centers.mean(0)) ** 2, axis=1))))

    def median_depth(self):
        depths = []
        for kf in self.keyframes.values():
            if kf.observations:
                P = np.array([self.landmarks[i].position for i in kf.observations])
                depths.append(np.linalg.norm(kf.pose.act(P), axis=1))
        if not depths:
            return 0.0
        return float(np.median(np.concatenate(depths)))

    # ----------------------------------------------------------- output
    def trajectory(self):
        """(timestamps, camera-in-world poses) for every tracked frame."""
        ids = sorted(self.frames, key=lambda i: self.frames[i].timestamp)
        stamps = np.array([self.frames[i].timestamp for i in ids])
        poses = [self.frame_pose(i).inverse() for i in ids]
        return stamps, poses

    def keyframe_trajectory(self):
        ids = sorted(self.keyframes, key=lambda i: self.keyframes[i].timestamp)
        stamps = np.array([self.keyframes[i].timestamp for i in ids])
        return stamps, [self.keyframes[i].pose.inverse() for i in ids]
