"""Deterministic synthetic worlds and the line-oriented tracks file.

Every noise category draws from its own generator, seeded by
``SeedSequence([seed, stream])``, so changing the pixel noise leaves the
geometry untouched and ablation arms see identical data.
"""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import CameraModel, pal_camera
from .exceptions import ConfigError, EmptyVisibility, ParseError
from .mapstate import Keyframe, MapState
from .se3 import Pose, exp

log = logging.getLogger(__name__)

STREAMS = {
    "landmarks": 0,
    "trajectory": 1,
    "pixel_noise": 2,
    "jitter": 3,
    "outliers": 4,
    "dropout": 5,
}

TRAJECTORIES = ("circle", "lissajous", "random_walk")


def stream(seed, name):
    """Independent PCG64 generator for one noise category."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), STREAMS[name]])))


@dataclass
class Scenario:
    """Synthetic world description. Lengths are in units of ``scene_scale``.

    ``jitter_frac`` of the landmarks are observed with a fresh world-frame
    displacement of standard deviation ``jitter_sigma * scene_scale`` per
    observation; the rest are observed exactly (plus pixel noise).
    """

    trajectory: str = "circle"
    n_frames: int = 60
    laps: float = 1.0
    dt: float = 0.05
    scene_scale: float = 1.0
    wobble_deg: float = 3.0
    n_landmarks: int = 300
    shell: tuple = (2.5, 4.5)
    elevation_band_deg: tuple = (-25.0, 40.0)
    pixel_sigma: float = 0.5
    jitter_frac: float = 0.3
    jitter_sigma: float = 0.02
    outlier_rate: float = 0.0
    dropout_rate: float = 0.0
    seed: int = 0
    camera: dict = field(default_factory=lambda: pal_camera().to_dict())

    def __post_init__(self):
        if self.trajectory not in TRAJECTORIES:
            raise ConfigError(f"unknown trajectory kind {self.trajectory!r}")
        for name in ("jitter_frac", "outlier_rate", "dropout_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        for name in ("pixel_sigma", "jitter_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.n_frames < 2 or self.n_landmarks < 1:
            raise ConfigError("need at least 2 frames and 1 landmark")
        if self.scene_scale <= 0 or self.dt <= 0:
            raise ConfigError("scene_scale and dt must be positive")
        self.shell = tuple(float(v) for v in self.shell)
        self.elevation_band_deg = tuple(float(v) for v in self.elevation_band_deg)
        if not 0 < self.shell[0] <= self.shell[1]:
            raise ConfigError("shell radii must satisfy 0 < r_min <= r_max")

    def camera_model(self):
        return CameraModel.from_dict(self.camera)

    def to_dict(self):
        d = asdict(self)
        d["shell"] = list(self.shell)
        d["elevation_band_deg"] = list(self.elevation_band_deg)
        return d


@dataclass(eq=False)
class TrackSet:
    """Ground truth plus observations.

    Poses are kept camera-in-world (TUM order) so the text round trip is exact.
    """

    frame_ids: np.ndarray
    timestamps: np.ndarray
    positions: np.ndarray        # (F, 3) camera centre in world
    quaternions: np.ndarray      # (F, 4) x, y, z, w camera-to-world
    landmarks: np.ndarray        # (L, 3)
    obs_frame: np.ndarray        # (M,)
    obs_landmark: np.ndarray     # (M,)
    obs_uv: np.ndarray           # (M, 2)
    obs_sigma: np.ndarray        # (M,)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, int), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)),
                   np.zeros((0, 3)), np.zeros(0, int), np.zeros(0, int), np.zeros((0, 2)), np.zeros(0))

    @property
    def n_obs(self):
        return int(self.obs_frame.size)

    def gt_pose(self, i):
        """World-to-camera pose of the ``i``-th frame."""
        return Pose.from_quaternion(self.quaternions[i], self.positions[i]).inverse()

    def gt_poses(self):
        return [self.gt_pose(i) for i in range(self.frame_ids.size)]

    def frame_observations(self):
        """List of ``(frame_id, timestamp, {landmark_id: pixel}, {landmark_id: sigma})``."""
        order = np.lexsort((self.obs_landmark, self.obs_frame))
        out = {int(f): ({}, {}) for f in self.frame_ids}
        for m in order:
            f = int(self.obs_frame[m])
            l = int(self.obs_landmark[m])
            out[f][0][l] = self.obs_uv[m]
            out[f][1][l] = float(self.obs_sigma[m])
        return [(int(f), float(ts), out[int(f)][0], out[int(f)][1])
                for f, ts in zip(self.frame_ids, self.timestamps)]

    def equals(self, other):
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in self.__dataclass_fields__)


# --------------------------------------------------------------- geometry
def _heading_rotation(yaw, roll, pitch):
    """Camera-to-world rotation: camera z up, camera x along the heading."""
    return Rotation.from_euler("zyx", np.stack([yaw, pitch, roll], axis=-1)).as_matrix()


def trajectory_poses(scn, rng=None):
    """Camera-in-world ``(positions, rotations)`` for ``scn``; lengths scaled."""
    n = scn.n_frames
    s = scn.scene_scale
    u = np.arange(n) / n
    phase = 2 * np.pi * scn.laps * u
    wob = np.radians(scn.wobble_deg)
    roll = wob * np.sin(3 * phase)
    pitch = wob * np.cos(2 * phase)
    if scn.trajectory == "circle":
        pos = np.stack([np.cos(phase), np.sin(phase), 0.05 * np.sin(2 * phase)], axis=1)
        yaw = phase + np.pi / 2
    elif scn.trajectory == "lissajous":
        pos = np.stack([np.sin(phase), 0.6 * np.sin(2 * phase), 0.05 * np.sin(3 * phase)], axis=1)
        vel = np.stack([np.cos(phase), 1.2 * np.cos(2 * phase)], axis=1)
        yaw = np.arctan2(vel[:, 1], vel[:, 0])
    else:
        rng = rng if rng is not None else stream(scn.seed, "trajectory")
        steps = rng.normal(size=(n, 2)) * 0.05
        vel = np.cumsum(steps, axis=0)
        vel = 0.04 * vel / np.maximum(np.linalg.norm(vel, axis=1, keepdims=True), 1e-9) + steps * 0.2
        xy = np.cumsum(vel, axis=0)
        xy -= xy.mean(axis=0)
        ext = np.max(np.abs(xy))
        if ext > 1.0:
            xy /= ext
        pos = np.column_stack([xy, np.zeros(n)])
        d = np.gradient(xy, axis=0)
        yaw = np.arctan2(d[:, 1], d[:, 0])
    return pos * s, _heading_rotation(yaw, roll, pitch)


def sample_landmarks(scn, rng):
    """Points in a spherical shell around the origin within an elevation band."""
    n = scn.n_landmarks
    lo, hi = np.radians(scn.elevation_band_deg)
    az = rng.uniform(-np.pi, np.pi, n)
    el = np.arcsin(rng.uniform(np.sin(lo), np.sin(hi), n))
    r = rng.uniform(*scn.shell, n) * scn.scene_scale
    return np.column_stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)])


def visibility(cam, poses, landmarks):
    """Boolean ``(F, L)`` mask of in-FoV, in-image (frame, landmark) pairs."""
    vis = np.zeros((len(poses), landmarks.shape[0]), dtype=bool)
    for i, T in enumerate(poses):
        q = T.act(landmarks)
        ok = cam.in_fov(q)
        if np.any(ok):
            ok[ok] = cam.in_image(cam.project_unchecked(q[ok]))
        vis[i] = ok
    return vis


def _random_valid_pixels(cam, rng, n):
    out = np.empty((0, 2))
    w, h = cam.image_size
    while out.shape[0] < n:
        px = rng.uniform((0, 0), (w, h), size=(max(4 * (n - out.shape[0]), 16), 2))
        out = np.vstack([out, px[cam.valid_pixels(px)]])
    return out[:n]


def generate(scn):
    """Sample a :class:`TrackSet` for ``scn``; byte-identical for identical input."""
    cam = scn.camera_model()
    pos, Rwc = trajectory_poses(scn)
    quats = Rotation.from_matrix(Rwc).as_quat()
    quats[quats[:, 3] < 0] *= -1
    poses = [Pose.from_quaternion(q, c).inverse() for q, c in zip(quats, pos)]
    lms = sample_landmarks(scn, stream(scn.seed, "landmarks"))
    n_lm = lms.shape[0]

    rng_j = stream(scn.seed, "jitter")
    jittered = np.zeros(n_lm, dtype=bool)
    jittered[rng_j.permutation(n_lm)[: int(round(scn.jitter_frac * n_lm))]] = True

    vis = visibility(cam, poses, lms)
    empty = np.flatnonzero(~vis.any(axis=1))
    if empty.size:
        raise EmptyVisibility(f"frame {int(empty[0])} sees no landmark")

    rng_px = stream(scn.seed, "pixel_noise")
    rng_out = stream(scn.seed, "outliers")
    rng_drop = stream(scn.seed, "dropout")
    frames, lids, uvs = [], [], []
    jsig = scn.jitter_sigma * scn.scene_scale
    for i, T in enumerate(poses):
        ids = np.flatnonzero(vis[i])
        P = lms[ids].copy()
        jit = jittered[ids]
        # draws happen for every visible pair so streams stay aligned across knobs
        disp = rng_j.normal(size=(ids.size, 3)) * jsig
        P[jit] += disp[jit]
        q = T.act(P)
        ok = cam.in_fov(q)
        uv = np.zeros((ids.size, 2))
        uv[ok] = cam.project_unchecked(q[ok])
        ok &= cam.in_image(uv)
        uv += rng_px.normal(size=uv.shape) * scn.pixel_sigma
        ok &= cam.valid_pixels(uv)
        drop = rng_drop.random(ids.size) < scn.dropout_rate
        is_out = rng_out.random(ids.size) < scn.outlier_rate
        repl = _random_valid_pixels(cam, rng_out, int(is_out.sum()))
        uv[is_out] = repl
        keep = (ok | is_out) & ~drop
        frames.append(np.full(int(keep.sum()), i))
        lids.append(ids[keep])
        uvs.append(uv[keep])
    obs_f = np.concatenate(frames).astype(int)
    return TrackSet(
        frame_ids=np.arange(scn.n_frames),
        timestamps=np.arange(scn.n_frames) * scn.dt,
        positions=pos,
        quaternions=quats,
        landmarks=lms,
        obs_frame=obs_f,
        obs_landmark=np.concatenate(lids).astype(int),
        obs_uv=np.vstack(uvs).reshape(-1, 2),
        obs_sigma=np.full(obs_f.size, float(scn.pixel_sigma)),
    )


# --------------------------------------------------------------- drifting maps
def drifting_loop_map(tracks, cam, lap_frames, kf_every=3, drift_deg=3.0, drift_frac=0.05,
                      axis=(0.3, 0.2, 1.0), point_prior_frac=0.05, sigma_px=1.0):
    """Keyframe map of a revisiting sequence with accumulated drift and no loop closed.

    Keyframe ``j`` of ``K`` carries a world-frame drift ``D_j = exp(j/(K-1) xi)``
    whose final value rotates by ``drift_deg`` about ``axis`` and shifts by
    ``drift_frac`` of the RMS path radius. Observations are split by visit
    (``frame // lap_frames``): a track seen on two visits gets one landmark per
    visit, placed with the drift of its median observer, so the two visits
    share track ids but no landmarks.

    Returns
    -------
    (MapState, gt_keyframe_poses)
        ``gt_keyframe_poses`` maps keyframe id to its world-to-camera pose.
    """
    fids = np.asarray(tracks.frame_ids)
    kf_idx = np.arange(0, len(fids), kf_every)
    K = len(kf_idx)
    if K < 2:
        raise ValueError("need at least two keyframes")
    gt = tracks.gt_poses()
    radius = float(np.sqrt(np.mean(np.sum((tracks.positions - tracks.positions.mean(0)) ** 2, axis=1))))
    ax = np.asarray(axis, dtype=float)
    ax /= np.linalg.norm(ax)
    xi = np.r_[np.radians(drift_deg) * ax, drift_frac * radius * np.array([1.0, -1.0, 0.5]) / 1.5]
    drift = [exp(j / (K - 1) * xi) for j in range(K)]

    m = MapState(sigma_px=sigma_px, point_prior_sigma=point_prior_frac * radius)
    gt_kf = {}
    for j, i in enumerate(kf_idx):
        fid = int(fids[i])
        m.add_keyframe(Keyframe(fid, float(tracks.timestamps[i]), gt[i] @ drift[j].inverse()))
        gt_kf[fid] = gt[i]
    j_of = {int(i): j for j, i in enumerate(kf_idx)}
    sel = np.isin(tracks.obs_frame, kf_idx)
    # observers per (track, visit)
    groups = {}
    for f, t, uv in zip(tracks.obs_frame[sel], tracks.obs_landmark[sel], tracks.obs_uv[sel]):
        groups.setdefault((int(t), int(f) // lap_frames), []).append((int(f), uv))
    for (t, _), obs in sorted(groups.items()):
        obs.sort(key=lambda o: o[0])
        for f, uv in obs:
            m.keyframes[int(fids[f])].measurements[t] = uv
        if len(obs) < 2:
            continue
        j_med = j_of[obs[len(obs) // 2][0]]
        lm = m.new_landmark(t, drift[j_med].act(tracks.landmarks[t]))
        for f, uv in obs:
            m.add_observation(int(fids[f]), lm.id, uv, cam.unproject(uv))
    return m, gt_kf


# --------------------------------------------------------------- file I/O
def _g(x):
    return "%.17g" % x


def format_tracks(ts, header=None):
    lines = ["# wideslam tracks v1"]
    if header:
        lines += ["# " + h for h in header]
    for k, f in enumerate(ts.frame_ids):
        lines.append(f"KF {int(f)} {_g(ts.timestamps[k])}")
    for k, f in enumerate(ts.frame_ids):
        vals = " ".join(_g(v) for v in np.r_[ts.positions[k], ts.quaternions[k]])
        lines.append(f"GTPOSE {int(f)} {vals}")
    for l, p in enumerate(ts.landmarks):
        lines.append(f"LM {l} {_g(p[0])} {_g(p[1])} {_g(p[2])}")
    for m in range(ts.n_obs):
        u, v = ts.obs_uv[m]
        lines.append(f"OBS {int(ts.obs_frame[m])} {int(ts.obs_landmark[m])} {_g(u)} {_g(v)} {_g(ts.obs_sigma[m])}")
    return "\n".join(lines) + "\n"


def write_tracks(ts, path, header=None):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(format_tracks(ts, header))


_ARITY = {"KF": 2, "GTPOSE": 8, "LM": 4, "OBS": 5}


def parse_tracks(text):
    kfs, gts, lms, obs = {}, {}, {}, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        tag = tok[0]
        if tag not in _ARITY:
            raise ParseError(f"unknown record {tag!r}", lineno)
        if len(tok) - 1 != _ARITY[tag]:
            raise ParseError(f"{tag} expects {_ARITY[tag]} fields, got {len(tok) - 1}", lineno)
        try:
            if tag == "KF":
                kfs[int(tok[1])] = float(tok[2])
            elif tag == "GTPOSE":
                gts[int(tok[1])] = np.array([float(v) for v in tok[2:]])
            elif tag == "LM":
                lms[int(tok[1])] = np.array([float(v) for v in tok[2:]])
            else:
                obs.append((int(tok[1]), int(tok[2]), float(tok[3]), float(tok[4]), float(tok[5]), lineno))
        except ValueError as exc:
            raise ParseError(f"bad number in {tag} record: {exc}", lineno) from exc
    fids = sorted(kfs)
    for f in gts:
        if f not in kfs:
            raise ParseError(f"GTPOSE for unknown frame {f}")
    for f, l, *_, lineno in obs:
        if f not in kfs:
            raise ParseError(f"observation of unknown frame {f}", lineno)
    if lms and sorted(lms) != list(range(len(lms))):
        raise ParseError("landmark ids must be dense from 0")
    gt = np.array([gts.get(f, np.r_[np.zeros(3), 0, 0, 0, 1.0]) for f in fids]).reshape(-1, 7)
    return TrackSet(
        frame_ids=np.array(fids, dtype=int),
        timestamps=np.array([kfs[f] for f in fids], dtype=float),
        positions=gt[:, :3],
        quaternions=gt[:, 3:],
        landmarks=np.array([lms[i] for i in range(len(lms))]).reshape(-1, 3),
        obs_frame=np.array([o[0] for o in obs], dtype=int),
        obs_landmark=np.array([o[1] for o in obs], dtype=int),
        obs_uv=np.array([o[2:4] for o in obs], dtype=float).reshape(-1, 2),
        obs_sigma=np.array([o[4] for o in obs], dtype=float),
    )


def read_tracks(path):
    with open(path, encoding="ascii") as fh:
        return parse_tracks(fh.read())
