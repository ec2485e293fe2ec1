"""Trajectory metrics: Sim(3) alignment, ATE and RPE, TUM file I/O."""
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DegenerateGeometry, InputError, NoAssociations, ParseError, TooShort
from .se3 import rotation_angle

ASSOC_TOL = 0.01


@dataclass(eq=False)
class Trajectory:
    """Timestamped camera-in-world poses.

    Attributes
    ----------
    timestamps : (N,) strictly increasing
    positions : (N, 3) camera centres
    rotations : (N, 3, 3) camera-to-world rotations
    """

    timestamps: np.ndarray
    positions: np.ndarray
    rotations: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(-1, 3, 3)
        n = self.timestamps.size
        if self.positions.shape[0] != n or self.rotations.shape[0] != n:
            raise InputError("trajectory arrays have mismatched lengths")
        if n > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise InputError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return self.timestamps.size

    @classmethod
    def from_poses(cls, timestamps, poses):
        """From camera-in-world :class:`~wideslam.se3.Pose` objects."""
        return cls(timestamps, np.array([p.t for p in poses]).reshape(-1, 3),
                   np.array([p.R for p in poses]).reshape(-1, 3, 3))

    @classmethod
    def from_tum_array(cls, arr):
        arr = np.asarray(arr, dtype=float).reshape(-1, 8)
        q = arr[:, 4:8]
        R = Rotation.from_quat(q).as_matrix() if len(arr) else np.zeros((0, 3, 3))
        return cls(arr[:, 0], arr[:, 1:4], R)

    def quaternions(self):
        if not len(self):
            return np.zeros((0, 4))
        q = Rotation.from_matrix(self.rotations).as_quat()
        q[q[:, 3] < 0] *= -1
        return q

    def subset(self, idx):
        return Trajectory(self.timestamps[idx], self.positions[idx], self.rotations[idx])

    def arc_length(self):
        if len(self) < 2:
            return np.zeros(len(self))
        return np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1))]


@dataclass(frozen=True, eq=False)
class Sim3:
    """``x -> s R x + t``."""

    s: float
    R: np.ndarray
    t: np.ndarray

    @classmethod
    def identity(cls):
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply_points(self, P):
        return self.s * np.asarray(P, dtype=float) @ self.R.T + self.t

    def apply(self, traj):
        """Map a camera-in-world trajectory through the similarity."""
        return Trajectory(traj.timestamps, self.apply_points(traj.positions), self.R @ traj.rotations)

    def inverse(self):
        Ri = self.R.T
        return Sim3(1.0 / self.s, Ri, -Ri @ self.t / self.s)

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.s * self.R
        M[:3, 3] = self.t
        return M


def umeyama(src, dst, with_scale=True):
    """Least-squares similarity taking ``src`` onto ``dst`` (both ``(N, 3)``).

    Raises
    ------
    DegenerateGeometry
        Fewer than three points, or points (nearly) collinear.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    n = src.shape[0]
    if n < 3:
        raise DegenerateGeometry("alignment needs at least 3 positions")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = np.sum(xs * xs) / n
    C = xd.T @ xs / n
    U, d, Vt = np.linalg.svd(C)
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] <= 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateGeometry("positions are collinear")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(d) @ S) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return Sim3(s, R, t)


def associate(est, gt, tol=ASSOC_TOL):
    """Index pairs ``(i_est, i_gt)`` with nearest timestamps within ``tol`` seconds."""
    if not len(est) or not len(gt):
        raise NoAssociations("empty trajectory")
    j = np.searchsorted(gt.timestamps, est.timestamps)
    lo = np.clip(j - 1, 0, len(gt) - 1)
    hi = np.clip(j, 0, len(gt) - 1)
    pick = np.where(np.abs(gt.timestamps[lo] - est.timestamps) <= np.abs(gt.timestamps[hi] - est.timestamps), lo, hi)
    ok = np.abs(gt.timestamps[pick] - est.timestamps) <= tol
    i_est = np.flatnonzero(ok)
    i_gt = pick[ok]
    # keep a one-to-one matching: first estimate wins
    _, first = np.unique(i_gt, return_index=True)
    first.sort()
    if first.size == 0:
        raise NoAssociations(f"no timestamps match within {tol} s")
    return i_est[first], i_gt[first]


def align_sim3(est, gt, tol=ASSOC_TOL, with_scale=True):
    i, j = associate(est, gt, tol)
    return umeyama(est.positions[i], gt.positions[j], with_scale=with_scale)


def ate_errors(est, gt, tol=ASSOC_TOL, with_scale=True):
    """Per-pose position errors after Sim(3) alignment."""
    i, j = associate(est, gt, tol)
    S = umeyama(est.positions[i], gt.positions[j], with_scale=with_scale)
    return np.linalg.norm(S.apply_points(est.positions[i]) - gt.positions[j], axis=1)


def ate_rmse(est, gt, tol=ASSOC_TOL):
    e = ate_errors(est, gt, tol)
    return float(np.sqrt(np.mean(e * e)))


def error_stats(e):
    """RMS, mean, median, min, max of a set of errors."""
    e = np.asarray(e, dtype=float)
    return {
        "rms": float(np.sqrt(np.mean(e * e))),
        "mean": float(np.mean(e)),
        "median": float(np.median(e)),
        "min": float(np.min(e)),
        "max": float(np.max(e)),
    }


def _relative(Ra, pa, Rb, pb):
    return Ra.T @ Rb, Ra.T @ (pb - pa)


def rpe(est, gt, delta_m=1.0, tol=ASSOC_TOL):
    """Relative pose error over pose pairs about ``delta_m`` apart along the gt path.

    For every start pose the partner is the first pose whose ground-truth arc
    length is at least ``delta_m`` further; errors are normalised by the
    actual ground-truth arc length of the pair.

    Returns
    -------
    (rpet_percent, rper_deg_per_m)
        RMS translational drift in percent and RMS rotational drift in
        degrees per metre. ``est`` should already carry the right scale.
    """
    i, j = associate(est, gt, tol)
    e, g = est.subset(i), gt.subset(j)
    s = g.arc_length()
    if s.size < 2 or s[-1] < delta_m:
        raise TooShort(f"trajectory length {s[-1] if s.size else 0.0:.3f} m < {delta_m} m")
    starts = np.arange(s.size)
    ends = np.searchsorted(s, s + delta_m - 1e-12 * max(delta_m, 1.0))
    ok = ends < s.size
    t_err, r_err = [], []
    for a, b in zip(starts[ok], ends[ok]):
        Rg, tg = _relative(g.rotations[a], g.positions[a], g.rotations[b], g.positions[b])
        Re, te = _relative(e.rotations[a], e.positions[a], e.rotations[b], e.positions[b])
        dR = Rg.T @ Re
        dt = Rg.T @ (te - tg)
        L = s[b] - s[a]
        t_err.append(np.linalg.norm(dt) / L * 100.0)
        r_err.append(np.degrees(rotation_angle(dR)) / L)
    t_err, r_err = np.array(t_err), np.array(r_err)
    return float(np.sqrt(np.mean(t_err ** 2))), float(np.sqrt(np.mean(r_err ** 2)))


def evaluate(est, gt, delta_m=1.0, tol=ASSOC_TOL):
    """ATE RMS plus RPE after scaling the estimate onto the ground truth."""
    S = align_sim3(est, gt, tol)
    aligned = S.apply(est)
    ate = ate_rmse(est, gt, tol)
    try:
        rpet, rper = rpe(aligned, gt, delta_m, tol)
    except TooShort:
        rpet, rper = float("nan"), float("nan")
    return {"ate": ate, "rpet": rpet, "rper": rper, "scale": S.s}


# --------------------------------------------------------------- TUM I/O
def format_tum(traj):
    q = traj.quaternions()
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for k in range(len(traj)):
        vals = np.r_[traj.timestamps[k], traj.positions[k], q[k]]
        lines.append(" ".join("%.17g" % v for v in vals))
    return "\n".join(lines) + "\n"


def write_tum(traj, path):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(format_tum(traj))


def parse_tum(text):
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.replace(",", " ").split()
        if len(tok) != 8:
            raise ParseError(f"expected 8 fields, got {len(tok)}", lineno)
        try:
            rows.append([float(v) for v in tok])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from exc
    arr = np.array(rows).reshape(-1, 8)
    if arr.shape[0] > 1 and np.any(np.diff(arr[:, 0]) <= 0):
        raise ParseError("timestamps must be strictly increasing")
    return Trajectory.from_tum_array(arr)


def read_tum(path):
    with open(path, encoding="ascii") as fh:
        return parse_tum(fh.read())


# --------------------------------------------------------------- estimator
class Sim3Aligner(BaseEstimator, TransformerMixin):
    """Fit a similarity from an estimated trajectory onto ground truth.

    Parameters
    ----------
    assoc_tol : float
        Timestamp association tolerance in seconds.
    with_scale : bool
        Estimate scale (monocular) or only a rigid transform.
    """

    def __init__(self, assoc_tol=ASSOC_TOL, with_scale=True):
        self.assoc_tol = assoc_tol
        self.with_scale = with_scale

    def fit(self, X, y):
        if not isinstance(X, Trajectory) or not isinstance(y, Trajectory):
            raise InputError("Sim3Aligner expects Trajectory inputs")
        self.sim3_ = umeyama(*_paired_positions(X, y, self.assoc_tol), with_scale=self.with_scale)
        return self

    def transform(self, X):
        check_is_fitted(self, "sim3_")
        if isinstance(X, Trajectory):
            return self.sim3_.apply(X)
        return self.sim3_.apply_points(np.asarray(X, dtype=float).reshape(-1, 3))

    def score(self, X, y):
        """Negative ATE RMS of ``X`` against ``y`` under the fitted transform."""
        check_is_fitted(self, "sim3_")
        i, j = associate(X, y, self.assoc_tol)
        e = np.linalg.norm(self.sim3_.apply_points(X.positions[i]) - y.positions[j], axis=1)
        return -float(np.sqrt(np.mean(e * e)))


def _paired_positions(est, gt, tol):
    i, j = associate(est, gt, tol)
    return est.positions[i], gt.positions[j]
