"""Flat dotted-key run configuration.

Files are JSON, either flat (``{"ba.window": 5}``) or nested
(``{"ba": {"window": 5}}``). ``--set key=value`` overrides are parsed as JSON
when possible and as plain strings otherwise. Unknown keys are rejected.
"""
import copy
import json

from .camera import CameraModel, fisheye_camera, pal_camera
from .exceptions import ConfigError

DEFAULTS = {
    "seed": 0,
    # camera: a preset, optionally overridden field by field
    "camera.preset": "pal",
    "camera.kind": None,
    "camera.rho": None,
    "camera.zp": None,
    "camera.pp": None,
    "camera.elev_deg": None,
    "camera.size": None,
    # uncertainty
    "unc.point_prior": 0.05,
    "unc.max_history": 20,
    "unc.min_pixel_sigma": 0.05,
    # solver
    "ba.window": 5,
    "ba.max_iters": 20,
    "ba.huber_chi2": 5.991,
    "ba.lambda0": 1e-4,
    "ba.rel_tol": 1e-8,
    # two-view initialisation
    "init.ransac_thresh_rad": 1e-3,
    "init.ransac_thresh_px": 2.0,
    "init.ransac_iters": 10000,
    "init.min_inlier_ratio": 0.3,
    "init.min_parallax_deg": 1.0,
    "init.min_landmarks": 50,
    "init.max_offset": 30,
    # loop closing
    "loop.enabled": True,
    "loop.radius_frac": 0.1,
    "loop.min_gap": 20,
    "loop.min_inlier_ratio": 0.5,
    "loop.thresh_px": 2.0,
    # evaluation
    "eval.assoc_tol": 0.01,
    "eval.rpe_delta": 1.0,
    # pipeline
    "run.use_point_unc": True,
    "run.use_pose_unc": True,
    "run.kf_every": 3,
    "run.triangulate_chi2": 5.991,
    # simulator
    "sim.trajectory": "circle",
    "sim.n_frames": 60,
    "sim.laps": 1.0,
    "sim.dt": 0.05,
    "sim.scene_scale": 1.0,
    "sim.wobble_deg": 3.0,
    "sim.n_landmarks": 300,
    "sim.shell": [2.5, 4.5],
    "sim.elevation_band_deg": [-25.0, 40.0],
    "sim.pixel_sigma": 0.5,
    "sim.jitter_frac": 0.3,
    "sim.jitter_sigma": 0.02,
    "sim.outlier_rate": 0.0,
    "sim.dropout_rate": 0.0,
    # ablation
    "ablate.seeds": 20,
    "ablate.first_seed": 0,
}

_NULLABLE = {k for k, v in DEFAULTS.items() if v is None}


def flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def _coerce(key, value):
    default = DEFAULTS[key]
    if value is None:
        if key in _NULLABLE:
            return None
        raise ConfigError(f"{key} may not be null")
    if default is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{key} expects a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not float(value).is_integer():
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key} expects a number, got {value!r}") from exc
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{key} expects a list of {len(default)} numbers")
        return [float(v) for v in value]
    return str(value)


def make_config(overrides=None):
    """Defaults updated with ``overrides`` (flat or nested); validates keys and types."""
    cfg = copy.deepcopy(DEFAULTS)
    for k, v in flatten(overrides or {}).items():
        if k not in DEFAULTS:
            raise ConfigError(f"unknown config key {k!r}")
        cfg[k] = _coerce(k, v)
    return cfg


def parse_set(items):
    """``["a.b=1", ...]`` -> dict, values decoded as JSON when they parse."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            out[k.strip()] = v
    return out


def load_config(path=None, sets=None):
    overrides = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                overrides = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(overrides, dict):
            raise ConfigError(f"{path}: top level must be an object")
    overrides = flatten(overrides)
    overrides.update(parse_set(sets))
    return make_config(overrides)


def dump_config(cfg):
    return json.dumps(cfg, indent=2, sort_keys=True)


def camera_from_config(cfg):
    preset = cfg["camera.preset"]
    if preset == "pal":
        base = pal_camera().to_dict()
    elif preset == "fisheye":
        base = fisheye_camera().to_dict()
    else:
        raise ConfigError(f"unknown camera preset {preset!r}")
    for field in ("kind", "rho", "zp", "pp", "elev_deg", "size"):
        v = cfg.get(f"camera.{field}")
        if v is not None:
            base[field] = v
    return CameraModel.from_dict(base)


def scenario_from_config(cfg, seed=None):
    from .sim import Scenario

    return Scenario(
        trajectory=cfg["sim.trajectory"],
        n_frames=cfg["sim.n_frames"],
        laps=cfg["sim.laps"],
        dt=cfg["sim.dt"],
        scene_scale=cfg["sim.scene_scale"],
        wobble_deg=cfg["sim.wobble_deg"],
        n_landmarks=cfg["sim.n_landmarks"],
        shell=tuple(cfg["sim.shell"]),
        elevation_band_deg=tuple(cfg["sim.elevation_band_deg"]),
        pixel_sigma=cfg["sim.pixel_sigma"],
        jitter_frac=cfg["sim.jitter_frac"],
        jitter_sigma=cfg["sim.jitter_sigma"],
        outlier_rate=cfg["sim.outlier_rate"],
        dropout_rate=cfg["sim.dropout_rate"],
        seed=cfg["seed"] if seed is None else seed,
        camera=camera_from_config(cfg).to_dict(),
    )
