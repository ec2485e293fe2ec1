"""Command line entry point: ``wideslam {simulate,run,eval,ablate,check}``.

Exit codes: 0 success, 1 numerical failure, 2 usage, input or I/O error.
"""
import argparse
import csv
import io
import json
import logging
import os
import sys
import time

import numpy as np

from .checks import run_checks
from .config import DEFAULTS, camera_from_config, dump_config, load_config, scenario_from_config
from .evaluation import Trajectory, error_stats, evaluate, read_tum, write_tum
from .exceptions import InputError, NumericalError
from .pipeline import run_pipeline
from .sim import generate, read_tracks, write_tracks

log = logging.getLogger("wideslam")

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2

ARMS = {
    "none": (False, False),
    "point": (True, False),
    "pose": (False, True),
    "both": (True, True),
}
STATS = ("rms", "mean", "median", "min", "max")
EVAL_HEADER = ("ate", "rpet", "rper")


def _out_dir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _gt_trajectory(tracks):
    return Trajectory.from_poses(tracks.timestamps, [p.inverse() for p in tracks.gt_poses()])


def _config(args):
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    return cfg


# ------------------------------------------------------------------ commands
def cmd_simulate(cfg, args):
    tracks = generate(scenario_from_config(cfg))
    out = _out_dir(args)
    path = os.path.join(out, "tracks.txt")
    write_tracks(tracks, path)
    write_tum(_gt_trajectory(tracks), os.path.join(out, "gt.tum"))
    per_frame = np.bincount(tracks.obs_frame, minlength=len(tracks.frame_ids))
    print(f"wrote {path}: frames={len(tracks.frame_ids)} landmarks={len(tracks.landmarks)} "
          f"obs={tracks.n_obs} obs/frame min={per_frame.min()} mean={per_frame.mean():.1f} "
          f"max={per_frame.max()}")
    return EXIT_OK


def _load_or_simulate(cfg, args):
    if args.tracks:
        return read_tracks(args.tracks)
    return generate(scenario_from_config(cfg))


def format_report(report):
    """Canonical JSON text: sorted keys, fixed float repr."""
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=True) + "\n"


def cmd_run(cfg, args):
    tracks = _load_or_simulate(cfg, args)
    t0 = time.perf_counter()
    res = run_pipeline(tracks, cfg, camera_from_config(cfg))
    out = _out_dir(args)
    write_tum(res.trajectory, os.path.join(out, "trajectory.tum"))
    report = dict(res.report)
    report["config"] = cfg
    _write_text(os.path.join(out, "report.json"), format_report(report))
    timing = dict(res.timing, total_s=time.perf_counter() - t0)
    _write_text(os.path.join(out, "timing.json"), json.dumps(timing, indent=2, sort_keys=True) + "\n")
    ev = report.get("eval")
    if ev:
        print(f"ate={ev['ate']:.6g} rpet={ev['rpet']:.6g} rper={ev['rper']:.6g} scale={ev['scale']:.6g}")
    print(f"wrote {out}/trajectory.tum, report.json, timing.json")
    return EXIT_OK


def format_eval_csv(metrics):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_HEADER)
    w.writerow(["%.17g" % metrics[k] for k in EVAL_HEADER])
    return buf.getvalue()


def cmd_eval(cfg, args):
    if not args.est or not args.gt:
        raise InputError("eval needs --est and --gt")
    metrics = evaluate(read_tum(args.est), read_tum(args.gt), cfg["eval.rpe_delta"], cfg["eval.assoc_tol"])
    text = format_eval_csv(metrics)
    if args.out:
        _write_text(os.path.join(_out_dir(args), "eval.csv"), text)
    sys.stdout.write(text)
    return EXIT_OK


def run_ablation(cfg, seeds, arms=ARMS):
    """Paired ablation: every arm runs on the same TrackSet for each seed.

    Returns ``(runs, summary)`` where ``runs`` is a list of per-cell dicts
    (``ate`` is NaN and ``error`` set for a failed cell) and ``summary`` maps
    arm name to the statistics of its successful cells.
    """
    runs = []
    for seed in seeds:
        c = dict(cfg, seed=int(seed))
        tracks = generate(scenario_from_config(c))
        for arm, (pt, ps) in arms.items():
            cell = {"seed": int(seed), "arm": arm, "ate": float("nan"), "error": ""}
            try:
                res = run_pipeline(tracks, dict(c, **{"run.use_point_unc": pt, "run.use_pose_unc": ps}))
                cell["ate"] = float(res.report["eval"]["ate"])
            except NumericalError as exc:
                cell["error"] = f"{type(exc).__name__}: {exc}"
                log.warning("seed %d arm %s failed: %s", seed, arm, cell["error"])
            runs.append(cell)
    summary = {}
    for arm in arms:
        e = [r["ate"] for r in runs if r["arm"] == arm and np.isfinite(r["ate"])]
        summary[arm] = error_stats(e) if e else {k: float("nan") for k in STATS}
        summary[arm]["n_ok"] = len(e)
    return runs, summary


def cmd_ablate(cfg, args):
    first = cfg["ablate.first_seed"] if args.seed is None else int(args.seed)
    seeds = range(first, first + cfg["ablate.seeds"])
    runs, summary = run_ablation(cfg, seeds)
    out = _out_dir(args)
    with open(os.path.join(out, "ablation_runs.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "arm", "ate", "error"])
        for r in runs:
            w.writerow([r["seed"], r["arm"], "%.17g" % r["ate"], r["error"]])
    with open(os.path.join(out, "ablation_summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", *STATS, "n_ok"])
        for arm, st in summary.items():
            w.writerow([arm, *("%.17g" % st[k] for k in STATS), st["n_ok"]])
    for arm, st in summary.items():
        print(f"{arm:<6s} " + " ".join(f"{k}={st[k]:.5g}" for k in STATS) + f" ok={st['n_ok']}")
    return EXIT_OK


def cmd_check(cfg, args):
    cam = camera_from_config(cfg)
    cameras = {cam.kind: cam}
    results = run_checks(cameras)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


COMMANDS = {
    "simulate": cmd_simulate,
    "run": cmd_run,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "check": cmd_check,
}


def build_parser():
    p = argparse.ArgumentParser(prog="wideslam", description="Uncertainty-weighted wide-FoV SLAM back end")
    p.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the seed (first seed for ablate)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, repeatable")
    common.add_argument("--tracks", help="tracks file (run)")
    common.add_argument("--gt", help="ground-truth TUM trajectory (eval)")
    common.add_argument("--est", help="estimated TUM trajectory (eval)")
    common.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.command is None:
        if args.dump_config:
            print(dump_config(DEFAULTS))
            return EXIT_OK
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.dump_config:
            print(dump_config(cfg))
            return EXIT_OK
        return COMMANDS[args.command](cfg, args)
    except NumericalError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
