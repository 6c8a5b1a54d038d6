"""Command line entry point (``rmioc``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness as hz
from .baseline import kkt_report
from .dynamics import ARM_CANDIDATE_FEATURES
from .recovery import minimal_observation_ioc, observations, recover_on_window
from .trajectory import trajectory_from_csv, trajectory_to_csv

log = logging.getLogger("rmioc")


def _load_config(args, system: str, **defaults) -> hz.ExperimentConfig:
    d = dict(defaults)
    if args.config:
        d.update(json.loads(Path(args.config).read_text()))
    d.setdefault("system", system)
    if d["system"] == "lqr":
        d.setdefault("T", hz.LQR_HORIZON)
        d.setdefault("dt", 1.0)
        d.setdefault("features", list(hz.LQR_FEATURES))
    cfg = hz.ExperimentConfig.from_dict(d)
    over = {}
    if getattr(args, "paper_scale", False):
        over.update(T=hz.FULL_T, dt=hz.FULL_DT)
    if getattr(args, "gamma", None) is not None:
        over["gamma"] = args.gamma
    if getattr(args, "sigma", None):
        over["sigmas"] = tuple(args.sigma)
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "trials", None) is not None:
        over["trials"] = args.trials
    if getattr(args, "workers", None) is not None:
        over["workers"] = args.workers
    if getattr(args, "stride", None) is not None:
        over["start_stride"] = args.stride
    if getattr(args, "noise_on", None) is not None:
        over["noise_on"] = args.noise_on
    if args.out is not None:
        over["out_dir"] = args.out
    return replace(cfg, **over) if over else cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _report_checks(checks) -> int:
    failed = 0
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        failed += not ok
    return 1 if failed else 0


def cmd_generate_lqr(args) -> int:
    cfg = _load_config(args, "lqr")
    traj = hz.generate_trajectory(cfg)
    path = _out_dir(cfg) / "trajectory.csv"
    trajectory_to_csv(traj, path)
    print(path)
    return 0


def cmd_generate_arm(args) -> int:
    cfg = _load_config(args, "arm")
    out = _out_dir(cfg)
    traj = hz.generate_trajectory(cfg, log_path=out / "solver_log.jsonl")
    trajectory_to_csv(traj, out / "trajectory.csv")
    if cfg.sigmas and cfg.sigmas[0] > 0:
        noisy = hz.inject_noise(traj, None, cfg.sigmas[0], cfg.dt, hz.noise_seed(cfg.seed, 0, 0), cfg.noise_on)
        trajectory_to_csv(noisy, out / "trajectory_noisy.csv")
    print(out / "trajectory.csv")
    return 0


def cmd_recover(args) -> int:
    cfg = _load_config(args, args.system)
    traj = trajectory_from_csv(args.trajectory) if args.trajectory else hz.generate_trajectory(cfg)
    sysd = hz.system_for(cfg)
    feats = cfg.feature_set
    w = cfg.omega_true
    if args.length:
        rep = recover_on_window(traj, args.start, args.length, sysd, feats, w)
    else:
        last = traj.horizon - 1 if cfg.system == "arm" else traj.horizon
        rep = minimal_observation_ioc(observations(traj, args.start, last), args.start, sysd, feats, cfg.gamma, last - args.start + 1, w)
    text = rep.to_json(indent=2)
    if cfg.out_dir:
        out = _out_dir(cfg)
        (out / "report.json").write_text(text + "\n")
        (out / "kappa.csv").write_text(rep.kappa_csv())
    print(text)
    return 0


def cmd_compare_kkt(args) -> int:
    cfg = _load_config(args, "lqr")
    rows = hz.run_lqr_comparison(cfg, tuple(args.starts))
    out = _out_dir(cfg)
    (out / "comparison.csv").write_text(hz.comparison_csv(rows))
    if args.start is not None and args.length is not None:
        sysd = hz.system_for(cfg)
        rep = kkt_report(hz.generate_trajectory(cfg), args.start, args.length, sysd, cfg.feature_set, cfg.omega_true)
        print(rep.to_json(indent=2))
    print(out / "comparison.csv")
    if args.check:
        return _report_checks(comparison_checks(rows))
    return 0


def comparison_checks(rows):
    by = {}
    for r in rows:
        by.setdefault(r["start"], []).append(r)
    out = []
    if 1 in by:
        first = next((r["l"] for r in by[1] if r["e_recovery"] < 0.01), None)
        out.append(("recovery from t=1 reaches e < 0.01 by l <= 25", first is not None and first <= 25, f"l={first}"))
    if 54 in by:
        pre = [r for r in by[54] if r["l"] < by[54][-1]["l"]]
        out.append(("baseline from t=54 wrong before the terminal", all(r["e_kkt"] > 0.1 for r in pre), ""))
    return out


def _sweep_cmd(args, runner, checker, **defaults) -> int:
    cfg = _load_config(args, "arm", **defaults)
    result = runner(cfg)
    paths = result.write(_out_dir(cfg), cfg)
    for r in result.aggregate():
        print(json.dumps(hz._jsonable([r])[0], sort_keys=True))
    print(paths["aggregate"])
    if args.check:
        return _report_checks(checker(result))
    return 0


def cmd_sweep_noise(args) -> int:
    return _sweep_cmd(args, hz.run_start_time_sweep, hz.check_noise_trend, sigmas=[0.0, *hz.NOISE_LEVELS])


def cmd_sweep_features(args) -> int:
    return _sweep_cmd(
        args, hz.run_feature_sweep, hz.check_feature_trend, features=list(ARM_CANDIDATE_FEATURES), sigmas=[1e-4]
    )


def cmd_sweep_gamma(args) -> int:
    return _sweep_cmd(args, hz.run_gamma_sweep, hz.check_gamma_trend, sigmas=[1e-4])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rmioc", description="Recovery-matrix inverse optimal control experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, sweep=False):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--gamma", type=float)
        p.add_argument("--sigma", type=float, action="append", help="noise level (repeatable)")
        p.add_argument("--paper-scale", action="store_true", help="T=2000, dt=1/2000 instead of the desk-scale default")
        p.add_argument("--noise-on", choices=["angles", "state"])
        if sweep:
            p.add_argument("--trials", type=int)
            p.add_argument("--workers", type=int)
            p.add_argument("--stride", type=int, help="use every k-th start time")
            p.add_argument("--check", action="store_true", help="exit nonzero if a trend check fails")

    p = sub.add_parser("generate-lqr", help="Riccati-optimal trajectory of the LQR instance")
    common(p)
    p.set_defaults(func=cmd_generate_lqr)

    p = sub.add_parser("generate-arm", help="fixed-endpoint optimal arm trajectory")
    common(p)
    p.set_defaults(func=cmd_generate_arm)

    p = sub.add_parser("recover", help="minimal-observation recovery from one start time")
    common(p)
    p.add_argument("--system", choices=["arm", "lqr"], default="lqr")
    p.add_argument("--trajectory", help="trajectory CSV (default: regenerate from config)")
    p.add_argument("--start", type=int, default=1)
    p.add_argument("--length", type=int, help="fixed window length instead of the rank test")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("compare-kkt", help="recovery matrix vs KKT baseline error curves (LQR)")
    common(p, sweep=True)
    p.add_argument("--starts", type=int, nargs="+", default=list(hz.LQR_STARTS))
    p.add_argument("--start", type=int)
    p.add_argument("--length", type=int)
    p.set_defaults(func=cmd_compare_kkt)

    for name, fn, helptext in (
        ("sweep-noise", cmd_sweep_noise, "start-time sweep per noise level"),
        ("sweep-features", cmd_sweep_features, "nested irrelevant-feature sets"),
        ("sweep-gamma", cmd_sweep_gamma, "rank index threshold sweep"),
    ):
        p = sub.add_parser(name, help=helptext)
        common(p, sweep=True)
        p.set_defaults(func=fn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    np.set_printoptions(precision=6)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
