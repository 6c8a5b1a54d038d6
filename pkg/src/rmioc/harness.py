"""Experiment pipelines: trajectory generation, noise injection and sweeps.

All randomness derives from one integer seed. Each noise realization gets its
own ``SeedSequence(seed, spawn_key=(sigma_index, trial))`` so any cell of a
sweep can be regenerated on its own. One realization is shared by every
start time (and every gamma / feature set) of a sweep.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache, partial
from pathlib import Path

import numpy as np

from .baseline import kkt_report
from .dynamics import (
    ARM_FEATURES,
    ARM_WEIGHTS,
    ARM_X_GOAL,
    ARM_X_START,
    LQR_A,
    LQR_B,
    LQR_FEATURES,
    LQR_HORIZON,
    LQR_WEIGHTS,
    LQR_X0,
    ArmParameters,
    arm_inverse_dynamics,
    arm_system,
    lti_system,
    quadratic_feature_library,
)
from .forward import FixedEndpointOcp, SolverOptions, reference_lqr_problem, solve_fixed_endpoint, solve_lqr
from .recovery import (
    RECOVERED,
    DegenerateWindowError,
    RecoveryReport,
    SumDegenerateKernelError,
    minimal_observation_ioc,
    observations,
    recover_on_window,
)
from .trajectory import Trajectory

log = logging.getLogger(__name__)

DESK_T, DESK_DT = 200, 1.0 / 200
FULL_T, FULL_DT = 2000, 1.0 / 2000
NOISE_LEVELS = (1e-5, 1e-4, 1e-3)
GAMMA_LEVELS = (10.0, 30.0, 100.0, 300.0, 600.0)
LQR_STARTS = (1, 3, 6, 54, 84)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    system: str = "arm"  # "arm" or "lqr"
    features: tuple = ARM_FEATURES
    weights: tuple | None = None  # one per feature, zeros for irrelevant ones
    T: int = DESK_T
    dt: float = DESK_DT
    x_start: tuple | None = None
    x_goal: tuple | None = None
    sigmas: tuple = (0.0,)
    gamma: float = 100.0
    gammas: tuple = GAMMA_LEVELS
    feature_counts: tuple | None = None  # nested prefixes of ``features``
    starts: tuple | None = None  # None: every start time
    start_stride: int = 1
    trials: int = 1
    seed: int = 0
    noise_on: str = "angles"  # "angles" or "state"
    workers: int = 1
    out_dir: str | None = None

    def __post_init__(self):
        if self.system not in ("arm", "lqr"):
            raise ValueError(f"unknown system {self.system!r}")
        self.features = tuple(self.features)
        if self.weights is None:
            default = ARM_WEIGHTS if self.system == "arm" else LQR_WEIGHTS
            self.weights = tuple(default) + (0.0,) * (len(self.features) - len(default))
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.weights) != len(self.features):
            raise ValueError("need one weight per feature")
        if not any(self.weights):
            raise ValueError("ground-truth weights must not all be zero")
        self.sigmas = tuple(float(s) for s in self.sigmas)
        if any(s < 0 for s in self.sigmas):
            raise ValueError("noise levels must be nonnegative")
        self.gammas = tuple(float(g) for g in self.gammas)
        if list(self.gammas) != sorted(self.gammas):
            raise ValueError("gamma list must be ascending")
        if self.feature_counts is not None:
            self.feature_counts = tuple(int(k) for k in self.feature_counts)
            if any(not 1 <= k <= len(self.features) for k in self.feature_counts):
                raise ValueError("feature counts must lie between 1 and the number of features")
        if self.starts is not None:
            self.starts = tuple(int(s) for s in self.starts)
        if self.x_start is not None:
            self.x_start = tuple(float(v) for v in self.x_start)
        if self.x_goal is not None:
            self.x_goal = tuple(float(v) for v in self.x_goal)
        if self.noise_on not in ("angles", "state"):
            raise ValueError("noise_on must be 'angles' or 'state'")
        if self.trials < 1 or self.start_stride < 1 or self.workers < 1:
            raise ValueError("trials, start_stride and workers must be positive")
        if self.system == "lqr" and any(self.sigmas):
            raise ValueError("noise injection is defined for the arm only")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def full_scale(self) -> "ExperimentConfig":
        return replace(self, T=FULL_T, dt=FULL_DT)

    @property
    def feature_set(self):
        n, m = (4, 2) if self.system == "arm" else (2, 1)
        return quadratic_feature_library(self.features, n, m)

    @property
    def omega_true(self) -> np.ndarray:
        return np.array(self.weights)


def arm_config(**kw) -> ExperimentConfig:
    return ExperimentConfig(system="arm", features=kw.pop("features", ARM_FEATURES), **kw)


def lqr_config(**kw) -> ExperimentConfig:
    kw.setdefault("T", LQR_HORIZON)
    kw.setdefault("dt", 1.0)
    return ExperimentConfig(system="lqr", features=kw.pop("features", LQR_FEATURES), **kw)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


def system_for(cfg: ExperimentConfig):
    if cfg.system == "arm":
        return arm_system(cfg.dt)
    return lti_system(LQR_A, LQR_B)


@lru_cache(maxsize=8)
def _arm_trajectory(T, dt, features, weights, x_start, x_goal, log_path):
    keep = [i for i, w in enumerate(weights) if w != 0.0]
    feats = quadratic_feature_library([features[i] for i in keep], 4, 2)
    ocp = FixedEndpointOcp(arm_system(dt), feats, np.array([weights[i] for i in keep]), np.array(x_start), np.array(x_goal), T)
    res = solve_fixed_endpoint(ocp, SolverOptions(log_path=log_path))
    log.info("arm trajectory: T=%d, %d Newton iterations, residual %.2e", T, res.iterations, res.residual)
    return res


def generate_trajectory(cfg: ExperimentConfig, log_path=None) -> Trajectory:
    """Noiseless optimal trajectory for the configured system."""
    if cfg.system == "lqr":
        return solve_lqr(reference_lqr_problem(cfg.weights, cfg.T, cfg.x_start or LQR_X0))
    res = _arm_trajectory(
        int(cfg.T),
        float(cfg.dt),
        cfg.features,
        cfg.weights,
        cfg.x_start or tuple(ARM_X_START),
        cfg.x_goal or tuple(ARM_X_GOAL),
        None if log_path is None else str(log_path),
    )
    return res.trajectory


def noise_seed(seed: int, sigma_index: int, trial: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(int(sigma_index), int(trial)))


def inject_noise(traj: Trajectory, p: ArmParameters | None, sigma: float, dt: float, seed, noise_on: str = "angles") -> Trajectory:
    """Add Gaussian measurement noise and recompute torques by inverse dynamics.

    ``noise_on="angles"`` perturbs the joint angles only; ``"state"`` perturbs
    all four state coordinates. Torques come from the noisy states:
    ``qdd_k = (qd_{k+1} - qd_k) / dt`` and ``u_{k+1} = M qdd_k + C qd_k + g``
    at the noisy ``(q_k, qd_k)``.
    """
    if sigma < 0:
        raise ValueError("noise level must be nonnegative")
    if traj.state_dim != 4 or traj.input_dim != 2:
        raise ValueError("noise injection expects the arm state layout [q1, qd1, q2, qd2]")
    if noise_on not in ("angles", "state"):
        raise ValueError("noise_on must be 'angles' or 'state'")
    p = p or ArmParameters()
    rng = np.random.default_rng(seed)
    X = np.array(traj.states)
    cols = [0, 2] if noise_on == "angles" else [0, 1, 2, 3]
    X[:, cols] += sigma * rng.standard_normal((X.shape[0], len(cols)))
    q, qd = X[:, [0, 2]], X[:, [1, 3]]
    qdd = (qd[1:] - qd[:-1]) / dt
    U = arm_inverse_dynamics(p, q[:-1], qd[:-1], qdd)
    return Trajectory(X, U, dynamically_consistent=sigma == 0.0)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

FAILED = "failed"

RECORD_FIELDS = ("sigma", "gamma", "n_features", "trial", "start", "status", "l_min", "e_omega", "irrelevant_abs_mean")
AGGREGATE_FIELDS = ("sigma", "gamma", "n_features", "n_starts", "n_recovered", "avg_l_min", "avg_e_omega", "avg_irrelevant_abs")


@dataclass
class SweepResult:
    records: list = field(default_factory=list)
    kappa: dict = field(default_factory=dict)  # (sigma, gamma, n_features, trial, start) -> history

    def aggregate(self) -> list[dict]:
        groups: dict = {}
        for rec in self.records:
            groups.setdefault((rec["sigma"], rec["gamma"], rec["n_features"]), []).append(rec)
        out = []
        for key, recs in groups.items():
            ok = [r for r in recs if r["status"] == RECOVERED]
            irr = [r["irrelevant_abs_mean"] for r in ok if r["irrelevant_abs_mean"] is not None]
            out.append(
                {
                    "sigma": key[0],
                    "gamma": key[1],
                    "n_features": key[2],
                    "n_starts": len(recs),
                    "n_recovered": len(ok),
                    "avg_l_min": float(np.mean([r["l_min"] for r in ok])) if ok else math.nan,
                    "avg_e_omega": float(np.mean([r["e_omega"] for r in ok])) if ok else math.nan,
                    "avg_irrelevant_abs": float(np.mean(irr)) if irr else None,
                }
            )
        return out

    def records_csv(self) -> str:
        return _csv(RECORD_FIELDS, self.records)

    def aggregate_csv(self) -> str:
        return _csv(AGGREGATE_FIELDS, self.aggregate())

    def kappa_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sigma", "gamma", "n_features", "trial", "start", "l", "kappa"])
        for key, hist in self.kappa.items():
            for l, k in enumerate(hist, start=1):
                w.writerow([_fmt(v) for v in key] + [l, _fmt(k)])
        return buf.getvalue()

    def write(self, out_dir, config: ExperimentConfig | None = None) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "records": out / "records.csv",
            "aggregate": out / "aggregate.csv",
            "kappa": out / "kappa.csv",
            "report": out / "report.json",
        }
        paths["records"].write_text(self.records_csv())
        paths["aggregate"].write_text(self.aggregate_csv())
        paths["kappa"].write_text(self.kappa_csv())
        report = {"config": None if config is None else config.to_dict(), "aggregate": _jsonable(self.aggregate())}
        paths["report"].write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        return paths


def _jsonable(rows):
    return [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()} for r in rows]


def _csv(fields, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fields])
    return buf.getvalue()


def read_csv(text_or_path) -> list[dict]:
    text = text_or_path
    if isinstance(text_or_path, Path) or "\n" not in str(text_or_path):
        text = Path(text_or_path).read_text()
    return list(csv.DictReader(io.StringIO(text)))


def valid_starts(cfg: ExperimentConfig) -> list[int]:
    """Start times with at least one observation before the window limit.

    Arm windows stop at ``T - 1`` (pinned terminal state); LQR windows may
    include ``T``.
    """
    last = cfg.T - 1 if cfg.system == "arm" else cfg.T
    starts = cfg.starts if cfg.starts is not None else range(1, last + 1, cfg.start_stride)
    return [t for t in starts if 1 <= t <= last]


def _run_start(t, traj, cfg_system, T, dt, features, gammas, omega_true, n_features_list):
    """All (gamma, feature set) cells for one start time on one trajectory."""
    sysd = arm_system(dt) if cfg_system == "arm" else lti_system(LQR_A, LQR_B)
    last = T - 1 if cfg_system == "arm" else T
    out = []
    for nf in n_features_list:
        feats = quadratic_feature_library(features[:nf], sysd.state_dim, sysd.input_dim)
        w_true = np.asarray(omega_true[:nf])
        for gamma in gammas:
            try:
                rep = minimal_observation_ioc(
                    observations(traj, t, last), t, sysd, feats, gamma, l_cap=last - t + 1, omega_true=w_true
                )
            except (SumDegenerateKernelError, DegenerateWindowError) as exc:
                log.warning("start %d (gamma %g, %d features): %s", t, gamma, nf, exc)
                rep = RecoveryReport(t, None, None, None, [], None, FAILED)
            irr = None
            if rep.omega is not None and np.any(w_true == 0.0):
                irr = float(np.mean(np.abs(rep.omega[w_true == 0.0])))
            out.append((nf, gamma, rep, irr))
    return out


def _sweep(cfg: ExperimentConfig, gammas, n_features_list) -> SweepResult:
    base = generate_trajectory(cfg)
    result = SweepResult()
    starts = valid_starts(cfg)
    for si, sigma in enumerate(cfg.sigmas):
        for trial in range(cfg.trials):
            if cfg.system == "arm":
                traj = inject_noise(base, None, sigma, cfg.dt, noise_seed(cfg.seed, si, trial), cfg.noise_on)
            else:
                traj = base
            job = partial(
                _run_start,
                traj=traj,
                cfg_system=cfg.system,
                T=cfg.T,
                dt=cfg.dt,
                features=cfg.features,
                gammas=tuple(gammas),
                omega_true=cfg.weights,
                n_features_list=tuple(n_features_list),
            )
            if cfg.workers > 1:
                with ProcessPoolExecutor(cfg.workers) as ex:
                    per_start = list(ex.map(job, starts, chunksize=max(1, len(starts) // (4 * cfg.workers))))
            else:
                per_start = [job(t) for t in starts]
            # ordering is fixed by (feature set, gamma, start), never by completion
            cells = {}
            for t, rows in zip(starts, per_start):
                for nf, gamma, rep, irr in rows:
                    cells.setdefault((nf, gamma), []).append((t, rep, irr))
            for nf in n_features_list:
                for gamma in gammas:
                    for t, rep, irr in cells[(nf, gamma)]:
                        result.records.append(
                            {
                                "sigma": sigma,
                                "gamma": float(gamma),
                                "n_features": nf,
                                "trial": trial,
                                "start": t,
                                "status": rep.status,
                                "l_min": rep.l_min,
                                "e_omega": rep.e_omega,
                                "irrelevant_abs_mean": irr,
                            }
                        )
                        result.kappa[(sigma, float(gamma), nf, trial, t)] = rep.kappa_history
    return result


def run_start_time_sweep(cfg: ExperimentConfig) -> SweepResult:
    """Algorithm 1 from every valid start, for every configured noise level."""
    return _sweep(cfg, (cfg.gamma,), (len(cfg.features),))


def run_gamma_sweep(cfg: ExperimentConfig) -> SweepResult:
    return _sweep(cfg, cfg.gammas, (len(cfg.features),))


def run_feature_sweep(cfg: ExperimentConfig) -> SweepResult:
    n_relevant = sum(1 for w in cfg.weights if w != 0.0)
    counts = cfg.feature_counts or tuple(range(n_relevant, len(cfg.features) + 1))
    return _sweep(cfg, (cfg.gamma,), counts)


def run_lqr_comparison(cfg: ExperimentConfig | None = None, starts=LQR_STARTS) -> list[dict]:
    """Recovery-matrix and KKT-baseline errors for growing windows from each start."""
    cfg = cfg or lqr_config()
    traj = generate_trajectory(cfg)
    sysd = system_for(cfg)
    feats = cfg.feature_set
    w = cfg.omega_true
    rows = []
    for t in starts:
        for l in range(2, cfg.T - t + 2):
            rec = recover_on_window(traj, t, l, sysd, feats, w)
            base = kkt_report(traj, t, l, sysd, feats, w)
            rows.append(
                {
                    "start": t,
                    "l": l,
                    "e_recovery": rec.e_omega,
                    "kappa": rec.kappa_history[0],
                    "e_kkt": base.e_omega,
                    "kkt_degenerate": base.degenerate,
                }
            )
    return rows


COMPARISON_FIELDS = ("start", "l", "e_recovery", "kappa", "e_kkt", "kkt_degenerate")


def comparison_csv(rows) -> str:
    return _csv(COMPARISON_FIELDS, rows)


# ---------------------------------------------------------------------------
# trend checks used by ``--check``
# ---------------------------------------------------------------------------


def strictly_increasing(vals) -> bool:
    return all(b > a for a, b in zip(vals, vals[1:]))


def nondecreasing(vals) -> bool:
    return all(b >= a for a, b in zip(vals, vals[1:]))


def check_noise_trend(result: SweepResult, e_max: float = 0.02) -> list[tuple[str, bool, str]]:
    agg = sorted(result.aggregate(), key=lambda r: r["sigma"])
    noisy = [r for r in agg if r["sigma"] > 0]
    lmins = [r["avg_l_min"] for r in noisy]
    errs = [r["avg_e_omega"] for r in agg]
    out = [
        ("avg l_min strictly increasing in sigma", strictly_increasing(lmins), f"{lmins}"),
        (f"avg e_omega < {e_max}", all(e < e_max for e in errs), f"{errs}"),
    ]
    clean = [r for r in agg if r["sigma"] == 0]
    if clean:
        out.append(("noiseless avg e_omega < 0.01", clean[0]["avg_e_omega"] < 0.01, f"{clean[0]['avg_e_omega']}"))
    return out


def check_feature_trend(result: SweepResult, n: int = 4, m: int = 2) -> list[tuple[str, bool, str]]:
    agg = sorted(result.aggregate(), key=lambda r: r["n_features"])
    lmins = [r["avg_l_min"] for r in agg]
    irr = [r["avg_irrelevant_abs"] for r in agg if r["avg_irrelevant_abs"] is not None]
    bound_ok = all(
        rec["l_min"] >= -(-(rec["n_features"] + n - 1) // m) for rec in result.records if rec["l_min"] is not None
    )
    return [
        ("avg l_min strictly increasing in feature count", strictly_increasing(lmins), f"{lmins}"),
        ("irrelevant weights mean magnitude < 1e-2", all(v < 1e-2 for v in irr), f"{irr}"),
        ("l_min respects the uniform lower bound", bound_ok, ""),
    ]


def check_gamma_trend(result: SweepResult) -> list[tuple[str, bool, str]]:
    agg = sorted(result.aggregate(), key=lambda r: r["gamma"])
    lmins = [r["avg_l_min"] for r in agg]
    e = {r["gamma"]: r["avg_e_omega"] for r in agg}
    out = [("avg l_min nondecreasing in gamma", nondecreasing(lmins), f"{lmins}")]
    if 100.0 in e and 600.0 in e:
        out.append(("e_omega(100) within 2x of e_omega(600)", e[100.0] <= 2 * e[600.0], f"{e[100.0]} vs {e[600.0]}"))
    return out
