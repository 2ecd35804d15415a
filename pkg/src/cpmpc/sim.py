"""Synthetic pedestrians, experiment orchestration and reporting."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import conformal
from .conformal import RegionTable
from .constraints import CollisionConstraint
from .dynamics import BicycleParams, MissionSpec
from .errors import CalibrationInfeasibleError, ConfigurationError
from .mpc import CONTROLLERS, EpisodeLog, SolverConfig, jsonable, make_controller, run_closed_loop
from .predictor import (CONSTANT_VELOCITY, LINEAR, KINDS, OneStepModel, build_prediction_tables,
                        constant_velocity, fit_linear_one_step)
from .trajectory import Dataset, split_dataset

log = logging.getLogger(__name__)

PANEL_TIMES = (0, 2, 10, 18)


@dataclass(frozen=True)
class AgentGenConfig:
    """Goal-directed walkers with Gaussian velocity noise.

    Each agent starts at a Gaussian sample around ``start_mean``, heads for its
    goal at ``speed`` metres per step, and adds i.i.d. noise of std
    ``noise_std`` per step and axis (clipped at ``noise_clip`` stds).  It
    stops at the goal when closer than one nominal step.
    """

    start_mean: tuple = ((0.0, -2.8), (1.6, 1.8), (-3.6, 2.1))
    start_std: tuple = (0.3, 0.3, 0.3)
    goal: tuple = ((0.4, 4.0), (1.0, -4.0), (3.0, 2.6))
    speed: tuple = (0.15, 0.15, 0.15)
    noise_std: float = 0.02
    noise_clip: float = 4.0
    T: int = 20
    seed: int = 0

    def __post_init__(self):
        n = len(self.start_mean)
        norm = lambda v: tuple(float(x) for x in (v if isinstance(v, (list, tuple)) else [v] * n))
        object.__setattr__(self, "start_mean", tuple(tuple(float(c) for c in m) for m in self.start_mean))
        object.__setattr__(self, "goal", tuple(tuple(float(c) for c in g) for g in self.goal))
        object.__setattr__(self, "start_std", norm(self.start_std))
        object.__setattr__(self, "speed", norm(self.speed))
        if not (len(self.goal) == len(self.start_std) == len(self.speed) == n):
            raise ConfigurationError("per-agent fields must all have one entry per agent")
        if any(len(m) != 2 for m in self.start_mean + self.goal):
            raise ConfigurationError("agent positions are planar")
        if self.noise_std < 0 or min(self.start_std, default=0) < 0 or min(self.speed, default=0) < 0:
            raise ConfigurationError("noise, start spread and speed must be nonnegative")
        if int(self.T) != self.T or self.T < 1:
            raise ConfigurationError("T must be a positive integer")

    @property
    def n_agents(self) -> int:
        return len(self.start_mean)


def generate_agent_batch(cfg: AgentGenConfig, K: int, seed: int | None = None) -> np.ndarray:
    """``K`` i.i.d. joint trajectories as a ``(K, T+1, N, 2)`` array."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    N, T = cfg.n_agents, cfg.T
    out = np.empty((K, T + 1, N, 2))
    if N == 0:
        return out
    mean = np.asarray(cfg.start_mean)
    goal = np.asarray(cfg.goal)
    speed = np.asarray(cfg.speed)[None, :]
    pos = mean + rng.normal(size=(K, N, 2)) * np.asarray(cfg.start_std)[None, :, None]
    out[:, 0] = pos
    for t in range(T):
        to_goal = goal - pos
        dist = np.linalg.norm(to_goal, axis=-1)
        step = np.minimum(speed, dist)
        with np.errstate(invalid="ignore", divide="ignore"):
            direction = np.where(dist[..., None] > 0, to_goal / dist[..., None], 0.0)
        noise = np.clip(rng.normal(size=(K, N, 2)), -cfg.noise_clip, cfg.noise_clip)
        pos = pos + step[..., None] * direction + cfg.noise_std * noise
        out[:, t + 1] = pos
    return out


def generate_agents(cfg: AgentGenConfig):
    """One joint trajectory drawn with ``cfg.seed``."""
    from .trajectory import Trajectory

    return Trajectory(generate_agent_batch(cfg, 1)[0])


def _sub(cls, data, name):
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigurationError(f"{name} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown keys in {name}: {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigurationError(f"bad {name}: {exc}") from None


@dataclass(frozen=True)
class MissionConfig:
    x0: tuple = (3.5, -3.0, math.atan2(4.0, -5.3), 0.0)
    target: tuple = (-1.8, 1.0)
    terminal_tol: float = 0.05
    length: float = 0.5
    dt: float = 0.125
    phi_max: float = math.pi / 6
    a_max: float = 5.0
    safety_distance: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        object.__setattr__(self, "target", tuple(float(v) for v in self.target))
        if len(self.x0) != 4 or len(self.target) != 2:
            raise ConfigurationError("mission x0 needs 4 entries and target 2")

    def spec(self, T: int) -> MissionSpec:
        params = BicycleParams(self.length, self.dt, self.phi_max, self.a_max)
        return MissionSpec(T, tuple(self.x0), tuple(self.target), self.terminal_tol, params)

    def constraint(self, norm: str) -> CollisionConstraint:
        return CollisionConstraint(self.safety_distance + self.length, 1.0, norm)


@dataclass(frozen=True)
class ExperimentConfig:
    T: int = 20
    n_train: int = 2000
    n_calib: int = 610
    n_test: int = 1000
    delta: float = 0.1
    norm: str = conformal.INFINITY
    predictor: str = LINEAR
    ridge: float = 1e-6
    benchmark_delta_split: str = "uniform"
    agents: AgentGenConfig = field(default_factory=AgentGenConfig)
    mission: MissionConfig = field(default_factory=MissionConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    n_episodes: int = 10
    controllers: tuple = CONTROLLERS
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "agents", _sub(AgentGenConfig, self.agents, "agents"))
        object.__setattr__(self, "mission", _sub(MissionConfig, self.mission, "mission"))
        object.__setattr__(self, "solver", _sub(SolverConfig, self.solver, "solver"))
        object.__setattr__(self, "controllers", tuple(self.controllers))
        if not 0 < self.delta < 1:
            raise ConfigurationError(f"delta must lie in (0, 1), got {self.delta}")
        for name in ("n_train", "n_calib"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.n_test < 0 or not 0 <= self.n_episodes <= self.n_test:
            raise ConfigurationError("need 0 <= n_episodes <= n_test")
        conformal.check_norm(self.norm)
        if self.predictor not in KINDS:
            raise ConfigurationError(f"predictor must be one of {KINDS}")
        if self.benchmark_delta_split not in conformal.DELTA_SPLITS:
            raise ConfigurationError(f"benchmark_delta_split must be one of {conformal.DELTA_SPLITS}")
        if any(c not in CONTROLLERS for c in self.controllers):
            raise ConfigurationError(f"controllers must be drawn from {CONTROLLERS}")
        if self.agents.T != self.T:
            object.__setattr__(self, "agents", dataclasses.replace(self.agents, T=self.T))
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")

    @property
    def mission_spec(self) -> MissionSpec:
        return self.mission.spec(self.T)

    @property
    def constraint(self) -> CollisionConstraint:
        return self.mission.constraint(self.norm)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _sub(cls, data, "config")

    def to_dict(self) -> dict:
        return jsonable(dataclasses.asdict(self))


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return ExperimentConfig.from_dict(data)


@dataclass
class Calibration:
    """Everything produced offline: data, predictor, tables and both region sets."""

    dataset: Dataset
    model: OneStepModel
    tables: np.ndarray
    sigma: conformal.NormalizationTable
    scores: np.ndarray
    joint: RegionTable
    benchmark: RegionTable


def make_dataset(cfg: ExperimentConfig) -> Dataset:
    K = cfg.n_train + cfg.n_calib + cfg.n_test
    arr = generate_agent_batch(cfg.agents, K, cfg.seed)
    d = split_dataset(list(arr), cfg.n_train, cfg.n_calib, cfg.n_test, cfg.seed)
    return dataclasses.replace(d, meta={"generator": jsonable(dataclasses.asdict(cfg.agents)),
                                        "seed": cfg.seed})


def fit_model(cfg: ExperimentConfig, train: np.ndarray) -> OneStepModel:
    if cfg.predictor == CONSTANT_VELOCITY:
        return constant_velocity(train.shape[2], train.shape[3])
    return fit_linear_one_step(train, cfg.ridge)


def calibrate(cfg: ExperimentConfig, dataset: Dataset | None = None,
              model: OneStepModel | None = None) -> Calibration:
    dataset = make_dataset(cfg) if dataset is None else dataset
    arr = dataset.array()
    train = arr[list(dataset.train)]
    model = fit_model(cfg, train) if model is None else model
    tables = build_prediction_tables(model, arr)
    tr, ca = list(dataset.train), list(dataset.calib)
    sigma = conformal.compute_normalization(arr[tr], tables[tr], cfg.norm)
    scores = conformal.compute_scores(arr[ca], tables[ca], sigma, cfg.norm)
    joint = conformal.calibrate_joint(scores, sigma, cfg.delta)
    if not math.isfinite(joint.R):
        need = conformal.min_calibration_size(cfg.delta)
        raise CalibrationInfeasibleError(
            f"calibration set of size {len(ca)} gives infinite radii for delta={cfg.delta}; "
            f"need ceil((n+1)(1-delta)) <= n, i.e. n >= {need}",
            min_calib_size=need,
        )
    bench = conformal.calibrate_benchmark(arr[ca], tables[ca], cfg.delta, cfg.T,
                                          cfg.benchmark_delta_split)
    return Calibration(dataset, model, tables, sigma, scores, joint, bench)


def _episode_job(args):
    cfg, cal_parts, kind, idx, traj = args
    model, joint, bench = cal_parts
    regions = joint if kind == "proposed" else bench
    ctrl = make_controller(kind, cfg.mission_spec, cfg.constraint, regions)
    return run_closed_loop(ctrl, model, traj, cfg.solver, seed=idx, panel_times=PANEL_TIMES)


def aggregate_episodes(records: list[dict]) -> dict:
    """Per-controller aggregates computed from step records alone."""
    by_ep: dict[tuple, list[dict]] = {}
    for r in records:
        by_ep.setdefault((r["controller"], r["seed"]), []).append(r)
    out: dict[str, dict] = {}
    events = []
    for (kind, seed), steps in sorted(by_ep.items()):
        steps = sorted(steps, key=lambda r: r["t"])
        agg = out.setdefault(kind, {"episodes": 0, "feasible_at_start": 0, "feasible_all": 0,
                                    "safe_all": 0, "reached_target": 0,
                                    "warm_start_always_certified": 0, "_cost": 0.0})
        planning = [s for s in steps if s["feasible"] is not None]
        final = steps[-1]
        agg["episodes"] += 1
        start_ok = bool(planning and planning[0]["feasible"])
        all_ok = all(s["feasible"] for s in planning)
        agg["feasible_at_start"] += start_ok
        agg["feasible_all"] += all_ok
        agg["safe_all"] += all(_f(s["realized_c"]) >= 0 for s in steps)
        agg["reached_target"] += final["terminal_error"] <= final.get("terminal_tol", 0.05)
        agg["warm_start_always_certified"] += start_ok and all(
            s["warm_start_certified"] for s in planning[1:])
        agg["_cost"] += final["realized_cost"]
        for s in planning:
            if not s["feasible"]:
                events.append({"method": kind, "seed": seed, "step": s["t"]})
    for agg in out.values():
        n = agg["episodes"]
        agg["mean_realized_cost"] = agg.pop("_cost") / n if n else None
        agg["feasibility_rate"] = agg["feasible_all"] / n if n else None
        agg["safety_rate"] = agg["safe_all"] / n if n else None
    return {"controllers": out, "infeasibility_events": events}


def _f(v):
    return float(v) if not isinstance(v, str) else float(v.replace("inf", "Infinity"))


def coverage_summary(rows: list[dict], T: int) -> dict:
    """Coverage counts from per-trajectory rows listing missed planning times.

    ``covered`` counts trajectories inside every region of the table (all
    ``(t, tau)`` pairs at once).  ``by_t[t]`` counts trajectories inside all
    regions issued at planning time ``t``; ``worst_t_covered`` is its minimum.
    """
    n = len(rows)
    out = {}
    for method in ("joint", "benchmark"):
        missed = [set(r[f"{method}_missed_t"]) for r in rows]
        covered = sum(not m for m in missed)
        by_t = [sum(t not in m for m in missed) for t in range(T)]
        worst = min(by_t) if n and T else n
        out[method] = {
            "covered": covered,
            "fraction": covered / n if n else None,
            "by_t": by_t,
            "worst_t_covered": worst,
            "worst_t_fraction": worst / n if n else None,
        }
    return out


@dataclass
class MetricsReport:
    config: dict
    n_test: int
    T: int
    R: float
    k_joint: int
    k_benchmark: int
    joint_radii: np.ndarray
    benchmark_radii: np.ndarray
    coverage_rows: list[dict]
    episodes: list[EpisodeLog]
    aggregates: dict

    @property
    def coverage(self) -> dict:
        return coverage_summary(self.coverage_rows, self.T)

    @property
    def joint_covered(self) -> int:
        return self.coverage["joint"]["covered"]

    @property
    def benchmark_covered(self) -> int:
        return self.coverage["benchmark"]["covered"]

    @property
    def joint_coverage(self) -> float | None:
        return self.coverage["joint"]["fraction"]

    @property
    def benchmark_coverage(self) -> float | None:
        return self.coverage["benchmark"]["fraction"]

    def step_records(self) -> list[dict]:
        return [r for ep in self.episodes for r in ep.steps]

    def summary(self) -> dict:
        return jsonable({
            "n_test": self.n_test,
            "coverage": self.coverage,
            "R": self.R,
            "k_joint": self.k_joint,
            "k_benchmark": self.k_benchmark,
            **self.aggregates,
            "config": self.config,
        })


def _missed_times(by_t: np.ndarray) -> list[list[int]]:
    return [np.flatnonzero(~row).tolist() for row in by_t]


def run_experiment(cfg: ExperimentConfig, calibration: Calibration | None = None) -> MetricsReport:
    """Data, predictor, calibration, coverage and paired closed-loop episodes."""
    cal = calibrate(cfg) if calibration is None else calibration
    d = cal.dataset
    arr = d.array()
    te = list(d.test)
    joint_t = conformal.coverage_by_time(cal.joint, arr[te], cal.tables[te], cfg.norm)
    bench_t = conformal.coverage_by_time(cal.benchmark, arr[te], cal.tables[te], conformal.INFINITY)
    rows = [{"traj_id": i, "joint_missed_t": jm, "benchmark_missed_t": bm}
            for i, jm, bm in zip(te, _missed_times(joint_t), _missed_times(bench_t))]

    jobs = [(cfg, (cal.model, cal.joint, cal.benchmark), kind, i, arr[i])
            for i in te[:cfg.n_episodes] for kind in cfg.controllers]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            episodes = list(pool.map(_episode_job, jobs))
    else:
        episodes = [_episode_job(j) for j in jobs]
    records = [r for ep in episodes for r in ep.steps]

    return MetricsReport(
        config=cfg.to_dict(), n_test=len(te), T=cfg.T,
        R=cal.joint.R, k_joint=cal.joint.k, k_benchmark=cal.benchmark.k,
        joint_radii=cal.joint.radii, benchmark_radii=cal.benchmark.radii,
        coverage_rows=rows, episodes=episodes, aggregates=aggregate_episodes(records),
    )


def read_coverage_rows(path) -> list[dict]:
    """Inverse of the ``coverage.csv`` writer."""
    def times(v):
        return [int(x) for x in v.split()] if v else []

    with open(path, newline="") as fh:
        return [{"traj_id": int(r["traj_id"]), "joint_missed_t": times(r["joint_missed_t"]),
                 "benchmark_missed_t": times(r["benchmark_missed_t"])}
                for r in csv.DictReader(fh)]


def _dump(obj) -> str:
    return json.dumps(jsonable(obj), sort_keys=True)


def export_report(report: MetricsReport, out_dir) -> dict[str, Path]:
    """Write report.json, radii.csv, coverage.csv, episodes.jsonl and boxes.jsonl."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in
             ("report.json", "radii.csv", "coverage.csv", "episodes.jsonl", "boxes.jsonl")}

    paths["report.json"].write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")

    with open(paths["radii.csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "t", "tau", "radius"])
        for method, radii in (("joint", report.joint_radii), ("benchmark", report.benchmark_radii)):
            T = radii.shape[0]
            for t in range(T):
                for tau in range(t + 1, T + 1):
                    r = float(radii[t, tau])
                    w.writerow([method, t, tau, repr(r) if math.isfinite(r) else "inf"])

    with open(paths["coverage.csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "joint_inside", "benchmark_inside", "joint_missed_t",
                    "benchmark_missed_t"])
        for r in report.coverage_rows:
            jm, bm = r["joint_missed_t"], r["benchmark_missed_t"]
            w.writerow([r["traj_id"], int(not jm), int(not bm), " ".join(map(str, jm)),
                        " ".join(map(str, bm))])

    with open(paths["episodes.jsonl"], "w") as fh:
        for r in report.step_records():
            fh.write(_dump(r) + "\n")

    with open(paths["boxes.jsonl"], "w") as fh:
        for ep in report.episodes:
            for t in sorted(ep.panels):
                for row in ep.panels[t]:
                    fh.write(_dump({"controller": ep.controller, "seed": ep.seed, **row}) + "\n")
    return paths


def read_episode_records(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
