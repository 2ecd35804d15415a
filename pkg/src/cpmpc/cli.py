"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 calibration infeasible,
4 MPC infeasible at t=0, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import conformal, sim
from .errors import ConfigurationError, CpmpcError
from .mpc import CONTROLLERS, jsonable, make_controller, run_closed_loop
from .predictor import load_model, save_model
from .trajectory import load_dataset, save_dataset, validate_dataset

log = logging.getLogger("cpmpc")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MPC_INFEASIBLE = 4


def _config(args) -> sim.ExperimentConfig:
    if getattr(args, "config", None):
        return sim.load_config(args.config)
    return sim.ExperimentConfig()


def _print(obj):
    print(json.dumps(jsonable(obj), indent=2, sort_keys=True))


def _dataset(args, cfg):
    if getattr(args, "data", None):
        d = load_dataset(args.data)
        report = validate_dataset(d)
        if not report.ok:
            raise ConfigurationError(f"invalid dataset {args.data}: {report.problems[:3]}")
        return d
    return sim.make_dataset(cfg)


def _calibration(args, cfg) -> sim.Calibration:
    d = _dataset(args, cfg)
    model = load_model(args.model) if getattr(args, "model", None) else None
    return sim.calibrate(cfg, d, model)


def cmd_generate_data(args) -> int:
    cfg = _config(args)
    d = sim.make_dataset(cfg)
    path = save_dataset(d, args.out)
    _print({"dataset": str(path), "K": len(d), "T": cfg.T, "N": cfg.agents.n_agents})
    return EXIT_OK


def cmd_fit_predictor(args) -> int:
    cfg = _config(args)
    d = _dataset(args, cfg)
    model = sim.fit_model(cfg, d.array("train"))
    path = save_model(model, args.out)
    _print({"model": str(path), "kind": model.kind})
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    cal = _calibration(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    conformal.save_regions(cal.joint, out / "joint.json")
    conformal.save_regions(cal.benchmark, out / "benchmark.json")
    _print({"out": str(out), "R": cal.joint.R, "k_joint": cal.joint.k,
            "k_benchmark": cal.benchmark.k, "n_calib": len(cal.dataset.calib)})
    return EXIT_OK


def _regions(args, cal: sim.Calibration):
    if getattr(args, "regions", None):
        base = Path(args.regions)
        return conformal.load_regions(base / "joint.json"), conformal.load_regions(base / "benchmark.json")
    return cal.joint, cal.benchmark


def cmd_coverage(args) -> int:
    cfg = _config(args)
    cal = _calibration(args, cfg)
    joint, bench = _regions(args, cal)
    arr = cal.dataset.array()
    te = list(cal.dataset.test)
    j = conformal.coverage_by_time(joint, arr[te], cal.tables[te], cfg.norm)
    b = conformal.coverage_by_time(bench, arr[te], cal.tables[te], conformal.INFINITY)
    rows = [{"joint_missed_t": np.flatnonzero(~jr).tolist(),
             "benchmark_missed_t": np.flatnonzero(~br).tolist()} for jr, br in zip(j, b)]
    _print({"n_test": len(te), **sim.coverage_summary(rows, cfg.T)})
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    cal = _calibration(args, cfg)
    joint, bench = _regions(args, cal)
    regions = joint if args.controller == "proposed" else bench
    traj = sim.generate_agent_batch(cfg.agents, 1, args.seed)[0]
    ctrl = make_controller(args.controller, cfg.mission_spec, cfg.constraint, regions)
    ep = run_closed_loop(ctrl, cal.model, traj, cfg.solver, seed=args.seed,
                         panel_times=sim.PANEL_TIMES)
    if args.out:
        with open(args.out, "w") as fh:
            for r in ep.steps:
                fh.write(json.dumps(jsonable(r), sort_keys=True) + "\n")
    _print(ep.summary())
    if not ep.feasible_at_start:
        log.error("MPC infeasible at t=0 for seed %d", args.seed)
        return EXIT_MPC_INFEASIBLE
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _config(args)
    if args.workers is not None:
        cfg = sim.ExperimentConfig.from_dict({**cfg.to_dict(), "workers": args.workers})
    report = sim.run_experiment(cfg)
    paths = sim.export_report(report, args.out)
    summary = report.summary()
    summary.pop("config")
    _print({"files": sorted(str(p) for p in paths.values()), **summary})
    return EXIT_OK


def cmd_report(args) -> int:
    base = Path(args.dir)
    stored = json.loads((base / "report.json").read_text())
    records = sim.read_episode_records(base / "episodes.jsonl")
    try:
        recomputed = jsonable(sim.aggregate_episodes(records))
        T = stored["config"]["T"]
        recomputed["coverage"] = jsonable(
            sim.coverage_summary(sim.read_coverage_rows(base / "coverage.csv"), T))
    except (KeyError, TypeError, ValueError) as exc:
        print(f"error: malformed episode log: {exc!r}", file=sys.stderr)
        return EXIT_ERROR
    mismatch = [k for k in recomputed if stored.get(k) != recomputed[k]]
    out = {"R": stored.get("R"), **recomputed,
           "recomputed_matches": not mismatch}
    _print(out)
    if mismatch:
        log.error("aggregates differ from episode logs: %s", mismatch)
        return EXIT_ERROR
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cpmpc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help, config=True, data=False, model=False, regions=False):
        sp = sub.add_parser(name, help=help)
        if config:
            sp.add_argument("--config", help="JSON experiment config (defaults if omitted)")
        if data:
            sp.add_argument("--data", help="dataset directory from generate-data (regenerated if omitted)")
        if model:
            sp.add_argument("--model", help="predictor JSON from fit-predictor (refit if omitted)")
        if regions:
            sp.add_argument("--regions", help="directory from calibrate (recalibrated if omitted)")
        sp.set_defaults(func=func)
        return sp

    sp = add("generate-data", cmd_generate_data, "sample and split agent trajectories")
    sp.add_argument("--out", required=True)
    sp = add("fit-predictor", cmd_fit_predictor, "fit the one-step predictor on the train split",
             data=True)
    sp.add_argument("--out", required=True)
    sp = add("calibrate", cmd_calibrate, "compute joint and benchmark region tables",
             data=True, model=True)
    sp.add_argument("--out", required=True)
    add("coverage", cmd_coverage, "empirical test coverage of both region tables",
        data=True, model=True, regions=True)
    sp = add("run", cmd_run, "one closed-loop episode", data=True, model=True, regions=True)
    sp.add_argument("--controller", choices=CONTROLLERS, required=True)
    sp.add_argument("--seed", type=int, required=True,
                    help="agent generator seed for the episode's trajectory")
    sp.add_argument("--out", help="write step records as JSON lines")
    sp = add("experiment", cmd_experiment, "full pipeline and exported report")
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int)
    sp = add("report", cmd_report, "summarize an exported experiment", config=False)
    sp.add_argument("dir")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CpmpcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
