"""Shrinking-horizon MPC with conformal collision constraints.

At each real time ``t`` the controller plans inputs ``u_{t|t} .. u_{T-1|t}``
by single shooting through the bicycle model.  Future positions must reach
the terminal ball at ``T`` and stay outside the unsafe boxes of every
``tau = t+1 .. T``.

``proposed``
    Boxes for ``tau`` are running intersections of every square issued at
    ``s = 0 .. t``.  They only shrink, so the tail of a feasible plan stays
    feasible and the problem remains solvable for the whole mission.
``benchmark``
    Boxes come only from the newest predictions with per-pair radii.

The solver minimizes cost plus a quadratic penalty with an increasing weight
from several starts.  Whatever the solver reports, a candidate is accepted
only after exact re-evaluation of every constraint on the numpy rollout.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .conformal import RegionTable
from .constraints import CollisionConstraint, ConstraintSet, UnsafeBox, evaluate_c
from .dynamics import MissionSpec, bicycle_step, evaluate_cost, rollout
from .errors import ConfigurationError, MpcInfeasibleError, NotCertifiableError
from .predictor import OneStepModel, predict_from
from .trajectory import Trajectory

log = logging.getLogger(__name__)

PROPOSED = "proposed"
BENCHMARK = "benchmark"
CONTROLLERS = (PROPOSED, BENCHMARK)


@dataclass(frozen=True)
class SolverConfig:
    random_starts: int = 8
    # used instead when the shifted previous plan already certifies
    warm_random_starts: int = 2
    feas_tol: float = 1e-6
    max_iter: int = 200
    mu0: float = 10.0
    mu_growth: float = 10.0
    mu_max: float = 1e8
    clearance_margin: float = 1e-3
    terminal_margin: float = 1e-3
    perturb_scale: float = 0.4

    def __post_init__(self):
        if self.random_starts < 0 or self.warm_random_starts < 0 or self.max_iter < 1:
            raise ConfigurationError("random starts must be >= 0 and max_iter >= 1")
        if not (self.feas_tol >= 0 and self.mu0 > 0 and self.mu_growth > 1):
            raise ConfigurationError("invalid penalty schedule")

    def schedule(self, mu0: float | None = None) -> list[float]:
        mu = self.mu0 if mu0 is None else mu0
        out = []
        while mu <= self.mu_max * (1 + 1e-12):
            out.append(mu)
            mu *= self.mu_growth
        return out


@dataclass
class MpcProblem:
    t: int
    x_t: np.ndarray
    mission: MissionSpec
    constraint_sets: Sequence[ConstraintSet]
    warm_start: np.ndarray | None = None

    def __post_init__(self):
        self.x_t = np.asarray(self.x_t, dtype=float)
        H = self.horizon
        if H < 1:
            raise ConfigurationError(f"no inputs left to plan at t={self.t}")
        if len(self.constraint_sets) != H:
            raise ConfigurationError(
                f"need constraint sets for tau={self.t + 1}..{self.mission.T}, "
                f"got {len(self.constraint_sets)}"
            )
        for k, cs in enumerate(self.constraint_sets):
            if cs.tau != self.t + 1 + k:
                raise ConfigurationError(f"constraint set {k} is for tau={cs.tau}")

    @property
    def horizon(self) -> int:
        return self.mission.T - self.t

    def box_arrays(self):
        """``(lo, hi, valid)`` padded to the largest agent count; computed once."""
        if getattr(self, "_boxes", None) is None:
            self._boxes = self._stack_boxes()
        return self._boxes

    def _stack_boxes(self):
        H = self.horizon
        M = max((len(cs.boxes) for cs in self.constraint_sets), default=0)
        lo = np.zeros((H, M, 2))
        hi = np.zeros((H, M, 2))
        valid = np.zeros((H, M), dtype=np.bool_)
        for k, cs in enumerate(self.constraint_sets):
            if cs.boxes:
                lower, upper, nonempty = cs.arrays()
                n = len(cs.boxes)
                lo[k, :n] = lower
                hi[k, :n] = upper
                valid[k, :n] = nonempty
        return lo, hi, valid


@dataclass
class Certificate:
    states: np.ndarray
    violations: dict
    worst: dict
    clearances: list

    @property
    def max_violation(self) -> float:
        return max(self.violations.values())

    @property
    def min_clearance(self) -> float:
        return min(self.clearances, default=math.inf)


def certify(problem: MpcProblem, inputs) -> Certificate:
    """Exact re-evaluation of every constraint for an input sequence."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, 2)
    params = problem.mission.params
    states = rollout(problem.x_t, inputs, params)
    worst = {"kind": None, "tau": None, "agent": None, "value": 0.0}

    def note(kind, value, tau=None, agent=None):
        if value > worst["value"]:
            worst.update(kind=kind, tau=tau, agent=agent, value=float(value))

    v_in = 0.0
    if len(inputs):
        per_step = np.maximum(params.input_lower - inputs, inputs - params.input_upper).max(axis=1)
        k = int(np.argmax(per_step))
        v_in = max(float(per_step[k]), 0.0)
        note("input", v_in, problem.t + k)

    v_term = max(problem.mission.terminal_violation(states[-1]), 0.0)
    note("terminal", v_term, problem.mission.T)

    v_clr = 0.0
    lo, hi, valid = problem.box_arrays()
    if valid.size:
        p = states[1:, None, :2]
        per_box = np.maximum((lo - p).max(axis=2), (p - hi).max(axis=2))
        per_box = np.where(valid, per_box, np.inf)
        clearances = per_box.min(axis=1).tolist()
        k, j = np.unravel_index(np.argmin(per_box), per_box.shape)
        v_clr = max(-float(per_box[k, j]), 0.0)
        note("clearance", v_clr, problem.constraint_sets[k].tau, int(j))
    else:
        clearances = [math.inf] * problem.horizon
    violations = {"dynamics": 0.0, "input": v_in, "terminal": v_term, "clearance": v_clr}
    return Certificate(states, violations, worst, clearances)


@dataclass
class MpcSolution:
    t: int
    states: np.ndarray
    inputs: np.ndarray
    cost: float
    feasible: bool
    violation: float
    certificate: dict
    min_clearance: float
    starts: int = 0
    iterations: int = 0
    chosen: int = 0


def shift_warm_start(prev: MpcSolution) -> tuple[np.ndarray, np.ndarray]:
    """Tail of a previous plan: ``(states x_{t+1|t}.., inputs u_{t+1|t}..)``."""
    return prev.states[1:].copy(), prev.inputs[1:].copy()


def heuristic_inputs(x0, mission: MissionSpec, H: int) -> np.ndarray:
    """Steer at the target and pace the speed to arrive at the end of the horizon."""
    params = mission.params
    target = np.asarray(mission.target)
    x = np.asarray(x0, dtype=float)
    U = np.zeros((H, 2))
    for k in range(H):
        delta = target - x[:2]
        heading = math.atan2(delta[1], delta[0])
        err = (heading - x[2] + math.pi) % (2 * math.pi) - math.pi
        v = max(abs(x[3]), 0.2)
        phi = math.atan(err * params.length / (params.dt * v))
        remaining = H - k
        v_des = float(np.linalg.norm(delta)) / (params.dt * max(remaining - 1, 1))
        a = (v_des - x[3]) / params.dt
        U[k] = np.clip([phi, a], params.input_lower, params.input_upper)
        x = bicycle_step(x, U[k], params)
    return U


def _perturb(base, rng, params, scale, block=4):
    H = base.shape[0]
    n_blocks = -(-H // block)
    span = params.input_upper - params.input_lower
    noise = rng.normal(size=(n_blocks, 2)) * scale * span / 2
    noise = np.repeat(noise, block, axis=0)[:H]
    return np.clip(base + noise, params.input_lower, params.input_upper)


def _descend(problem, U0, cfg, lo, hi, valid, mu0):
    m = problem.mission
    params = m.params
    tol = max(m.terminal_tol - cfg.terminal_margin, 0.5 * m.terminal_tol)
    U = np.ascontiguousarray(U0, dtype=float)
    scratch = np.empty_like(U)
    iters = 0
    for mu in cfg.schedule(mu0):
        U, f, cost, pen, it = _kernels.spg(
            U, params.input_lower, params.input_upper, problem.x_t, params.dt, params.length,
            m.target[0], m.target[1], tol, lo, hi, valid, cfg.clearance_margin, mu, cfg.max_iter,
        )
        iters += it
        if pen == 0.0:
            break
        # stop once the untightened constraints hold; later stages only move within the margin
        _, _, true_pen = _kernels.penalized_objective(
            U, problem.x_t, params.dt, params.length, m.target[0], m.target[1],
            m.terminal_tol, lo, hi, valid, 0.0, 1.0, scratch,
        )
        if true_pen <= (0.01 * cfg.feas_tol) ** 2:
            break
    return U, iters


def solve_step(problem: MpcProblem, cfg: SolverConfig = SolverConfig(), rng=None) -> MpcSolution:
    """Solve one shrinking-horizon problem and certify the answer.

    Candidates are the untouched warm start (if any), then local descents
    from the warm start, the heuristic and random perturbations.  The
    cheapest certified candidate wins, ties going to the earlier one.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    H = problem.horizon
    params = problem.mission.params
    lo, hi, valid = problem.box_arrays()

    starts: list[tuple[np.ndarray, float | None]] = []
    n_random = cfg.random_starts
    if problem.warm_start is not None:
        ws = np.asarray(problem.warm_start, dtype=float).reshape(H, 2)
        starts.append((ws, None))
        starts.append((ws, cfg.mu0 * cfg.mu_growth ** 3))
        base = ws
        if certify(problem, ws).max_violation <= cfg.feas_tol:
            n_random = min(n_random, cfg.warm_random_starts)
    else:
        base = heuristic_inputs(problem.x_t, problem.mission, H)
    starts.append((heuristic_inputs(problem.x_t, problem.mission, H), cfg.mu0))
    for _ in range(n_random):
        starts.append((_perturb(base, rng, params, cfg.perturb_scale), cfg.mu0))

    best = None
    fallback = None
    total_iters = 0
    for idx, (U0, mu0) in enumerate(starts):
        if mu0 is None:
            U = U0
        else:
            U, it = _descend(problem, U0, cfg, lo, hi, valid, mu0)
            total_iters += it
        cert = certify(problem, U)
        cost = evaluate_cost(cert.states, U, problem.mission)
        viol = cert.max_violation
        if viol <= cfg.feas_tol:
            if best is None or cost < best[0]:
                best = (cost, idx, U, cert)
        elif fallback is None or viol < fallback[0]:
            fallback = (viol, idx, U, cert)

    if best is None:
        viol, idx, U, cert = fallback
        report = dict(cert.worst)
        report.update(t=problem.t, max_violation=float(viol), starts=len(starts))
        raise MpcInfeasibleError(
            f"no certified solution at t={problem.t}: worst {report['kind']} "
            f"violation {viol:.3g} at tau={report['tau']} agent={report['agent']}",
            report,
        )
    cost, idx, U, cert = best
    return MpcSolution(
        t=problem.t, states=cert.states, inputs=np.array(U), cost=float(cost), feasible=True,
        violation=float(cert.max_violation), certificate=dict(cert.violations),
        min_clearance=float(cert.min_clearance), starts=len(starts), iterations=total_iters,
        chosen=idx,
    )


class Controller:
    """Builds the per-step constraint sets from fresh predictions."""

    kind = ""

    def __init__(self, mission: MissionSpec, constraint: CollisionConstraint, regions: RegionTable):
        if regions.T != mission.T:
            raise ConfigurationError(
                f"regions calibrated for T={regions.T}, mission has T={mission.T}"
            )
        self.mission = mission
        self.constraint = constraint
        self.regions = regions

    def reset(self):
        pass

    def constraint_sets(self, t: int, predictions: np.ndarray) -> list[ConstraintSet]:
        raise NotImplementedError

    def boxes_snapshot(self) -> np.ndarray | None:
        return None


class ProposedController(Controller):
    """Keeps, per future step, the running intersection of all issued squares."""

    kind = PROPOSED

    def reset(self):
        self._lower = None
        self._upper = None
        self._prov: list[list[int]] = []

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.reset()

    def constraint_sets(self, t, predictions):
        T = self.mission.T
        predictions = np.asarray(predictions, dtype=float)
        N, p = predictions.shape[1:]
        if self._lower is None:
            self._lower = np.full((T + 1, N, p), -np.inf)
            self._upper = np.full((T + 1, N, p), np.inf)
            self._prov = [[] for _ in range(T + 1)]
        sets = []
        for k, tau in enumerate(range(t + 1, T + 1)):
            r = self.regions.radius(t, tau)
            if math.isfinite(r):
                hw = self.constraint.safety_margin + self.constraint.lipschitz_L * np.asarray([r])
                np.maximum(self._lower[tau], predictions[k] - hw[0], out=self._lower[tau])
                np.minimum(self._upper[tau], predictions[k] + hw[0], out=self._upper[tau])
                self._prov[tau].append(t)
            if not self._prov[tau]:
                raise NotCertifiableError(f"all radii infinite for tau={tau} up to t={t}")
            boxes = tuple(UnsafeBox(lo.copy(), hi.copy())
                          for lo, hi in zip(self._lower[tau], self._upper[tau]))
            sets.append(ConstraintSet(t, tau, boxes, tuple(self._prov[tau])))
        return sets

    def boxes_snapshot(self):
        if self._lower is None:
            return None
        return np.stack([self._lower, self._upper], axis=-1).copy()


class BenchmarkController(Controller):
    """Uses only the newest predictions and their per-pair radii."""

    kind = BENCHMARK

    def constraint_sets(self, t, predictions):
        T = self.mission.T
        predictions = np.asarray(predictions, dtype=float)
        sets = []
        for k, tau in enumerate(range(t + 1, T + 1)):
            r = self.regions.radius(t, tau)
            if not math.isfinite(r):
                raise NotCertifiableError(f"infinite benchmark radius at (t={t}, tau={tau})")
            hw = self.constraint.safety_margin + self.constraint.lipschitz_L * r
            boxes = tuple(UnsafeBox(y - hw, y + hw) for y in predictions[k])
            sets.append(ConstraintSet(t, tau, boxes, (t,)))
        return sets


def make_controller(kind, mission, constraint, regions) -> Controller:
    if kind == PROPOSED:
        return ProposedController(mission, constraint, regions)
    if kind == BENCHMARK:
        return BenchmarkController(mission, constraint, regions)
    raise ConfigurationError(f"controller must be one of {CONTROLLERS}, got {kind!r}")


@dataclass
class EpisodeLog:
    controller: str
    seed: int
    steps: list[dict] = field(default_factory=list)
    boxes: list = field(default_factory=list)
    panels: dict = field(default_factory=dict)
    states: np.ndarray | None = None

    @property
    def feasible_at_start(self) -> bool:
        return bool(self.steps) and bool(self.steps[0]["feasible"])

    @property
    def feasible_all(self) -> bool:
        return all(s["feasible"] for s in self.steps if s["t"] < len(self.steps) - 1)

    @property
    def infeasible_steps(self) -> list[int]:
        return [s["t"] for s in self.steps if s["feasible"] is False]

    @property
    def safe_all(self) -> bool:
        return all(s["realized_c"] >= 0 for s in self.steps)

    @property
    def terminal_error(self) -> float:
        return self.steps[-1]["terminal_error"]

    @property
    def warm_start_certified(self) -> list[bool | None]:
        return [s["warm_start_certified"] for s in self.steps if s["t"] < len(self.steps) - 1]

    def summary(self) -> dict:
        return {
            "controller": self.controller,
            "seed": self.seed,
            "feasible_at_start": self.feasible_at_start,
            "feasible_all": self.feasible_all,
            "infeasible_steps": self.infeasible_steps,
            "safe_all": self.safe_all,
            "terminal_error": self.terminal_error,
            "realized_cost": self.steps[-1]["realized_cost"],
        }


def jsonable(obj):
    """Replace non-finite floats and numpy scalars so ``json`` emits strict JSON."""
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isfinite(v):
            return v
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return obj


def run_closed_loop(controller: Controller, model: OneStepModel, true_agents: Trajectory,
                    solver: SolverConfig = SolverConfig(), seed: int = 0,
                    record_boxes: bool = False, panel_times=()) -> EpisodeLog:
    """Simulate one mission against a realized agent trajectory.

    After an infeasible step the plan is dropped and zero steering and zero
    acceleration are applied; the next step solves from scratch.
    """
    mission = controller.mission
    constraint = controller.constraint
    params = mission.params
    T = mission.T
    Y = true_agents.states if isinstance(true_agents, Trajectory) else np.asarray(true_agents)
    if Y.shape[0] != T + 1:
        raise ConfigurationError(f"agent trajectory has {Y.shape[0]} states, mission needs {T + 1}")
    controller.reset()
    ep = EpisodeLog(controller.kind, int(seed))
    x = np.asarray(mission.x0, dtype=float)
    xs = [x]
    prev: MpcSolution | None = None
    realized_cost = 0.0

    for t in range(T):
        realized_c = evaluate_c(constraint, x, Y[t])
        realized_cost += (x[0] - mission.target[0]) ** 2 + (x[1] - mission.target[1]) ** 2
        preds = predict_from(model, Y[t], t, T, previous=Y[t - 1] if t > 0 else None)
        rec = {"t": t, "controller": controller.kind, "seed": int(seed),
               "x": [float(v) for v in x], "realized_c": realized_c}
        rng = np.random.default_rng([int(seed), t])
        try:
            sets = controller.constraint_sets(t, preds)
        except NotCertifiableError as exc:
            sets = None
            rec.update(feasible=False, reason=str(exc))
        if record_boxes:
            ep.boxes.append(controller.boxes_snapshot())
        if sets is not None and t in panel_times:
            ep.panels[t] = sets[-1].export()

        warm = None
        sol = None
        rec["warm_start_certified"] = None
        rec["warm_start_violation"] = None
        if sets is not None:
            if prev is not None:
                warm = shift_warm_start(prev)[1]
                wcert = certify(MpcProblem(t, x, mission, sets), warm)
                rec["warm_start_violation"] = float(wcert.max_violation)
                rec["warm_start_certified"] = bool(wcert.max_violation <= solver.feas_tol)
            problem = MpcProblem(t, x, mission, sets, warm)
            try:
                sol = solve_step(problem, solver, rng)
            except MpcInfeasibleError as exc:
                sol = None
                rec.update(feasible=False, reason=str(exc), worst=exc.report)
            if sol is not None:
                rec.update(feasible=True, cost=sol.cost, min_clearance=sol.min_clearance,
                           violation=sol.violation,
                           solver={"starts": sol.starts, "iterations": sol.iterations,
                                   "chosen": sol.chosen})
        prev = sol
        u = prev.inputs[0] if prev is not None else np.zeros(2)
        rec["u"] = [float(v) for v in u]
        rec.setdefault("cost", None)
        rec.setdefault("min_clearance", None)
        rec.setdefault("solver", {"starts": 0, "iterations": 0})
        ep.steps.append(rec)
        x = bicycle_step(x, u, params)
        xs.append(x)

    realized_cost += (x[0] - mission.target[0]) ** 2 + (x[1] - mission.target[1]) ** 2
    ep.steps.append({
        "t": T, "controller": controller.kind, "seed": int(seed), "feasible": None,
        "x": [float(v) for v in x],
        "realized_c": evaluate_c(constraint, x, Y[T]),
        "terminal_error": float(np.abs(x[:2] - np.asarray(mission.target)).max()),
        "terminal_tol": mission.terminal_tol,
        "realized_cost": float(realized_cost),
        "warm_start_certified": None,
    })
    ep.states = np.array(xs)
    return ep
