"""Split conformal calibration of trajectory prediction regions.

Two calibrations are provided:

``joint``
    One normalized score per calibration trajectory, the maximum over all
    ``(t, tau)`` pairs of ``||Y_tau - Y_hat_{tau|t}|| / sigma_{tau|t}``.  A
    single order statistic ``R`` then scales every normalization factor, and
    the resulting radii hold simultaneously for all pairs with probability at
    least ``1 - delta``.

``benchmark``
    Separate scores for each pair with the failure budget split uniformly
    over the ``T`` real time steps.

All order statistics are taken on the score set augmented with ``+inf``.
Infinite radii are kept as ``math.inf`` and written to JSON as ``"inf"``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .predictor import PredictionTable, pair_mask
from .trajectory import Trajectory

INFINITY = "infinity"
EUCLIDEAN = "euclidean"
NORMS = (INFINITY, EUCLIDEAN)

SIGMA_FLOOR = 1e-9
JOINT = "joint"
BENCHMARK = "benchmark"
DELTA_SPLITS = ("uniform", "per_pair")


def check_norm(norm: str) -> str:
    if norm not in NORMS:
        raise ConfigurationError(f"norm must be one of {NORMS}, got {norm!r}")
    return norm


def joint_norm(diff: np.ndarray, norm: str = INFINITY) -> np.ndarray:
    """Norm of joint-state differences shaped ``(..., N, p)``."""
    flat = np.abs(diff.reshape(diff.shape[:-2] + (-1,)))
    if check_norm(norm) == INFINITY:
        return flat.max(axis=-1) if flat.shape[-1] else np.zeros(flat.shape[:-1])
    return np.sqrt(np.sum(flat ** 2, axis=-1))


def _stack(trajs, tables):
    if not isinstance(trajs, np.ndarray):
        trajs = np.stack([t.states if isinstance(t, Trajectory) else np.asarray(t) for t in trajs])
    if not isinstance(tables, np.ndarray):
        tables = np.stack([t.values if isinstance(t, PredictionTable) else np.asarray(t)
                           for t in tables])
    return np.asarray(trajs, dtype=float), np.asarray(tables, dtype=float)


def prediction_errors(trajs, tables, norm: str = INFINITY) -> np.ndarray:
    """``||Y_tau - Y_hat_{tau|t}||`` as ``(K, T, T+1)``; NaN where ``tau <= t``."""
    trajs, tables = _stack(trajs, tables)
    K, T1 = trajs.shape[:2]
    T = T1 - 1
    diff = trajs[:, None, :, :, :] - tables
    err = joint_norm(diff, norm)
    err[:, ~pair_mask(T)] = np.nan
    return err


@dataclass(frozen=True)
class NormalizationTable:
    """``sigma[t, tau]`` for all valid pairs, NaN elsewhere."""

    sigma: np.ndarray
    floor: float = SIGMA_FLOOR

    @property
    def T(self) -> int:
        return self.sigma.shape[1] - 1

    def __getitem__(self, key) -> float:
        t, tau = key
        if not 0 <= t < tau <= self.T:
            raise KeyError(key)
        return float(self.sigma[t, tau])


def compute_normalization(trajs, tables, norm: str = INFINITY,
                          floor: float = SIGMA_FLOOR) -> NormalizationTable:
    """Largest training prediction error per pair, floored at ``floor``."""
    if len(trajs) == 0:
        raise ConfigurationError("normalization needs at least one training trajectory")
    err = prediction_errors(trajs, tables, norm)
    T = err.shape[1]
    sigma = np.full(err.shape[1:], np.nan)
    mask = pair_mask(T)
    sigma[mask] = np.maximum(err[:, mask].max(axis=0), floor)
    sigma.flags.writeable = False
    return NormalizationTable(sigma, floor)


def compute_scores(trajs, tables, sigma: NormalizationTable, norm: str = INFINITY) -> np.ndarray:
    """One conformity score per calibration trajectory."""
    err = prediction_errors(trajs, tables, norm)
    mask = pair_mask(err.shape[1])
    return (err[:, mask] / sigma.sigma[mask]).max(axis=1)


def _delta_fraction(delta) -> Fraction:
    # delta is read as the decimal it prints as, so 0.1 means exactly 1/10
    if isinstance(delta, Fraction):
        return delta
    return Fraction(Decimal(repr(float(delta))))


def quantile_index(n_calib: int, delta) -> tuple[int, bool]:
    """Rank ``k = ceil((n + 1)(1 - delta))`` and whether it hits the appended infinity."""
    if n_calib < 1:
        raise ConfigurationError("calibration set is empty")
    d = _delta_fraction(delta)
    if not 0 < d < 1:
        raise ConfigurationError(f"delta must lie in (0, 1), got {float(delta)}")
    k = math.ceil((n_calib + 1) * (1 - d))
    return k, k > n_calib


def min_calibration_size(delta) -> int:
    """Smallest ``n`` with ``ceil((n + 1)(1 - delta)) <= n``."""
    d = _delta_fraction(delta)
    n = max(1, math.ceil(1 / d) - 1)
    while quantile_index(n, d)[1]:
        n += 1
    while n > 1 and not quantile_index(n - 1, d)[1]:
        n -= 1
    return n


def kth_smallest(scores, k: int) -> float:
    """``k``-th smallest (1-based) of ``scores`` with ``+inf`` appended."""
    scores = np.asarray(scores, dtype=float)
    if k > scores.size:
        return math.inf
    return float(np.sort(scores, kind="stable")[k - 1])


@dataclass(frozen=True)
class RegionTable:
    """Prediction-region radii ``C[t, tau]`` (NaN outside valid pairs)."""

    method: str
    delta: float
    radii: np.ndarray
    R: float | None = None
    k: int | None = None
    sigma: np.ndarray | None = None
    n_calib: int | None = None
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def T(self) -> int:
        return self.radii.shape[1] - 1

    def radius(self, t: int, tau: int) -> float:
        if not 0 <= t < tau <= self.T:
            raise KeyError((t, tau))
        return float(self.radii[t, tau])

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.radii[pair_mask(self.T)]).all())

    def to_dict(self) -> dict:
        def enc(v):
            return "inf" if math.isinf(v) else repr(float(v))

        entries = []
        for t in range(self.T):
            for tau in range(t + 1, self.T + 1):
                e = {"t": t, "tau": tau, "radius": enc(self.radii[t, tau])}
                e["sigma"] = enc(self.sigma[t, tau]) if self.sigma is not None else None
                entries.append(e)
        return {
            "method": self.method,
            "delta": self.delta,
            "R": None if self.R is None else enc(self.R),
            "k": self.k,
            "n_calib": self.n_calib,
            "T": self.T,
            "extra": self.extra,
            "entries": entries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegionTable":
        def dec(v):
            return math.inf if v == "inf" else float(v)

        T = int(d["T"])
        radii = np.full((T, T + 1), np.nan)
        sigma = None
        for e in d["entries"]:
            radii[e["t"], e["tau"]] = dec(e["radius"])
            if e.get("sigma") is not None:
                if sigma is None:
                    sigma = np.full((T, T + 1), np.nan)
                sigma[e["t"], e["tau"]] = dec(e["sigma"])
        R = None if d.get("R") is None else dec(d["R"])
        return cls(d["method"], float(d["delta"]), radii, R, d.get("k"), sigma,
                   d.get("n_calib"), d.get("extra", {}))


def save_regions(region: RegionTable, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(region.to_dict(), indent=2) + "\n")
    return path


def load_regions(path) -> RegionTable:
    return RegionTable.from_dict(json.loads(Path(path).read_text()))


def calibrate_joint(scores, sigma: NormalizationTable, delta) -> RegionTable:
    """Single-quantile calibration: ``C[t, tau] = R * sigma[t, tau]``."""
    scores = np.asarray(scores, dtype=float)
    k, infinite = quantile_index(scores.size, delta)
    R = math.inf if infinite else kth_smallest(scores, k)
    radii = R * sigma.sigma
    radii.flags.writeable = False
    return RegionTable(JOINT, float(delta), radii, R, k, sigma.sigma, int(scores.size))


def benchmark_delta(delta, T: int, split: str = "uniform") -> Fraction:
    if split not in DELTA_SPLITS:
        raise ConfigurationError(f"benchmark_delta_split must be one of {DELTA_SPLITS}")
    d = _delta_fraction(delta)
    return d / T if split == "uniform" else d


def calibrate_benchmark(trajs, tables, delta, T: int | None = None,
                        split: str = "uniform") -> RegionTable:
    """Per-pair calibration on infinity-norm errors with a per-pair budget."""
    err = prediction_errors(trajs, tables, INFINITY)
    n, T_data = err.shape[0], err.shape[1]
    if T is None:
        T = T_data
    if T != T_data:
        raise ConfigurationError(f"horizon {T} does not match tables with T={T_data}")
    dbar = benchmark_delta(delta, T, split)
    k, infinite = quantile_index(n, dbar)
    mask = pair_mask(T)
    radii = np.full((T, T + 1), np.nan)
    if infinite:
        radii[mask] = math.inf
    else:
        radii[mask] = np.sort(err[:, mask], axis=0, kind="stable")[k - 1]
    radii.flags.writeable = False
    return RegionTable(BENCHMARK, float(delta), radii, None, k, None, int(n),
                       {"pair_delta": float(dbar), "delta_split": split})


@dataclass
class MembershipReport:
    inside: bool
    violations: list[dict]
    min_slack: float

    def __bool__(self):
        return self.inside


def check_membership(region: RegionTable, table, truth, norm: str = INFINITY) -> MembershipReport:
    """Is every ``||Y_tau - Y_hat_{tau|t}||`` within its radius?"""
    values = table.values if isinstance(table, PredictionTable) else np.asarray(table)
    states = truth.states if isinstance(truth, Trajectory) else np.asarray(truth)
    err = prediction_errors(states[None], values[None], norm)[0]
    violations = []
    min_slack = math.inf
    for t in range(region.T):
        for tau in range(t + 1, region.T + 1):
            r = region.radii[t, tau]
            slack = r - err[t, tau] if math.isfinite(r) else math.inf
            min_slack = min(min_slack, slack)
            if not err[t, tau] <= r:
                violations.append({"t": t, "tau": tau, "error": float(err[t, tau]),
                                   "radius": float(r), "slack": float(slack)})
    return MembershipReport(not violations, violations, float(min_slack))


def coverage_mask(region: RegionTable, trajs, tables, norm: str = INFINITY) -> np.ndarray:
    """Vectorized membership: one boolean per trajectory."""
    err = prediction_errors(trajs, tables, norm)
    mask = pair_mask(region.T)
    return np.all(err[:, mask] <= region.radii[mask], axis=1)


def coverage_by_time(region: RegionTable, trajs, tables, norm: str = INFINITY) -> np.ndarray:
    """``(K, T)`` booleans: trajectory inside every region issued at planning time ``t``.

    This is the event the per-pair scheme is calibrated for (one planning
    time, all future steps); ``coverage_mask`` is its conjunction over ``t``.
    """
    err = prediction_errors(trajs, tables, norm)
    ok = (err <= region.radii) | ~pair_mask(region.T)
    return ok.all(axis=2)
