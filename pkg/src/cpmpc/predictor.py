"""One-step trajectory predictors rolled out recursively over the mission.

Given the observation at real time ``t`` a predictor produces estimates of
the joint agent state for every ``tau = t+1 .. T`` by repeatedly applying a
one-step map ``g`` to its own output.

Two model kinds ship:

* ``linear-affine``: ``g(y) = A y + b`` on the flattened joint state, fitted
  by ridge-regularized least squares on consecutive training pairs.
* ``constant-velocity``: extrapolates the last observed displacement.  At
  ``t = 0`` there is no predecessor and the velocity is taken as zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, PredictionError
from .trajectory import Trajectory

LINEAR = "linear-affine"
CONSTANT_VELOCITY = "constant-velocity"
KINDS = (LINEAR, CONSTANT_VELOCITY)

DEFAULT_RIDGE = 1e-6


@dataclass(frozen=True)
class OneStepModel:
    kind: str
    n_agents: int
    dim: int
    A: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown predictor kind {self.kind!r}")
        if self.kind == LINEAR:
            n = self.n_agents * self.dim
            A = np.array(self.A, dtype=float)
            b = np.array(self.b, dtype=float).reshape(-1)
            if A.shape != (n, n) or b.shape != (n,):
                raise ConfigurationError(
                    f"affine model needs A of shape {(n, n)} and b of shape {(n,)}, "
                    f"got {A.shape} and {b.shape}"
                )
            A.flags.writeable = False
            b.flags.writeable = False
            object.__setattr__(self, "A", A)
            object.__setattr__(self, "b", b)

    def step(self, y: np.ndarray) -> np.ndarray:
        """Apply the affine map to joint states of shape ``(..., N, p)``."""
        if self.kind != LINEAR:
            raise ConfigurationError("step() is only defined for the affine model")
        flat = y.reshape(y.shape[:-2] + (-1,))
        # divergence shows up as inf/nan and is reported by the callers
        with np.errstate(over="ignore", invalid="ignore"):
            out = flat @ self.A.T + self.b
        return out.reshape(y.shape)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "n_agents": self.n_agents, "dim": self.dim}
        if self.kind == LINEAR:
            d["A"] = [repr(float(v)) for v in self.A.ravel()]
            d["b"] = [repr(float(v)) for v in self.b]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OneStepModel":
        kind = d["kind"]
        N, p = int(d["n_agents"]), int(d["dim"])
        if kind == LINEAR:
            n = N * p
            A = np.array([float(v) for v in d["A"]]).reshape(n, n)
            b = np.array([float(v) for v in d["b"]])
            return cls(kind, N, p, A, b)
        return cls(kind, N, p)


def constant_velocity(n_agents: int, dim: int = 2) -> OneStepModel:
    return OneStepModel(CONSTANT_VELOCITY, n_agents, dim)


def save_model(model: OneStepModel, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model.to_dict(), indent=2) + "\n")
    return path


def load_model(path) -> OneStepModel:
    return OneStepModel.from_dict(json.loads(Path(path).read_text()))


def _as_array(train) -> np.ndarray:
    if isinstance(train, np.ndarray):
        return np.asarray(train, dtype=float)
    return np.stack([t.states if isinstance(t, Trajectory) else np.asarray(t) for t in train])


def ridge_objective(train, A, b, ridge: float) -> float:
    """Sum of squared one-step residuals plus ``ridge * ||A||_F^2``."""
    arr = _as_array(train)
    K, T1, N, p = arr.shape
    X = arr[:, :-1].reshape(-1, N * p)
    Z = arr[:, 1:].reshape(-1, N * p)
    resid = Z - X @ np.asarray(A).T - np.asarray(b)
    return float(np.sum(resid ** 2) + ridge * np.sum(np.asarray(A) ** 2))


def fit_linear_one_step(train, ridge: float = DEFAULT_RIDGE) -> OneStepModel:
    """Least-squares fit of ``Y_{t+1} ~ A Y_t + b`` over all training pairs.

    The offset ``b`` is not penalized.
    """
    if ridge < 0:
        raise ConfigurationError(f"ridge must be nonnegative, got {ridge}")
    arr = _as_array(train)
    if arr.ndim != 4 or arr.shape[0] == 0 or arr.shape[1] < 2:
        raise ConfigurationError("need at least one training trajectory with T >= 1")
    K, T1, N, p = arr.shape
    n = N * p
    X = arr[:, :-1].reshape(-1, n)
    Z = arr[:, 1:].reshape(-1, n)
    Xa = np.hstack([X, np.ones((X.shape[0], 1))])
    G = Xa.T @ Xa
    G[np.arange(n), np.arange(n)] += ridge
    if np.linalg.cond(G) > 1e14:
        raise PredictionError(
            "normal equations are singular or ill-conditioned; use a nonzero ridge"
        )
    W = np.linalg.solve(G, Xa.T @ Z)
    return OneStepModel(LINEAR, N, p, W[:n].T, W[n])


def predict_from(model: OneStepModel, observed, t: int, T: int, previous=None) -> np.ndarray:
    """Predictions ``Y_hat_{tau|t}`` for ``tau = t+1 .. T``, shape ``(T - t, N, p)``.

    ``previous`` is the observation at ``t - 1`` and is only used by the
    constant-velocity model.
    """
    if not 0 <= t < T:
        raise ConfigurationError(f"need 0 <= t < T, got t={t}, T={T}")
    y = np.asarray(observed, dtype=float)
    out = np.empty((T - t,) + y.shape)
    if model.kind == CONSTANT_VELOCITY:
        vel = np.zeros_like(y) if previous is None else y - np.asarray(previous, dtype=float)
        for k in range(T - t):
            out[k] = y + (k + 1) * vel
    else:
        cur = y
        for k in range(T - t):
            cur = model.step(cur)
            out[k] = cur
    bad = ~np.isfinite(out).reshape(T - t, -1).all(axis=1)
    if bad.any():
        tau = t + 1 + int(np.argmax(bad))
        raise PredictionError(f"non-finite prediction at tau={tau} (t={t})", tau=tau)
    return out


@dataclass(frozen=True)
class PredictionTable:
    """Predictions for every pair ``0 <= t < tau <= T`` of one trajectory.

    ``values[t, tau]`` holds ``Y_hat_{tau|t}``; entries with ``tau <= t`` are NaN.
    """

    values: np.ndarray

    @property
    def T(self) -> int:
        return self.values.shape[1] - 1

    def __getitem__(self, key) -> np.ndarray:
        t, tau = key
        if not 0 <= t < tau <= self.T:
            raise KeyError(key)
        return self.values[t, tau]

    def pairs(self):
        for t in range(self.T):
            for tau in range(t + 1, self.T + 1):
                yield t, tau


def pair_mask(T: int) -> np.ndarray:
    """Boolean ``(T, T+1)`` mask of valid ``(t, tau)`` pairs."""
    t = np.arange(T)[:, None]
    tau = np.arange(T + 1)[None, :]
    return tau > t


def build_prediction_tables(model: OneStepModel, trajs) -> np.ndarray:
    """Batched tables: ``(K, T+1, N, p)`` trajectories to ``(K, T, T+1, N, p)``.

    Each row ``t`` only reads the observation at ``t`` (and ``t - 1`` for
    constant velocity).
    """
    arr = _as_array(trajs)
    K, T1, N, p = arr.shape
    T = T1 - 1
    out = np.full((K, T, T1, N, p), np.nan)
    for t in range(T):
        obs = arr[:, t]
        if model.kind == CONSTANT_VELOCITY:
            vel = np.zeros_like(obs) if t == 0 else obs - arr[:, t - 1]
            for tau in range(t + 1, T1):
                out[:, t, tau] = obs + (tau - t) * vel
        else:
            cur = obs
            for tau in range(t + 1, T1):
                cur = model.step(cur)
                out[:, t, tau] = cur
    finite = np.isfinite(out[:, pair_mask(T)])
    if not finite.all():
        k = int(np.argwhere(~finite.reshape(K, -1).all(axis=1))[0, 0])
        raise PredictionError(f"non-finite prediction in trajectory {k}")
    return out


def build_prediction_table(model: OneStepModel, traj: Trajectory) -> PredictionTable:
    states = traj.states if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    return PredictionTable(build_prediction_tables(model, states[None])[0])
