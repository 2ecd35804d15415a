"""Kinematic bicycle model, mission data and the tracking cost.

State ``x = [p_x, p_y, theta, v]`` (m, m, rad, m/s), input
``u = [phi, a]`` (steering rad, acceleration m/s^2).  Angles are never
wrapped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

STATE_DIM = 4
INPUT_DIM = 2


@dataclass(frozen=True)
class BicycleParams:
    length: float = 0.5
    dt: float = 1.0 / 8.0
    phi_max: float = math.pi / 6
    a_max: float = 5.0

    def __post_init__(self):
        if self.length <= 0 or self.dt <= 0:
            raise ConfigurationError("bicycle length and sampling time must be positive")
        if self.phi_max <= 0 or self.a_max <= 0:
            raise ConfigurationError("input bounds must be positive")

    @property
    def input_lower(self) -> np.ndarray:
        return np.array([-self.phi_max, -self.a_max])

    @property
    def input_upper(self) -> np.ndarray:
        return np.array([self.phi_max, self.a_max])


def bicycle_step(x, u, params: BicycleParams) -> np.ndarray:
    px, py, theta, v = (float(s) for s in x)
    phi, a = float(u[0]), float(u[1])
    dt = params.dt
    return np.array([
        px + dt * v * math.cos(theta),
        py + dt * v * math.sin(theta),
        theta + dt * (v / params.length) * math.tan(phi),
        v + dt * a,
    ])


def rollout(x0, inputs, params: BicycleParams) -> np.ndarray:
    """States ``x_0 .. x_H`` for ``H = len(inputs)``."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, INPUT_DIM)
    states = np.empty((len(inputs) + 1, STATE_DIM))
    states[0] = np.asarray(x0, dtype=float)
    for k, u in enumerate(inputs):
        states[k + 1] = bicycle_step(states[k], u, params)
    return states


@dataclass(frozen=True)
class MissionSpec:
    """Shrinking-horizon mission: reach ``target`` at ``T`` within ``terminal_tol``.

    Only the terminal infinity-ball restricts the state; all other time steps
    are unconstrained.  The cost is the sum over ``t = 0 .. T`` of squared
    Euclidean distance from position to target.
    """

    T: int = 20
    x0: tuple = (3.5, -3.0, 2.49, 0.0)
    target: tuple = (-1.8, 1.0)
    terminal_tol: float = 0.05
    params: BicycleParams = field(default_factory=BicycleParams)

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ConfigurationError("mission horizon T must be a positive integer")
        if len(self.x0) != STATE_DIM or len(self.target) != 2:
            raise ConfigurationError("x0 needs 4 entries and target 2")
        if self.terminal_tol < 0:
            raise ConfigurationError("terminal tolerance must be nonnegative")
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        object.__setattr__(self, "target", tuple(float(v) for v in self.target))

    def terminal_violation(self, x) -> float:
        """``||p - target||_inf - tol``; feasible iff ``<= 0``."""
        p = np.asarray(x, dtype=float)[:2]
        return float(np.abs(p - np.asarray(self.target)).max() - self.terminal_tol)


def stage_cost(x, target) -> float:
    dx = float(x[0]) - target[0]
    dy = float(x[1]) - target[1]
    return dx * dx + dy * dy


def evaluate_cost(states, inputs, spec: MissionSpec) -> float:
    states = np.asarray(states, dtype=float).reshape(-1, STATE_DIM)
    inputs = np.asarray(inputs, dtype=float).reshape(-1, INPUT_DIM)
    if len(states) != len(inputs) + 1:
        raise ConfigurationError(
            f"need one more state than inputs, got {len(states)} and {len(inputs)}"
        )
    return float(sum(stage_cost(x, spec.target) for x in states))
