"""Agent constraints and the geometry of the relaxed safe set.

The collision constraint is ``c(x, Y) = min_j ||p(x) - Y_j||_inf - margin``,
which is 1-Lipschitz in ``Y`` for both the infinity and the Euclidean norm on
the joint agent state.  A prediction region of radius ``C`` around
``Y_hat_j`` therefore turns the square of half-width ``margin + C`` around
``Y_hat_j`` into a predicted unsafe area.

At time ``t`` the regions issued at every ``s <= t`` for the same future
step ``tau`` are all valid, so the robot only has to escape one of them per
agent.  For squares this means escaping their intersection, which is again
an axis-aligned box.  The per-agent signed clearance to that box equals
``max_s (||p - Y_hat_{tau|s,j}||_inf - margin - C_{tau|s})`` exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .conformal import INFINITY, check_norm
from .errors import ConfigurationError, NotCertifiableError


def robot_position(x) -> np.ndarray:
    return np.asarray(x, dtype=float)[:2]


@dataclass(frozen=True)
class CollisionConstraint:
    """Minimum infinity-distance to any agent, minus a safety margin."""

    safety_margin: float
    lipschitz_L: float = 1.0
    norm: str = INFINITY
    position: Callable = robot_position

    def __post_init__(self):
        check_norm(self.norm)
        if self.safety_margin < 0:
            raise ConfigurationError("safety margin must be nonnegative")
        if self.lipschitz_L != 1.0:
            raise ConfigurationError("the min infinity-distance constraint is 1-Lipschitz")


def evaluate_c(constraint: CollisionConstraint, x, Y) -> float:
    """``c(x, Y)``; positive means safe.  ``+inf`` with no agents."""
    Y = np.asarray(Y, dtype=float)
    if Y.size == 0:
        return math.inf
    p = constraint.position(x)
    d = np.abs(Y.reshape(-1, p.size) - p).max(axis=1)
    return float(d.min() - constraint.safety_margin)


def tightened_constraint(constraint: CollisionConstraint, x, Y_hat, radius: float) -> float:
    """``c(x, Y_hat) - L * C``; nonnegative certifies safety for any truth in the region."""
    if not math.isfinite(radius):
        raise NotCertifiableError("constraint built on an infinite prediction radius")
    return evaluate_c(constraint, x, Y_hat) - constraint.lipschitz_L * radius


def relaxed_constraint_value(c: Callable, x, predictions: Sequence, radii: Sequence[float],
                             L: float = 1.0) -> float:
    """Generic ``max_s {c(x, Y_hat_s) - L C_s}`` over the finite radii."""
    vals = [c(x, y) - L * r for y, r in zip(predictions, radii) if math.isfinite(r)]
    if not vals:
        raise NotCertifiableError("all prediction radii are infinite")
    return max(vals)


@dataclass(frozen=True)
class UnsafeBox:
    """Open axis-aligned box; the boundary counts as safe."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))

    @property
    def empty(self) -> bool:
        return bool(np.any(self.lower > self.upper))

    def clearance(self, p) -> float:
        """Signed infinity-distance from ``p`` to the boundary (negative inside)."""
        p = np.asarray(p, dtype=float)
        return float(max(np.max(self.lower - p), np.max(p - self.upper)))

    def contains(self, p) -> bool:
        return not self.empty and self.clearance(p) < 0

    def subset_of(self, other: "UnsafeBox") -> bool:
        if self.empty:
            return True
        return bool(np.all(self.lower >= other.lower) and np.all(self.upper <= other.upper))

    def as_list(self):
        if self.empty:
            return "empty"
        out = []
        for lo, hi in zip(self.lower, self.upper):
            out += [float(lo), float(hi)]
        return out


def square(center, half_width: float) -> UnsafeBox:
    center = np.asarray(center, dtype=float)
    return UnsafeBox(center - half_width, center + half_width)


@dataclass(frozen=True)
class ConstraintSet:
    """Per-agent unsafe boxes for the state at ``tau`` planned at time ``t``."""

    t: int
    tau: int
    boxes: tuple[UnsafeBox, ...]
    provenance: tuple[int, ...]

    def is_safe(self, p) -> bool:
        return signed_clearance(self, p) >= 0

    @cached_property
    def _stacked(self):
        if not self.boxes:
            return np.empty((0, 2)), np.empty((0, 2)), np.empty(0, dtype=bool)
        lower = np.stack([b.lower for b in self.boxes])
        upper = np.stack([b.upper for b in self.boxes])
        nonempty = np.all(lower <= upper, axis=1)
        for a in (lower, upper, nonempty):
            a.setflags(write=False)
        return lower, upper, nonempty

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(lower, upper, nonempty)`` stacked over agents (read-only, cached)."""
        return self._stacked

    def subset_of(self, other: "ConstraintSet") -> bool:
        """Every box of ``self`` inside the matching box of ``other``.

        For unsafe boxes this means the safe set of ``self`` contains the safe
        set of ``other``.
        """
        return all(a.subset_of(b) for a, b in zip(self.boxes, other.boxes))

    def export(self) -> list[dict]:
        return [{"t": self.t, "tau": self.tau, "agent": j, "box": b.as_list()}
                for j, b in enumerate(self.boxes)]


def build_constraint_set(constraint: CollisionConstraint, predictions: Sequence,
                         radii: Sequence[float], t: int, tau: int) -> ConstraintSet:
    """Intersect, per agent, the squares issued at ``s = 0 .. t`` for step ``tau``.

    ``predictions[s]`` is ``Y_hat_{tau|s}`` with shape ``(N, p)`` and
    ``radii[s]`` is ``C_{tau|s}``.  Infinite radii cover the whole plane and
    do not shrink the intersection.
    """
    if len(predictions) != len(radii):
        raise ConfigurationError("predictions and radii must have equal length")
    used = [s for s, r in enumerate(radii) if math.isfinite(r)]
    if not used:
        raise NotCertifiableError(f"all radii infinite for (t={t}, tau={tau})")
    preds = np.asarray([predictions[s] for s in used], dtype=float)
    hw = constraint.safety_margin + constraint.lipschitz_L * np.asarray([radii[s] for s in used])
    lower = (preds - hw[:, None, None]).max(axis=0)
    upper = (preds + hw[:, None, None]).min(axis=0)
    boxes = tuple(UnsafeBox(lo, hi) for lo, hi in zip(lower, upper))
    return ConstraintSet(t, tau, boxes, tuple(used))


def signed_clearance(cset: ConstraintSet, p) -> float:
    """Smallest signed clearance over the nonempty boxes; ``+inf`` if none."""
    lower, upper, nonempty = cset.arrays()
    if not nonempty.any():
        return math.inf
    p = np.asarray(p, dtype=float)[:2]
    lo, hi = lower[nonempty], upper[nonempty]
    per_box = np.maximum((lo - p).max(axis=1), (p - hi).max(axis=1))
    return float(per_box.min())


def export_constraint_sets(sets: Sequence[ConstraintSet]) -> list[dict]:
    rows = []
    for cs in sets:
        rows.extend(cs.export())
    return rows
