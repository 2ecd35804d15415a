"""Agent trajectories, datasets and their on-disk format.

A trajectory is stored as an array of shape ``(T + 1, N, p)``: time index,
agent index, coordinate.  Time is a plain integer index; physical sampling
time only matters to the robot dynamics.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

SPLITS = ("train", "calib", "test")


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Trajectory:
    """Joint agent states ``Y_0 .. Y_T``."""

    states: np.ndarray

    def __post_init__(self):
        states = _frozen(self.states)
        if states.ndim != 3:
            raise ConfigurationError(
                f"trajectory states must have shape (T+1, N, p), got {states.shape}"
            )
        object.__setattr__(self, "states", states)

    @property
    def T(self) -> int:
        return self.states.shape[0] - 1

    @property
    def n_agents(self) -> int:
        return self.states.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def joint(self, t: int) -> np.ndarray:
        """Joint state at time ``t`` as an ``(N, p)`` array."""
        return self.states[t]

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.states.shape == other.states.shape and np.array_equal(
            self.states, other.states, equal_nan=True
        )

    def __hash__(self):
        return hash(self.states.tobytes())


@dataclass(frozen=True)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    train: tuple[int, ...] = ()
    calib: tuple[int, ...] = ()
    test: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        for name in SPLITS:
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))

    def __len__(self):
        return len(self.trajectories)

    @property
    def shape(self) -> tuple[int, int, int]:
        """``(T, N, p)`` of the first trajectory."""
        first = self.trajectories[0]
        return first.T, first.n_agents, first.dim

    def indices(self, split: str) -> tuple[int, ...]:
        if split not in SPLITS:
            raise ConfigurationError(f"unknown split {split!r}")
        return getattr(self, split)

    def array(self, split: str | None = None) -> np.ndarray:
        """Stack a split (or everything) into a ``(K, T+1, N, p)`` array."""
        idx = range(len(self)) if split is None else self.indices(split)
        trajs = [self.trajectories[i].states for i in idx]
        if not trajs:
            T, N, p = self.shape
            return np.empty((0, T + 1, N, p))
        return np.stack(trajs)

    @classmethod
    def from_array(cls, arr, train=(), calib=(), test=(), meta=None) -> "Dataset":
        arr = np.asarray(arr, dtype=float)
        return cls(tuple(Trajectory(a) for a in arr), train, calib, test, dict(meta or {}))


def split_dataset(trajs, n_train: int, n_calib: int, n_test: int, seed: int) -> Dataset:
    """Shuffle trajectory indices with ``seed`` and cut them into three splits."""
    trajs = [t if isinstance(t, Trajectory) else Trajectory(t) for t in trajs]
    counts = (n_train, n_calib, n_test)
    if any(int(c) != c or c < 0 for c in counts):
        raise ConfigurationError(f"split sizes must be nonnegative integers, got {counts}")
    if sum(counts) != len(trajs):
        raise ConfigurationError(
            f"split sizes {counts} sum to {sum(counts)} but there are {len(trajs)} trajectories"
        )
    if n_train < 1 or n_calib < 1:
        raise ConfigurationError("train and calibration splits need at least one trajectory")
    perm = np.random.default_rng(seed).permutation(len(trajs))
    train = tuple(sorted(perm[:n_train].tolist()))
    calib = tuple(sorted(perm[n_train:n_train + n_calib].tolist()))
    test = tuple(sorted(perm[n_train + n_calib:].tolist()))
    return Dataset(tuple(trajs), train, calib, test)


@dataclass
class ValidationReport:
    ok: bool
    problems: list[dict]

    def __bool__(self):
        return self.ok


def validate_dataset(d: Dataset) -> ValidationReport:
    """Check split partition, shape homogeneity and finiteness.

    Never raises; every problem found is listed with its location.
    """
    problems: list[dict] = []
    K = len(d)
    if K == 0:
        return ValidationReport(False, [{"kind": "empty"}])

    seen: dict[int, str] = {}
    for name in SPLITS:
        for i in d.indices(name):
            if not 0 <= i < K:
                problems.append({"kind": "index_out_of_range", "split": name, "index": i})
            elif i in seen:
                problems.append({"kind": "duplicate_index", "index": i, "splits": [seen[i], name]})
            else:
                seen[i] = name
    missing = sorted(set(range(K)) - set(seen))
    if missing:
        problems.append({"kind": "unassigned", "indices": missing})

    ref = d.trajectories[0].states.shape
    for i, traj in enumerate(d.trajectories):
        if traj.states.shape != ref:
            problems.append({
                "kind": "shape_mismatch", "trajectory": i,
                "expected": list(ref), "found": list(traj.states.shape),
            })
            continue
        bad = np.argwhere(~np.isfinite(traj.states))
        for t, j, _ in bad:
            problems.append({"kind": "non_finite", "trajectory": i, "t": int(t), "agent": int(j)})
    return ValidationReport(not problems, problems)


def save_dataset(d: Dataset, out_dir) -> Path:
    """Write ``dataset.json`` and ``trajectories.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    T, N, p = d.shape
    header = {
        "T": T, "N": N, "p": p, "K": len(d),
        "trajectories": "trajectories.csv",
        "split": {name: list(d.indices(name)) for name in SPLITS},
        "meta": d.meta,
    }
    with open(out_dir / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "t", "agent_id"] + [f"y_{k + 1}" for k in range(p)])
        for i, traj in enumerate(d.trajectories):
            for t in range(traj.states.shape[0]):
                for j in range(traj.states.shape[1]):
                    w.writerow([i, t, j] + [repr(float(v)) for v in traj.states[t, j]])
    path = out_dir / "dataset.json"
    path.write_text(json.dumps(header, indent=2) + "\n")
    return path


def load_dataset(path) -> Dataset:
    """Read a dataset from ``dataset.json`` (or the directory holding it)."""
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    header = json.loads(path.read_text())
    T, N, p, K = (int(header[k]) for k in ("T", "N", "p", "K"))
    arr = np.full((K, T + 1, N, p), np.nan)
    with open(path.parent / header.get("trajectories", "trajectories.csv"), newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            i, t, j = int(row[0]), int(row[1]), int(row[2])
            arr[i, t, j] = [float(v) for v in row[3:3 + p]]
    split = header.get("split", {})
    return Dataset.from_array(
        arr, split.get("train", ()), split.get("calib", ()), split.get("test", ()),
        header.get("meta", {}),
    )
