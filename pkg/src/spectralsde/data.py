"""Trajectory container and the JSON-lines dataset format.

One line per trajectory:

    {"id": ..., "context": [...], "obs": [{"t","y","mask"}...],
     "control": [{"t0","t1","u"}...], "truth": [{"t","x"}...]?,
     "meta": {"spec": {...}, "seed": ...}}

Every number is a 17-significant-digit decimal string so files round-trip
bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError
from .filtering import Observation
from .io_utils import fmt_float, parse_float
from .solver import ControlSignal


@dataclass
class Trajectory:
    """Context vector, irregular observations, control and optional truth."""

    id: str
    context: np.ndarray
    observations: list
    control: ControlSignal
    truth: Optional[list] = None  # list of (t, state-vector)
    meta: dict = field(default_factory=dict)
    t0: float = 0.0

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=float).reshape(-1)
        times = [o.t for o in self.observations]
        if any(b < a for a, b in zip(times, times[1:])):
            raise DataError(f"trajectory {self.id}: observations not sorted")

    @property
    def horizon(self) -> float:
        ts = [self.t0]
        ts += [o.t for o in self.observations]
        ts += [seg[1] for seg in self.control.segments]
        if self.truth:
            ts.append(self.truth[-1][0])
        return max(ts)


def trajectory_to_json(traj: Trajectory) -> dict:
    obj = {
        "id": traj.id,
        "context": [fmt_float(c) for c in traj.context],
        "obs": [
            {
                "t": fmt_float(o.t),
                "y": [fmt_float(v) for v in o.y],
                "mask": [bool(b) for b in o.mask],
            }
            for o in traj.observations
        ],
        "control": [
            {"t0": fmt_float(a), "t1": fmt_float(b), "u": [fmt_float(v) for v in u]}
            for a, b, u in traj.control.segments
        ],
        "meta": traj.meta,
    }
    if traj.truth is not None:
        obj["truth"] = [
            {"t": fmt_float(t), "x": [fmt_float(v) for v in x]} for t, x in traj.truth
        ]
    return obj


def trajectory_from_json(obj: dict) -> Trajectory:
    try:
        obs = [
            Observation(
                t=parse_float(o["t"]),
                y=[parse_float(v) for v in o["y"]],
                mask=o["mask"],
            )
            for o in obj["obs"]
        ]
        control = ControlSignal(
            tuple(
                (parse_float(s["t0"]), parse_float(s["t1"]),
                 [parse_float(v) for v in s["u"]])
                for s in obj["control"]
            )
        )
        truth = None
        if "truth" in obj:
            truth = [
                (parse_float(p["t"]), np.asarray([parse_float(v) for v in p["x"]]))
                for p in obj["truth"]
            ]
        return Trajectory(
            id=obj["id"],
            context=[parse_float(c) for c in obj["context"]],
            observations=obs,
            control=control,
            truth=truth,
            meta=obj.get("meta", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed trajectory record: {exc}") from exc


def save_dataset(trajectories, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(json.dumps(trajectory_to_json(traj),
                                sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_dataset(path) -> list:
    out = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open dataset {path}: {exc}") from exc
    with fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            out.append(trajectory_from_json(obj))
    return out


def split_dataset(trajectories, fractions=(0.6, 0.1, 0.3)):
    """Deterministic contiguous split, disjoint by trajectory id."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("split fractions must sum to 1")
    n = len(trajectories)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    train = trajectories[:n_train]
    val = trajectories[n_train:n_train + n_val]
    test = trajectories[n_train + n_val:]
    ids = [t.id for t in trajectories]
    if len(set(ids)) != len(ids):
        raise DataError("trajectory ids are not unique")
    return train, val, test
