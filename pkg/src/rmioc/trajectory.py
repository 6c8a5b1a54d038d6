"""Trajectory container and its CSV serialization.

CSV layout: header ``k,x1..xn,u1..um``; row ``k = 0`` carries the initial
state with empty input fields; floats are written with 17 significant digits
so a round trip is lossless.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Trajectory:
    """States ``x_0..x_T`` (shape ``(T+1, n)``) and inputs ``u_1..u_T`` (shape ``(T, m)``).

    ``inputs[k - 1]`` is ``u_k``, the input that drives ``x_{k-1}`` to ``x_k``.
    """

    states: np.ndarray
    inputs: np.ndarray
    dynamically_consistent: bool = False
    multipliers: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        x = np.array(self.states, dtype=float)
        u = np.array(self.inputs, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        if x.ndim != 2 or u.ndim != 2:
            raise ValueError("states and inputs must be 2-D arrays")
        if x.shape[0] != u.shape[0] + 1:
            raise ValueError(f"need T+1 states for T inputs, got {x.shape[0]} and {u.shape[0]}")
        if u.shape[0] < 1:
            raise ValueError("trajectory horizon must be at least 1")
        x.setflags(write=False)
        u.setflags(write=False)
        object.__setattr__(self, "states", x)
        object.__setattr__(self, "inputs", u)

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def x(self, k: int) -> np.ndarray:
        return self.states[k]

    def u(self, k: int) -> np.ndarray:
        if not 1 <= k <= self.horizon:
            raise IndexError(f"input index {k} outside 1..{self.horizon}")
        return self.inputs[k - 1]

    def dynamics_defect(self, system) -> float:
        """``max_k ||x_{k+1} - f(x_k, u_{k+1})||_inf``."""
        pred = system.step(self.states[:-1], self.inputs)
        return float(np.max(np.abs(self.states[1:] - pred)))

    def with_flag(self, consistent: bool) -> "Trajectory":
        return Trajectory(self.states, self.inputs, consistent, self.multipliers)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def trajectory_to_csv(traj: Trajectory, path=None) -> str:
    n, m = traj.state_dim, traj.input_dim
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)])
    for k in range(traj.horizon + 1):
        u = [""] * m if k == 0 else [_fmt(v) for v in traj.u(k)]
        w.writerow([k] + [_fmt(v) for v in traj.x(k)] + u)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def trajectory_from_csv(source) -> Trajectory:
    """Read a trajectory from a path or from CSV text."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        source = Path(source).read_text()
    rows = list(csv.reader(io.StringIO(source)))
    header, body = rows[0], [r for r in rows[1:] if r]
    n = sum(1 for h in header if h.startswith("x"))
    m = sum(1 for h in header if h.startswith("u"))
    body.sort(key=lambda r: int(r[0]))
    states = np.array([[float(v) for v in r[1 : 1 + n]] for r in body])
    inputs = np.array([[float(v) for v in r[1 + n : 1 + n + m]] for r in body[1:]])
    return Trajectory(states, inputs.reshape(len(body) - 1, m))
