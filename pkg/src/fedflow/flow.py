"""Conditional flow matching loss, fixed-step ODE sampling and path straightness."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import as_points
from .errors import ConfigError, NumericError, ShapeError
from .nn import ParamVector, loss_and_grad

Field = Callable[[np.ndarray, float], np.ndarray]


def interpolate(x0, x1, t) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeError(f"x0 {x0.shape} and x1 {x1.shape} differ")
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("interpolation time must lie in [0, 1]")
    return (1.0 - t) * x0 + t * x1


def sample_times(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=n)


def cfm_loss(field: ParamVector, x0, x1, t) -> tuple[float, np.ndarray]:
    """Mean squared regression error of ``v(x_t, t)`` onto ``x1 - x0`` and its gradient."""
    x0 = as_points(x0, name="x0")
    x1 = as_points(x1, dim=x0.shape[1], name="x1")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if len(t) != len(x0) or len(x1) != len(x0):
        raise ShapeError("x0, x1 and t must have the same number of rows")
    xt = interpolate(x0, x1, t)
    target = x1 - x0
    B = len(x0)

    def mse(out):
        r = out - target
        return float(np.einsum("ij,ij->", r, r)) / B, (2.0 / B) * r

    return loss_and_grad(field, xt, t, mse)


_STEP_COST = {"euler": 1, "midpoint": 2, "rk4": 4}


@dataclass(frozen=True)
class IntegratorCfg:
    scheme: str = "euler"
    nfe: int = 100

    def __post_init__(self):
        if self.scheme not in _STEP_COST:
            raise ConfigError(f"scheme must be one of {sorted(_STEP_COST)}, got {self.scheme!r}")
        k = _STEP_COST[self.scheme]
        if self.nfe < k or self.nfe % k:
            raise ConfigError(f"{self.scheme} needs nfe to be a positive multiple of {k}, got {self.nfe}")

    @property
    def steps(self) -> int:
        return self.nfe // _STEP_COST[self.scheme]


@dataclass
class Trajectory:
    points: np.ndarray  # (n_samples, steps + 1, d)
    times: np.ndarray  # (steps + 1,)

    def __post_init__(self):
        t = self.times
        if t[0] != 0.0 or t[-1] != 1.0 or np.any(np.diff(t) <= 0):
            raise ValueError("trajectory times must increase strictly from 0 to 1")
        if self.points.ndim != 3 or self.points.shape[1] != len(t):
            raise ShapeError("trajectory points must have shape (n, len(times), d)")


def integrate(field: Field, x0, cfg: IntegratorCfg, record: bool = False):
    """Fixed-grid integration of dx/dt = field(x, t) from t=0 to t=1.

    Uses exactly ``cfg.nfe`` field evaluations.  Returns ``(x1_hat, traj)``
    where ``traj`` is ``None`` unless ``record``.
    """
    x = as_points(x0, name="x0").copy()
    times = np.linspace(0.0, 1.0, cfg.steps + 1)
    path = [x.copy()] if record else None
    for k in range(cfg.steps):
        t, h = times[k], times[k + 1] - times[k]
        if cfg.scheme == "euler":
            x = x + h * field(x, t)
        elif cfg.scheme == "midpoint":
            k1 = field(x, t)
            x = x + h * field(x + 0.5 * h * k1, t + 0.5 * h)
        else:
            k1 = field(x, t)
            k2 = field(x + 0.5 * h * k1, t + 0.5 * h)
            k3 = field(x + 0.5 * h * k2, t + 0.5 * h)
            k4 = field(x + h * k3, times[k + 1])
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"ODE state became non-finite at step {k}")
        if record:
            path.append(x.copy())
    traj = Trajectory(np.stack(path, axis=1), times) if record else None
    return x, traj


def path_straightness(traj: Trajectory, min_chord: float = 1e-12) -> np.ndarray:
    """Per-sample arc length / chord length - 1; NaN where the chord is degenerate."""
    seg = np.diff(traj.points, axis=1)
    arc = np.sqrt((seg**2).sum(axis=2)).sum(axis=1)
    chord = np.sqrt(((traj.points[:, -1] - traj.points[:, 0]) ** 2).sum(axis=1))
    out = np.full(len(arc), np.nan)
    ok = chord > min_chord
    out[ok] = arc[ok] / chord[ok] - 1.0
    # arc >= chord exactly; deviations below summation round-off are reported as 0
    resolution = 4.0 * np.finfo(np.float64).eps * max(seg.shape[1], 1)
    out[ok & (out < resolution)] = 0.0
    return out


def straightness(traj: Trajectory, min_chord: float = 1e-12) -> tuple[float, int]:
    """Mean straightness over samples and the number of excluded degenerate rows."""
    s = path_straightness(traj, min_chord)
    excluded = int(np.isnan(s).sum())
    if excluded == len(s):
        return float("nan"), excluded
    return float(np.nanmean(s)), excluded


def trajectory_to_csv(traj: Trajectory, path) -> None:
    n, steps, d = traj.points.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "step", "t"] + [f"x_{k + 1}" for k in range(d)])
        for i in range(n):
            for s in range(steps):
                w.writerow([i, s, repr(float(traj.times[s]))] + [repr(float(v)) for v in traj.points[i, s]])
