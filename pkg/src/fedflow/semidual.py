"""Semi-dual OT with a neural source potential f.

The c-transform ``f^c(x1) = min_x0 c(x0, x1) - f(x0)`` is approximated by a
minimum over a finite candidate pool drawn from the source distribution,
optionally refined by gradient descent on ``x0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import as_points
from .errors import ConfigError, NumericError
from .nn import ParamVector, forward, grad_wrt_input, loss_and_grad
from .ot import cost_matrix, pair_cost

CTRANSFORM_MODES = ("pool_min", "pool_min_gd")


@dataclass(frozen=True)
class CTransformCfg:
    mode: str = "pool_min"
    pool_size: int = 256
    gd_steps: int = 0
    gd_lr: float = 0.5

    def __post_init__(self):
        if self.mode not in CTRANSFORM_MODES:
            raise ConfigError(f"c-transform mode must be one of {CTRANSFORM_MODES}, got {self.mode!r}")
        if self.pool_size < 1:
            raise ConfigError("c-transform pool_size must be >= 1")
        if self.gd_steps < 0:
            raise ConfigError("c-transform gd_steps must be >= 0")
        if self.gd_steps > 0 and self.gd_lr <= 0:
            raise ConfigError("c-transform gd_lr must be positive when gd_steps > 0")


def potential(f: ParamVector, x) -> np.ndarray:
    return forward(f, x)[:, 0]


@dataclass
class ResampledPairs:
    x0: np.ndarray
    x1: np.ndarray
    argmin_index: np.ndarray
    score: np.ndarray


def _score_matrix(f: ParamVector, x1, candidates) -> np.ndarray:
    # A[j, k] = c(candidate_k, x1_j) - f(candidate_k)
    return cost_matrix(x1, candidates) - potential(f, candidates)[None, :]


def resample_global(f: ParamVector, x0_pool, x1_batch) -> ResampledPairs:
    """Pair every target row with the pool point minimising c(x0, x1) - f(x0).

    Ties go to the lowest pool index.
    """
    pool = as_points(x0_pool, name="x0_pool")
    x1 = as_points(x1_batch, dim=pool.shape[1], name="x1_batch")
    A = _score_matrix(f, x1, pool)
    k = np.argmin(A, axis=1)
    return ResampledPairs(pool[k], x1, k, A[np.arange(len(x1)), k])


def c_transform(f: ParamVector, x1, candidates, cfg: CTransformCfg = CTransformCfg()):
    """Approximate ``f^c`` at each row of ``x1``.

    Returns ``(values, minimizers)``.  In ``pool_min_gd`` mode the pool
    argmin seeds ``cfg.gd_steps`` descent steps on ``x0``; a refined point is
    only kept when it scores strictly better than the pool minimum.
    """
    pairs = resample_global(f, candidates, x1)
    values, minimizers = pairs.score.copy(), pairs.x0.copy()
    if cfg.mode == "pool_min_gd" and cfg.gd_steps > 0:
        z = minimizers.copy()
        for _ in range(cfg.gd_steps):
            z = z - cfg.gd_lr * ((z - pairs.x1) - grad_wrt_input(f, z))
        if not np.all(np.isfinite(z)):
            raise NumericError("c-transform descent diverged")
        refined = pair_cost(z, pairs.x1) - potential(f, z)
        better = refined < values
        values = np.where(better, refined, values)
        minimizers = np.where(better[:, None], z, minimizers)
    return values, minimizers


def dual_loss_local(f: ParamVector, x0, x1, candidates, cfg: CTransformCfg = CTransformCfg()):
    """Local semi-dual objective ``mean f(x0) + mean f^c(x1)`` and a descent gradient.

    The objective is maximised, so the returned gradient is that of the
    negated objective.  Minimisers of the c-transform are held fixed.
    """
    x0 = as_points(x0, name="x0")
    x1 = as_points(x1, dim=x0.shape[1], name="x1")
    _, xbar = c_transform(f, x1, candidates, cfg)
    n0, n1 = len(x0), len(x1)
    stacked = np.concatenate([x0, xbar], axis=0)
    cost_term = float(pair_cost(xbar, x1).mean())
    weights = np.concatenate([np.full(n0, 1.0 / n0), np.full(n1, -1.0 / n1)])[:, None]

    def neg_objective(out):
        obj = float((weights * out).sum()) + cost_term
        return -obj, -weights

    neg, grad = loss_and_grad(f, stacked, None, neg_objective)
    return -neg, grad
