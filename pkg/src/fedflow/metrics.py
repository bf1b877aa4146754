"""Wasserstein evaluation and the discrete checks of the mixing inequalities."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import DistributionSpec, as_points, sample
from .flow import IntegratorCfg, integrate, straightness
from .ot import OTError, cost_matrix, solve_assignment, solve_dense, solve_sinkhorn

W2_EXACT_CAP = 4096


@dataclass
class W2Report:
    nfe: int
    w2: float
    n_eval: int
    seed: int
    straightness: float = float("nan")
    method: str = "exact"

    def __post_init__(self):
        if self.w2 < 0:
            raise ValueError("w2 must be non-negative")


def w2_estimate(a, b, cap: int = W2_EXACT_CAP, rng: np.random.Generator | None = None,
                sinkhorn_eps: float = 1e-3) -> tuple[float, str]:
    """W2 between two equal-weight point clouds, plus the estimator used.

    The larger cloud is subsampled (first rows, or a random subset when
    ``rng`` is given) to the smaller size.  Up to ``cap`` points the exact
    assignment is used; above it, Sinkhorn with ``sinkhorn_eps`` times the mean
    pairwise cost.
    """
    a = as_points(a, name="a")
    b = as_points(b, dim=a.shape[1], name="b")
    n = min(len(a), len(b))

    def sub(x):
        if len(x) == n:
            return x
        idx = rng.choice(len(x), n, replace=False) if rng is not None else np.arange(n)
        return x[idx]

    a, b = sub(a), sub(b)
    if n <= cap:
        cost = solve_assignment(cost_matrix(a, b)).expected_cost
        method = "exact"
    else:
        C_mean = float(cost_matrix(a[:256], b[:256]).mean())
        cost = solve_sinkhorn(a, b, sinkhorn_eps * C_mean).total_cost
        method = "sinkhorn"
    return float(np.sqrt(max(2.0 * cost, 0.0))), method


def w2_empirical(a, b, cap: int = W2_EXACT_CAP) -> float:
    return w2_estimate(a, b, cap)[0]


def w2_vs_nfe(field, source: DistributionSpec, target_samples, nfes: Sequence[int], n_eval: int,
              scheme: str = "euler", seed: int = 0, cap: int = W2_EXACT_CAP,
              with_straightness: bool = True) -> list[W2Report]:
    """W2 of generated samples against held-out targets at each NFE.

    The same ``n_eval`` source draws (from ``seed``) are pushed through the
    field at every NFE.
    """
    if not nfes:
        raise ValueError("nfe list is empty")
    x0 = sample(source, n_eval, np.random.default_rng(seed))
    reports = []
    for nfe in nfes:
        x1_hat, traj = integrate(field, x0, IntegratorCfg(scheme, int(nfe)), record=with_straightness)
        w2, method = w2_estimate(x1_hat, target_samples, cap)
        s = straightness(traj)[0] if with_straightness else float("nan")
        reports.append(W2Report(int(nfe), w2, n_eval, seed, s, method))
    return reports


EVAL_FIELDS = ("tag", "algorithm", "round", "nfe", "w2", "straightness", "n_eval", "seed")


def write_eval_csv(path, rows: Sequence[tuple[str, str, int, W2Report]], append: bool = False) -> None:
    new = not append
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(EVAL_FIELDS)
        for tag, algo, rnd, r in rows:
            w.writerow([tag, algo, rnd, r.nfe, repr(r.w2), repr(r.straightness), r.n_eval, r.seed])


# --- mixing inequality ----------------------------------------------------------


def _merge_atoms(points: np.ndarray, weights: np.ndarray):
    uniq, inv = np.unique(points, axis=0, return_inverse=True)
    w = np.zeros(len(uniq))
    np.add.at(w, inv.reshape(-1), weights)
    return uniq, w


def w2_squared_discrete(x, a, y, b) -> float:
    """W2^2 (cost ||x - y||^2) between weighted discrete measures."""
    return 2.0 * solve_dense(np.asarray(a, float), np.asarray(b, float), cost_matrix(x, y)).total_cost


def lemma1_check(mu, nus, lambdas, max_support: int = 256, tol: float = 1e-9):
    """Check W2^2(mu, sum_i l_i nu_i) <= sum_i l_i W2^2(mu, nu_i).

    ``mu`` and every ``nu_i`` are ``(points, weights)`` pairs.  Identical atoms
    of the mixture are merged before solving.  Returns ``(lhs, rhs, holds)``.
    """
    mx, ma = mu
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if len(lambdas) != len(nus) or np.any(lambdas < 0) or abs(lambdas.sum() - 1) > 1e-12:
        raise ValueError("lambdas must be a probability vector matching nus")
    sizes = [len(mx)] + [len(p) for p, _ in nus]
    if max(sizes) > max_support or sum(sizes[1:]) > max_support:
        raise OTError(f"support exceeds cap {max_support}")
    rhs = float(sum(lam * w2_squared_discrete(mx, ma, p, w) for lam, (p, w) in zip(lambdas, nus)))
    pts = np.concatenate([np.asarray(p, float) for p, _ in nus], axis=0)
    wts = np.concatenate([lam * np.asarray(w, float) for lam, (_, w) in zip(lambdas, nus)])
    pts, wts = _merge_atoms(pts, wts)
    lhs = w2_squared_discrete(mx, ma, pts, wts / wts.sum())
    return lhs, rhs, bool(lhs <= rhs + tol)


# --- local-vs-global plan sweep --------------------------------------------


@dataclass
class HeterogeneitySweep:
    skews: list[float]
    suboptimality: list[float] = field(default_factory=list)  # W2^2(pi*, pi*_local)
    heterogeneity: list[float] = field(default_factory=list)  # sum_i l_i W2(q1, q1^i)

    def __post_init__(self):
        if np.any(np.diff(self.skews) <= 0):
            raise ValueError("skew grid must be strictly increasing")


def client_offsets(n_clients: int, dim: int) -> np.ndarray:
    """Unit directions along which client clusters are pulled apart."""
    if n_clients == 1:
        out = np.zeros((1, dim))
        out[0, 0] = 1.0
        return out
    ang = 2 * np.pi * np.arange(n_clients) / n_clients
    out = np.zeros((n_clients, dim))
    out[:, 0], out[:, 1 % dim] = np.cos(ang), np.sin(ang)
    return out


def _plan_atoms(x0, x1, perm):
    return np.concatenate([x0, x1[perm]], axis=1)


def local_global_gap(source, client_targets, cap: int = 64):
    """Exact W2^2 between the global plan and the mixture of local plans.

    ``source`` has ``N`` atoms and every client target ``N`` atoms, all with
    uniform weight and equal client weights, so each plan is an assignment
    and both plans are uniform measures on ``n * N`` atoms of ``R^{2d}``.
    Returns ``(gap, heterogeneity)``.
    """
    source = as_points(source, name="source")
    n, N = len(client_targets), len(source)
    if any(len(y) != N for y in client_targets):
        raise OTError("every client target needs as many atoms as the source")
    if n * N > cap:
        raise OTError(f"support {n * N} exceeds cap {cap}")
    pooled = np.concatenate(client_targets, axis=0)
    src_rep = np.tile(source, (n, 1))
    glob = solve_assignment(cost_matrix(src_rep, pooled))
    pi_global = _plan_atoms(src_rep, pooled, glob.perm)
    local = []
    for y in client_targets:
        p = solve_assignment(cost_matrix(source, y))
        local.append(_plan_atoms(source, y, p.perm))
    pi_local = np.concatenate(local, axis=0)
    gap = 2.0 * solve_assignment(cost_matrix(pi_global, pi_local)).expected_cost
    het = 0.0
    for y in client_targets:
        c = solve_assignment(cost_matrix(pooled, np.tile(y, (n, 1)))).expected_cost
        het += np.sqrt(2.0 * c) / n
    return float(gap), float(het)


def theorem1_sweep(source, cluster, skews: Sequence[float], n_clients: int = 2,
                   cap: int = 64) -> HeterogeneitySweep:
    """Pull ``n_clients`` copies of ``cluster`` apart and record the local-plan gap.

    Client ``i`` holds ``cluster + skew * u_i`` for evenly spread unit vectors
    ``u_i``; at skew 0 all clients hold the same data.
    """
    cluster = as_points(cluster, name="cluster")
    sweep = HeterogeneitySweep(list(map(float, skews)))
    offsets = client_offsets(n_clients, cluster.shape[1])
    for s in sweep.skews:
        targets = [cluster + s * u for u in offsets]
        gap, het = local_global_gap(source, targets, cap)
        sweep.suboptimality.append(gap)
        sweep.heterogeneity.append(het)
    return sweep
