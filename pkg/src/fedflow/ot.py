"""Mini-batch optimal transport under the cost c(x, y) = 0.5 * ||x - y||^2."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog
from scipy.special import logsumexp

from .data import as_points

DEFAULT_CAP = 1024


class OTError(ValueError):
    pass


def cost_matrix(x0, x1) -> np.ndarray:
    """Pairwise 0.5 * squared Euclidean distances, accumulated coordinate-wise."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    C = np.zeros((x0.shape[0], x1.shape[0]))
    for k in range(x0.shape[1]):
        diff = x0[:, k, None] - x1[None, :, k]
        C += diff * diff
    return 0.5 * C


def pair_cost(x0, x1) -> np.ndarray:
    """Row-wise cost c(x0_i, x1_i)."""
    d = np.asarray(x0, dtype=np.float64) - np.asarray(x1, dtype=np.float64)
    return 0.5 * np.einsum("ij,ij->i", d, d)


@dataclass
class TransportPlan:
    """A coupling of two finite point sets.

    ``kind == "assignment"`` stores a bijection ``perm`` (source ``i`` goes to
    target ``perm[i]``) with uniform mass ``1/n`` per pair; ``total_cost`` is
    then the unnormalised sum of the matched costs.  ``kind == "dense"``
    stores a mass matrix whose entries sum to one and ``total_cost`` equals
    the expected cost.
    """

    kind: str
    cost: np.ndarray
    perm: np.ndarray | None = None
    matrix: np.ndarray | None = None
    total_cost: float = 0.0
    converged: bool = True
    n_iter: int = 0
    dual_slack: float | None = None
    history: list[float] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cost.shape

    @property
    def expected_cost(self) -> float:
        if self.kind == "assignment":
            return self.total_cost / len(self.perm)
        return self.total_cost

    def mass(self) -> np.ndarray:
        if self.kind == "dense":
            return self.matrix
        n = len(self.perm)
        P = np.zeros((n, n))
        P[np.arange(n), self.perm] = 1.0 / n
        return P

    def to_csv(self, path, min_mass: float = 0.0) -> None:
        """Write ``(i, j, mass, cost)`` rows for every cell with mass > ``min_mass``."""
        P = self.mass()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "mass", "cost"])
            for i, j in zip(*np.nonzero(P > min_mass)):
                w.writerow([int(i), int(j), repr(float(P[i, j])), repr(float(self.cost[i, j]))])


def assignment_dual_slack(C: np.ndarray, perm: np.ndarray) -> float:
    """Largest dual-feasibility violation of potentials built from ``perm``.

    Bellman-Ford on the exchange graph (edge i->k weighs
    ``C[i, perm[k]] - C[k, perm[k]]``) yields potentials ``u, v`` with
    ``u_i + v_perm(i) = C[i, perm(i)]``.  The returned value
    ``max(u_i + v_j - C_ij, 0)`` is ~0 iff ``perm`` is optimal.
    """
    n = len(perm)
    Cp = C[:, perm]  # Cp[i, k] = C[i, perm[k]]
    D = Cp - np.diag(Cp)[None, :]
    p = np.zeros(n)
    for _ in range(n + 1):
        new = np.minimum(p, (p[:, None] + D).min(axis=0))
        if np.array_equal(new, p):
            break
        p = new
    u = -p
    v = np.empty(n)
    v[perm] = np.diag(Cp) + p
    return float(max(0.0, (u[:, None] + v[None, :] - C).max()))


def solve_assignment(C: np.ndarray, certify: bool = False) -> TransportPlan:
    C = np.asarray(C, dtype=np.float64)
    if C.shape[0] != C.shape[1]:
        raise OTError(f"assignment needs a square cost matrix, got {C.shape}")
    rows, cols = linear_sum_assignment(C)
    perm = np.empty(C.shape[0], dtype=np.int64)
    perm[rows] = cols
    plan = TransportPlan("assignment", C, perm=perm, total_cost=float(C[rows, cols].sum()))
    if certify:
        plan.dual_slack = assignment_dual_slack(C, perm)
    return plan


def solve_dense(a, b, C) -> TransportPlan:
    """Exact OT between weighted discrete measures via the transport LP."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    n, m = C.shape
    if a.shape != (n,) or b.shape != (m,):
        raise OTError("weights do not match the cost matrix")
    if np.any(a < 0) or np.any(b < 0) or abs(a.sum() - 1) > 1e-9 or abs(b.sum() - 1) > 1e-9:
        raise OTError("weights must be non-negative and sum to one")
    rows = sparse.kron(sparse.eye(n), np.ones((1, m)))
    cols = sparse.kron(np.ones((1, n)), sparse.eye(m))
    A = sparse.vstack([rows, cols]).tocsr()
    res = linprog(C.ravel(), A_eq=A, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise OTError(f"transport LP failed: {res.message}")
    P = np.maximum(res.x.reshape(n, m), 0.0)
    return TransportPlan("dense", C, matrix=P, total_cost=float((P * C).sum()))


def solve_exact(x0, x1, a=None, b=None, cap: int = DEFAULT_CAP, certify: bool = False) -> TransportPlan:
    """Exact OT between two point clouds.

    Equal sizes with uniform weights are solved as an assignment problem;
    anything else falls back to the dense transport LP.
    """
    x0 = as_points(x0, name="x0")
    x1 = as_points(x1, dim=x0.shape[1], name="x1")
    n, m = len(x0), len(x1)
    if max(n, m) > cap:
        raise OTError(f"batch size {max(n, m)} exceeds exact-solver cap {cap}")
    C = cost_matrix(x0, x1)
    if n == m and a is None and b is None:
        return solve_assignment(C, certify=certify)
    a = np.full(n, 1.0 / n) if a is None else a
    b = np.full(m, 1.0 / m) if b is None else b
    return solve_dense(a, b, C)


def _marginal_violation(log_P, a, b) -> float:
    P = np.exp(log_P)
    return float(np.abs(P.sum(axis=1) - a).sum() + np.abs(P.sum(axis=0) - b).sum())


def sinkhorn_log(a, b, C, epsilon: float, max_iter: int = 5000, tol: float = 1e-9,
                 scaling: float = 0.5, round_plan: bool = True) -> TransportPlan:
    """Log-domain Sinkhorn with geometric epsilon-scaling warm start.

    The warm start runs a few sweeps at each epsilon from ``max(C)`` down to
    ``epsilon``; iterations and the violation history (recorded every 10
    sweeps) refer to the final epsilon only.  ``converged`` reports whether
    the iterates reached ``tol`` before the optional final rounding.
    """
    if epsilon <= 0:
        raise OTError("epsilon must be positive")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros(len(a))
    g = np.zeros(len(b))

    def sweep(eps):
        nonlocal f, g
        f = eps * log_a - eps * logsumexp((g[None, :] - C) / eps, axis=1)
        g = eps * log_b - eps * logsumexp((f[:, None] - C) / eps, axis=0)

    eps = max(float(C.max()), epsilon)
    while eps > epsilon:
        for _ in range(10):
            sweep(eps)
        eps = max(eps * scaling, epsilon)

    history, converged, it, err = [], False, 0, np.inf
    for it in range(1, max_iter + 1):
        sweep(epsilon)
        if it % 10 == 0 or it == 1:
            err = _marginal_violation((f[:, None] + g[None, :] - C) / epsilon, a, b)
            if it % 10 == 0:
                history.append(err)
            if err < tol:
                converged = True
                break
    P = np.exp((f[:, None] + g[None, :] - C) / epsilon)
    if round_plan:
        P = round_to_marginals(P, a, b)
    return TransportPlan("dense", C, matrix=P, total_cost=float((P * C).sum()),
                         converged=converged, n_iter=it, history=history)


def round_to_marginals(P, a, b) -> np.ndarray:
    """Project an approximate plan onto the transport polytope.

    Rows then columns are scaled down where they exceed their marginal, and
    the leftover mass is added as a rank-one correction.  The cost changes by
    at most ``2 * max|C| * violation``.
    """
    r = P.sum(axis=1)
    X = P * np.minimum(a / np.where(r > 0, r, 1.0), 1.0)[:, None]
    c = X.sum(axis=0)
    Y = X * np.minimum(b / np.where(c > 0, c, 1.0), 1.0)[None, :]
    err_a = a - Y.sum(axis=1)
    err_b = b - Y.sum(axis=0)
    s = np.abs(err_a).sum()
    if s > 0:
        Y = Y + np.outer(err_a, err_b) / s
    return Y


def solve_sinkhorn(x0, x1, epsilon: float, max_iter: int = 5000, tol: float = 1e-9,
                   a=None, b=None, round_plan: bool = True) -> TransportPlan:
    x0 = as_points(x0, name="x0")
    x1 = as_points(x1, dim=x0.shape[1], name="x1")
    n, m = len(x0), len(x1)
    a = np.full(n, 1.0 / n) if a is None else a
    b = np.full(m, 1.0 / m) if b is None else b
    return sinkhorn_log(a, b, cost_matrix(x0, x1), epsilon, max_iter=max_iter, tol=tol,
                        round_plan=round_plan)


def marginal_violation(plan: TransportPlan, a=None, b=None) -> float:
    P = plan.mass()
    n, m = P.shape
    a = np.full(n, 1.0 / n) if a is None else a
    b = np.full(m, 1.0 / m) if b is None else b
    return float(np.abs(P.sum(axis=1) - a).sum() + np.abs(P.sum(axis=0) - b).sum())


@dataclass
class CouplingSampler:
    plan: TransportPlan
    rng: np.random.Generator


def sample_pairs(sampler: CouplingSampler, B: int, x0, x1):
    """Draw ``B`` index pairs with probability proportional to plan mass.

    Each pair uses two uniforms: one picks the row through the row marginal,
    the other the column through that row's conditional.  Assignment and
    dense plans consume the stream identically, so a dense plan close to a
    permutation yields the same pairs as the permutation itself.
    Returns ``(x0[i], x1[j], i, j)``.
    """
    plan = sampler.plan
    if B < 1:
        raise OTError("B must be >= 1")
    u = sampler.rng.random((B, 2))
    if plan.kind == "assignment":
        n = len(plan.perm)
        if n == 0:
            raise OTError("empty plan")
        i = np.minimum((u[:, 0] * n).astype(np.int64), n - 1)
        j = plan.perm[i]
    else:
        P = plan.matrix
        if P.size == 0 or not P.sum() > 0:
            raise OTError("empty plan")
        rows = np.cumsum(P.sum(axis=1))
        i = np.minimum(np.searchsorted(rows, u[:, 0] * rows[-1], side="right"), P.shape[0] - 1)
        cond = np.cumsum(P[i], axis=1)
        j = (cond <= (u[:, 1] * cond[:, -1])[:, None]).sum(axis=1)
        j = np.minimum(j, P.shape[1] - 1)
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    return x0[i], x1[j], i, j
