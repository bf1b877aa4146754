"""Self-contained oracle suites run by ``fedflow verify``."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import make_rng
from .metrics import lemma1_check, theorem1_sweep
from .nn import (MlpArch, ParamVector, _backward, _forward_cached, forward, grad_wrt_input,
                 init_params, loss_and_grad)
from .ot import cost_matrix, solve_exact

SUITES = ("ot", "lemma1", "theorem1", "gradcheck")


@dataclass
class SuiteResult:
    name: str
    passed: int = 0
    total: int = 0
    worst: float = 0.0
    worst_label: str = "max err"
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.passed == self.total and not self.failures

    def record(self, ok: bool, err: float, dump: Callable[[], str]) -> None:
        self.total += 1
        self.worst = max(self.worst, err)
        if ok:
            self.passed += 1
        else:
            self.failures.append(dump())

    def row(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"{self.name:<10} {self.passed:>4}/{self.total:<4} {self.worst_label} {self.worst:.3e}  {status}"


def _brute_force(C: np.ndarray) -> float:
    n = len(C)
    return min(C[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n)))


def suite_ot(seed: int = 0, n_instances: int = 100, max_n: int = 7, tol: float = 1e-12) -> SuiteResult:
    res = SuiteResult("ot", worst_label="max rel err")
    rng = make_rng(seed, 101)
    for k in range(n_instances):
        n = int(rng.integers(1, max_n + 1))
        x0, x1 = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
        got = solve_exact(x0, x1).total_cost
        want = _brute_force(cost_matrix(x0, x1))
        err = abs(got - want) / max(abs(want), 1e-300)
        res.record(err <= tol, err, lambda: f"instance {k}: x0={x0.tolist()} x1={x1.tolist()} "
                                            f"solver={got!r} brute={want!r}")
    return res


def _random_measure(rng, size, dim=2, lattice=False):
    pts = rng.integers(-3, 4, size=(size, dim)).astype(float) if lattice else rng.normal(size=(size, dim))
    w = rng.integers(1, 6, size=size).astype(float)
    return pts, w / w.sum()


def suite_lemma1(seed: int = 0, n_instances: int = 200, tol: float = 1e-9,
                 eq_tol: float = 1e-12) -> SuiteResult:
    """Random mixtures, plus an equality case (all components identical) every fifth draw."""
    res = SuiteResult("lemma1", worst_label="max violation")
    rng = make_rng(seed, 102)
    for k in range(n_instances):
        n_comp = int(rng.integers(1, 5))
        lattice = bool(rng.integers(0, 2))
        mu = _random_measure(rng, int(rng.integers(1, 13)), lattice=lattice)
        equal = k % 5 == 0
        if equal:
            nu = _random_measure(rng, int(rng.integers(1, 4)), lattice=lattice)
            nus = [nu] * n_comp
        else:
            nus = [_random_measure(rng, int(rng.integers(1, 4)), lattice=lattice) for _ in range(n_comp)]
        lam = rng.integers(1, 6, size=n_comp).astype(float)
        lam /= lam.sum()
        lam[-1] = 1.0 - lam[:-1].sum()
        lhs, rhs, holds = lemma1_check(mu, nus, lam, tol=tol)
        ok = holds and (not equal or abs(lhs - rhs) <= eq_tol)
        res.record(ok, max(lhs - rhs, abs(lhs - rhs) if equal else 0.0, 0.0),
                   lambda: f"instance {k}: mu={mu} nus={nus} lambdas={lam.tolist()} lhs={lhs!r} rhs={rhs!r}")
    return res


THEOREM1_SKEWS = (0.0, 0.5, 1.0, 2.0, 4.0)


def theorem1_family(seed: int = 0, n_points: int = 16):
    """Source cloud and one shared cluster, each with ``n_points`` atoms."""
    rng = make_rng(seed, 103)
    return rng.normal(size=(n_points, 2)), 0.3 * rng.normal(size=(n_points, 2))


def suite_theorem1(seed: int = 0, skews=THEOREM1_SKEWS, zero_tol: float = 1e-9) -> SuiteResult:
    res = SuiteResult("theorem1", worst_label="max decrease")
    source, cluster = theorem1_family(seed)
    sweep = theorem1_sweep(source, cluster, skews, n_clients=2)
    s = np.asarray(sweep.suboptimality)
    dump = lambda: f"skews={list(skews)} suboptimality={s.tolist()} heterogeneity={sweep.heterogeneity}"
    res.record(s[0] <= zero_tol, 0.0, lambda: "nonzero at zero skew: " + dump())
    for a, b in zip(s[:-1], s[1:]):
        res.record(b >= a - zero_tol, max(a - b, 0.0), lambda: "decrease: " + dump())
    single = theorem1_sweep(source, cluster, skews, n_clients=1)
    res.record(all(v == 0.0 for v in single.suboptimality), 0.0,
               lambda: f"single client not zero: {single.suboptimality}")
    return res


def central_difference(fn, x, h):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic, numeric, floor=1e-8) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    mask = np.maximum(np.abs(a), np.abs(n)) > floor
    if not mask.any():
        return 0.0
    return float((np.abs(a - n)[mask] / np.maximum(np.abs(a), np.abs(n))[mask]).max())


def _near_kink(params, x, t, margin):
    if params.arch.activation != "relu":
        return False
    _, (_, pre, _) = _forward_cached(params, x, t)
    return any(np.abs(z).min() < margin for z in pre)


def gradcheck_draw(arch: MlpArch, rng, h: float = 1e-5, margin: float = 1e-3, batch: int = 3):
    """One gradient check on a random point away from ReLU kinks.

    Returns ``(param_err, input_err)``.  The input check differentiates the
    same scalar loss with respect to ``x``; for scalar networks it also
    compares ``grad_wrt_input``.
    """
    for _ in range(100):
        params = init_params(arch, rng)
        params.values[:] += 0.1 * rng.normal(size=params.values.size)
        x = rng.normal(size=(batch, arch.input_dim))
        t = rng.uniform(size=batch) if arch.time_conditioned else None
        if not _near_kink(params, x, t, margin):
            break
    R = rng.normal(size=(batch, arch.output_dim))

    def loss_fn(out):
        return float((R * out).sum() + 0.5 * (out * out).sum()), R + out

    _, g = loss_and_grad(params, x, t, loss_fn)
    num = central_difference(lambda v: loss_fn(forward(ParamVector(v, arch), x, t))[0], params.values, h)
    perr = rel_err(g, num)

    out, cache = _forward_cached(params, x, t)
    _, dh = _backward(params, cache, loss_fn(out)[1], want_params=False)
    numx = central_difference(lambda z: loss_fn(forward(params, z, t))[0], x, h)
    ierr = rel_err(dh[:, : arch.input_dim], numx)
    if arch.output_dim == 1 and not arch.time_conditioned:
        numf = central_difference(lambda z: float(forward(params, z).sum()), x, h)
        ierr = max(ierr, rel_err(grad_wrt_input(params, x), numf))
    return perr, ierr


def gradcheck_archs(rng):
    """Small random stand-ins for the velocity field and the potential."""
    act = ("relu", "silu", "selu")[int(rng.integers(0, 3))]
    hidden = tuple(int(h) for h in rng.integers(2, 9, size=int(rng.integers(1, 4))))
    dim = int(rng.integers(1, 4))
    return (MlpArch(dim, dim, hidden, act, time_conditioned=True), MlpArch(dim, 1, hidden, act))


def suite_gradcheck(seed: int = 0, n_draws: int = 20, tol: float = 1e-4) -> SuiteResult:
    res = SuiteResult("gradcheck", worst_label="max rel err")
    rng = make_rng(seed, 104)
    for k in range(n_draws):
        for arch in gradcheck_archs(rng):
            perr, ierr = gradcheck_draw(arch, rng)
            err = max(perr, ierr)
            res.record(err < tol, err, lambda: f"draw {k}: arch={arch} param_err={perr!r} input_err={ierr!r}")
    return res


def run_suite(name: str, seed: int = 0) -> SuiteResult:
    fns = {"ot": suite_ot, "lemma1": suite_lemma1, "theorem1": suite_theorem1, "gradcheck": suite_gradcheck}
    if name not in fns:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    return fns[name](seed=seed)
