import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedflow import ot
from fedflow.data import make_rng

from oracles import brute_force_assignment, half_sq


def test_cost_matrix_entries():
    rng = np.random.default_rng(0)
    x0, x1 = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    C = ot.cost_matrix(x0, x1)
    for i in range(4):
        for j in range(5):
            assert C[i, j] == pytest.approx(half_sq(x0[i], x1[j]), rel=1e-14)


def test_identical_sets_give_identity():
    x = np.random.default_rng(1).normal(size=(9, 2))
    plan = ot.solve_exact(x, x)
    assert plan.perm.tolist() == list(range(9))
    assert plan.total_cost == 0.0


def test_two_point_example():
    plan = ot.solve_exact(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[0.0, 1.0], [1.0, 1.0]]))
    assert plan.perm.tolist() == [0, 1]
    assert plan.total_cost == 1.0
    assert np.array_equal(plan.mass(), np.eye(2) / 2)


def test_exact_matches_brute_force_100_instances():
    rng = make_rng(2)
    for _ in range(100):
        n = int(rng.integers(1, 8))
        x0, x1 = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
        want, _ = brute_force_assignment(x0, x1)
        got = ot.solve_exact(x0, x1, certify=True)
        assert abs(got.total_cost - want) <= 1e-12 * max(want, 1e-300)
        assert got.dual_slack <= 1e-8


def test_certificate_flags_suboptimal_permutation():
    x0 = np.array([[0.0, 0.0], [1.0, 0.0]])
    x1 = np.array([[0.0, 1.0], [1.0, 1.0]])
    C = ot.cost_matrix(x0, x1)
    assert ot.assignment_dual_slack(C, np.array([1, 0])) >= 0.5
    assert ot.assignment_dual_slack(C, np.array([0, 1])) == 0.0


@given(arrays(np.float64, (6, 2), elements=st.floats(-10, 10)),
       arrays(np.float64, (6, 2), elements=st.floats(-10, 10)))
@settings(max_examples=60, deadline=None)
def test_cost_symmetry(x0, x1):
    a = ot.solve_exact(x0, x1).total_cost
    b = ot.solve_exact(x1, x0).total_cost
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


@given(arrays(np.float64, (5, 2), elements=st.floats(-5, 5)))
@settings(max_examples=30, deadline=None)
def test_duplicate_points_allowed(x):
    x1 = np.vstack([x[:1]] * 5)
    plan = ot.solve_exact(x, x1)
    assert sorted(plan.perm.tolist()) == list(range(5))
    assert plan.total_cost == pytest.approx(sum(half_sq(r, x[0]) for r in x), rel=1e-12, abs=1e-12)


def test_cap_and_unequal_sizes():
    rng = np.random.default_rng(3)
    with pytest.raises(ot.OTError):
        ot.solve_exact(rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), cap=4)
    x0, x1 = rng.normal(size=(3, 2)), rng.normal(size=(5, 2))
    plan = ot.solve_exact(x0, x1)
    assert plan.kind == "dense"
    assert ot.marginal_violation(plan) < 1e-8
    assert plan.total_cost == pytest.approx(float((plan.matrix * plan.cost).sum()), rel=1e-10)


def test_dense_agrees_with_assignment_on_uniform_square():
    rng = np.random.default_rng(4)
    x0, x1 = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    C = ot.cost_matrix(x0, x1)
    dense = ot.solve_dense(np.full(6, 1 / 6), np.full(6, 1 / 6), C)
    assert dense.total_cost == pytest.approx(ot.solve_assignment(C).expected_cost, rel=1e-10)


def _mixture_instance(rng):
    mu = rng.normal(size=(int(rng.integers(1, 8)), 2))
    a = rng.dirichlet(np.ones(len(mu)))
    nus = []
    for _ in range(int(rng.integers(1, 4))):
        y = rng.normal(size=(int(rng.integers(1, 5)), 2))
        nus.append((y, rng.dirichlet(np.ones(len(y)))))
    lam = rng.dirichlet(np.ones(len(nus)))
    return mu, a, nus, lam


def test_mixture_convexity_200_instances():
    rng = make_rng(5)
    for _ in range(200):
        mu, a, nus, lam = _mixture_instance(rng)
        rhs = sum(l * ot.solve_dense(a, w, ot.cost_matrix(mu, y)).total_cost for l, (y, w) in zip(lam, nus))
        pts = np.vstack([y for y, _ in nus])
        wts = np.concatenate([l * w for l, (_, w) in zip(lam, nus)])
        lhs = ot.solve_dense(a, wts / wts.sum(), ot.cost_matrix(mu, pts)).total_cost
        assert lhs <= rhs + 1e-9


def test_sinkhorn_small_eps_on_identical_sets():
    x = np.random.default_rng(6).normal(size=(16, 2))
    plan = ot.solve_sinkhorn(x, x, epsilon=1e-4)
    assert plan.total_cost < 1e-3
    assert np.all(np.argmax(plan.matrix, axis=1) == np.arange(16))


def test_sinkhorn_large_eps_is_product():
    rng = np.random.default_rng(7)
    x0, x1 = rng.normal(size=(10, 2)), rng.normal(size=(12, 2))
    eps = 100 * ot.cost_matrix(x0, x1).mean()
    plan = ot.solve_sinkhorn(x0, x1, eps)
    assert np.all(np.abs(plan.matrix * 120 - 1) < 0.1)


def test_sinkhorn_fidelity_gaussian_batches():
    # x0 ~ N(0, I), x1 ~ N(mu, I) with |mu| = 2
    rng = make_rng(8)
    for _ in range(5):
        x0 = rng.normal(size=(64, 2))
        ang = rng.uniform(0, 2 * np.pi)
        x1 = rng.normal(size=(64, 2)) + 2.0 * np.array([np.cos(ang), np.sin(ang)])
        exact = ot.solve_exact(x0, x1).expected_cost
        plan = ot.solve_sinkhorn(x0, x1, 0.01 * ot.cost_matrix(x0, x1).mean())
        assert abs(plan.total_cost - exact) / exact < 0.02
        assert ot.marginal_violation(plan) < 1e-6


def test_sinkhorn_violation_history_non_increasing():
    rng = np.random.default_rng(9)
    x0, x1 = rng.normal(size=(40, 2)), rng.normal(size=(30, 2)) + 1.0
    plan = ot.solve_sinkhorn(x0, x1, 0.05 * ot.cost_matrix(x0, x1).mean(), tol=1e-14, max_iter=2000)
    h = np.asarray(plan.history)
    assert len(h) > 5
    assert np.all(np.diff(h) <= 1e-15)


def test_sinkhorn_reports_non_convergence():
    rng = np.random.default_rng(10)
    x0, x1 = rng.normal(size=(30, 2)), rng.normal(size=(30, 2))
    plan = ot.solve_sinkhorn(x0, x1, 1e-3 * ot.cost_matrix(x0, x1).mean(), max_iter=10, tol=1e-15)
    assert not plan.converged and plan.n_iter == 10
    with pytest.raises(ot.OTError):
        ot.solve_sinkhorn(x0, x1, 0.0)


def test_sample_pairs_assignment_support():
    rng = np.random.default_rng(11)
    x0, x1 = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
    plan = ot.solve_exact(x0, x1)
    a, b, i, j = ot.sample_pairs(ot.CouplingSampler(plan, make_rng(0)), 4000, x0, x1)
    assert np.array_equal(j, plan.perm[i])
    assert np.array_equal(a, x0[i]) and np.array_equal(b, x1[j])
    freq = np.bincount(i, minlength=8) / 4000
    assert np.all(np.abs(freq - 1 / 8) < 0.03)


def test_sample_pairs_product_uniform():
    P = np.full((4, 5), 1 / 20)
    plan = ot.TransportPlan("dense", np.zeros((4, 5)), matrix=P)
    n = 100_000
    _, _, i, j = ot.sample_pairs(ot.CouplingSampler(plan, make_rng(1)), n, np.zeros((4, 1)), np.zeros((5, 1)))
    counts = np.bincount(i * 5 + j, minlength=20)
    sd = np.sqrt(n * (1 / 20) * (19 / 20))
    assert np.all(np.abs(counts - n / 20) < 5 * sd)


def test_sample_pairs_single_cell_and_empty():
    P = np.zeros((3, 3))
    P[2, 1] = 1.0
    plan = ot.TransportPlan("dense", np.zeros((3, 3)), matrix=P)
    x = np.arange(6.0).reshape(3, 2)
    a, b, i, j = ot.sample_pairs(ot.CouplingSampler(plan, make_rng(2)), 50, x, x)
    assert set(i.tolist()) == {2} and set(j.tolist()) == {1}
    empty = ot.TransportPlan("dense", np.zeros((2, 2)), matrix=np.zeros((2, 2)))
    with pytest.raises(ot.OTError):
        ot.sample_pairs(ot.CouplingSampler(empty, make_rng(3)), 5, x[:2], x[:2])


def test_plan_csv(tmp_path):
    plan = ot.solve_exact(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[0.0, 1.0], [1.0, 1.0]]))
    path = tmp_path / "plan.csv"
    plan.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "i,j,mass,cost"
    assert lines[1:] == ["0,0,0.5,0.5", "1,1,0.5,0.5"]
