import numpy as np
import pytest

import mrflp as M
from mrflp.errors import InfeasibleMarginalsError

import oracles


class TestTransportProblem:
    def test_rescaled_on_ingest(self):
        p = M.TransportProblem([[0.0, 1.0]], [2.0], [1.0, 3.0])
        assert p.row_marginal.sum() == pytest.approx(1.0)
        assert p.col_marginal.sum() == pytest.approx(1.0)

    def test_negative_marginal_rejected(self):
        with pytest.raises(InfeasibleMarginalsError):
            M.TransportProblem([[0.0, 1.0]], [-0.5], [0.5, 0.5])

    def test_zero_mass_rejected(self):
        with pytest.raises(InfeasibleMarginalsError):
            M.TransportProblem([[0.0], [0.0]], [0.0, 0.0], [1.0])


class TestExactTransport:
    def test_one_by_one(self):
        res = M.solve_transport(M.TransportProblem([[7.5]], [1.0], [1.0]))
        assert res.plan[0, 0] == pytest.approx(1.0)
        assert res.cost == pytest.approx(7.5)

    def test_diagonal_optimum(self):
        p = M.TransportProblem([[0.0, 1.0], [1.0, 0.0]], [0.5, 0.5], [0.5, 0.5])
        res = M.solve_transport(p)
        brute_cost, brute_plan = oracles.transport_bruteforce(p.cost, p.row_marginal, p.col_marginal)
        assert res.cost == pytest.approx(brute_cost, abs=1e-12)
        np.testing.assert_allclose(res.plan, [[0.5, 0.0], [0.0, 0.5]], atol=1e-12)
        np.testing.assert_allclose(brute_plan, res.plan, atol=1e-12)

    def test_plan_forced_by_degenerate_marginals(self):
        p = M.TransportProblem([[1.0, 0.0], [0.0, 1.0]], [1.0, 0.0], [0.5, 0.5])
        res = M.solve_transport(p)
        np.testing.assert_allclose(res.plan, [[0.5, 0.5], [0.0, 0.0]], atol=1e-12)
        assert res.cost == pytest.approx(0.5)

    def test_matches_bruteforce_on_random_instances(self):
        rng = np.random.default_rng(99)
        for _ in range(60):
            n, m = rng.integers(1, 5), rng.integers(1, 5)
            cost = rng.uniform(-5, 5, (n, m))
            r = rng.random(n)
            s = rng.random(m)
            p = M.TransportProblem(cost, r, s)
            res = M.solve_transport(p)
            brute_cost, _ = oracles.transport_bruteforce(p.cost, p.row_marginal, p.col_marginal)
            assert res.cost == pytest.approx(brute_cost, abs=1e-10)

    def test_dual_certificate(self):
        rng = np.random.default_rng(7)
        for _ in range(40):
            n, m = rng.integers(2, 6), rng.integers(2, 6)
            p = M.TransportProblem(rng.uniform(-1, 1, (n, m)), rng.random(n), rng.random(m))
            res = M.solve_transport(p)
            slack = p.cost - res.row_potentials[:, None] - res.col_potentials[None, :]
            assert slack.min() >= -1e-9
            # complementary slackness on the basis
            assert np.max(np.abs(slack[res.basis])) <= 1e-9
            # duality: certified value equals the plan cost
            dual_val = res.row_potentials @ p.row_marginal + res.col_potentials @ p.col_marginal
            assert dual_val == pytest.approx(res.cost, abs=1e-9)

    def test_zero_marginal_entries_keep_basis_size(self):
        p = M.TransportProblem([[1.0, 2.0, 3.0]] * 3, [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
        res = M.solve_transport(p)
        assert res.basis.sum() == 5  # n + m - 1 arcs, zero flows included
        assert res.plan[0, 1] == pytest.approx(1.0)

    def test_never_better_than_product_plan(self):
        rng = np.random.default_rng(13)
        for _ in range(30):
            n, m = rng.integers(2, 5), rng.integers(2, 5)
            p = M.TransportProblem(rng.uniform(0, 3, (n, m)), rng.random(n), rng.random(m))
            res = M.solve_transport(p)
            product_cost = float(p.row_marginal @ p.cost @ p.col_marginal)
            assert res.cost <= product_cost + 1e-12


class TestEntropicTransport:
    def test_zero_cost_uniform_gives_product(self):
        p = M.TransportProblem(np.zeros((2, 2)), [0.5, 0.5], [0.5, 0.5])
        res = M.solve_transport_entropic(p, 1.0, 1, p.row_marginal, p.col_marginal)
        np.testing.assert_allclose(res.plan, 0.25, atol=1e-9)

    def test_large_rho_approaches_product_measure(self):
        rng = np.random.default_rng(3)
        c = rng.random((3, 3))
        p = M.TransportProblem(c, rng.random(3), rng.random(3))
        res = M.solve_transport_entropic(p, 1e6, 1, p.row_marginal, p.col_marginal)
        product = np.outer(p.row_marginal, p.col_marginal)
        np.testing.assert_allclose(res.plan, product, atol=1e-6)

    def test_matches_one_dof_oracle_on_two_by_two(self):
        # with both marginals fixed a 2x2 plan has one degree of freedom;
        # minimize the objective along it with a bounded scalar search
        from scipy.optimize import minimize_scalar

        rng = np.random.default_rng(5)
        for _ in range(20):
            c = rng.uniform(-2, 2, (2, 2))
            p = M.TransportProblem(c, rng.random(2) + 0.1, rng.random(2) + 0.1)
            rho = float(rng.choice([1.0, 0.3, 0.05]))
            res = M.solve_transport_entropic(p, rho, 1, p.row_marginal, p.col_marginal)
            r, s = p.row_marginal, p.col_marginal
            ref = np.outer(r, s)

            def objective(t):
                plan = np.array([[t, r[0] - t], [s[0] - t, r[1] - s[0] + t]])
                if plan.min() < 0:
                    return np.inf
                pos = plan > 0
                ent = float(np.sum(plan[pos] * np.log(plan[pos] / ref[pos])))
                return float(np.sum(c * plan)) + rho * ent

            lo = max(0.0, s[0] - r[1])
            hi = min(r[0], s[0])
            best = minimize_scalar(objective, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-12})
            np.testing.assert_allclose(res.plan[0, 0], best.x, atol=1e-6)
            assert res.objective == pytest.approx(best.fun, abs=1e-6)

    def test_positive_plans_for_positive_marginals(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n, m = rng.integers(2, 5), rng.integers(2, 5)
            p = M.TransportProblem(rng.uniform(0, 2, (n, m)), rng.random(n) + 0.05, rng.random(m) + 0.05)
            res = M.solve_transport_entropic(p, 0.1, 2, p.row_marginal, p.col_marginal)
            assert res.plan.min() > 0.0

    def test_zero_marginal_rows_are_zero(self):
        p = M.TransportProblem(np.ones((3, 2)), [0.5, 0.0, 0.5], [0.6, 0.4])
        res = M.solve_transport_entropic(p, 0.5, 1, p.row_marginal, p.col_marginal)
        np.testing.assert_array_equal(res.plan[1], 0.0)
        assert res.residual < 1e-10

    def test_small_rho_limit_matches_exact_solver(self):
        rng = np.random.default_rng(17)
        for _ in range(25):
            n, m = rng.integers(2, 5), rng.integers(2, 5)
            p = M.TransportProblem(rng.random((n, m)), rng.random(n), rng.random(m))
            exact = M.solve_transport(p)
            ent = M.solve_transport_entropic(p, 1e-6, 1, p.row_marginal, p.col_marginal)
            assert float(np.sum(p.cost * ent.plan)) == pytest.approx(exact.cost, abs=1e-4)

    def test_rho_must_be_positive(self):
        p = M.TransportProblem(np.zeros((2, 2)), [0.5, 0.5], [0.5, 0.5])
        with pytest.raises(ValueError):
            M.solve_transport_entropic(p, 0.0, 1, p.row_marginal, p.col_marginal)
