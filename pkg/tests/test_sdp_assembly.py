import numpy as np
import pytest

from lpvmpc import (
    MpcIngredients,
    SdpSolution,
    SolverOptions,
    assemble,
    extract,
    solve,
)
from lpvmpc.sdp_assembly import EPS_SCALE
from lpvmpc.solver_backend import SolverResult

from helpers import X0, preset_ingredients


# step-0 optimal value on the reference dataset (c=1, T=20, data seed 3)
GAMMA_REFERENCE = 1.5203469454635161


def reference_problem(canon, **kw):
    return assemble(canon["x0"], canon["ds"], canon["bound"], canon["ing"],
                    cd=(canon["plant"].C, canon["plant"].D), **kw)


class TestIngredients:
    def test_cholesky_factors(self):
        ing = preset_ingredients()
        np.testing.assert_allclose(ing.M_Q.T @ ing.M_Q, ing.Q, atol=1e-14)
        np.testing.assert_allclose(ing.M_R.T @ ing.M_R, ing.R, atol=1e-14)
        assert np.allclose(ing.M_Q, np.triu(ing.M_Q))

    def test_inverses(self):
        ing = preset_ingredients()
        np.testing.assert_allclose(ing.S_x_inv @ ing.S_x, np.eye(2),
                                   atol=1e-12)
        np.testing.assert_allclose(ing.S_u_inv @ ing.S_u, np.eye(1),
                                   atol=1e-12)
        assert (ing.n_x, ing.n_u) == (2, 1)

    def test_rejects_indefinite_cost(self):
        with pytest.raises(ValueError, match="positive definite"):
            MpcIngredients(Q=-np.eye(2), R=np.eye(1), S_u=np.eye(1),
                           S_x=np.eye(2))

    def test_rejects_asymmetric(self):
        q = np.array([[1.0, 0.2], [0.0, 1.0]])
        with pytest.raises(ValueError, match="symmetric"):
            MpcIngredients(Q=q, R=np.eye(1), S_u=np.eye(1), S_x=np.eye(2))

    def test_rejects_dimension_mismatch(self):
        with pytest.raises(ValueError, match="n_x"):
            MpcIngredients(Q=np.eye(2), R=np.eye(1), S_u=np.eye(1),
                           S_x=np.eye(3))

    def test_rejects_non_finite(self):
        q = np.eye(2)
        q[0, 0] = np.inf
        with pytest.raises(ValueError, match="finite"):
            MpcIngredients(Q=q, R=np.eye(1), S_u=np.eye(1), S_x=np.eye(2))


class TestAssembledProblem:
    def test_layout(self, canon):
        prob = reference_problem(canon)
        # gamma + vech(H) + vec(L) + T multipliers + lambda
        assert prob.n_vars == 1 + 3 + 2 + 20 + 1
        assert prob.idx_gamma == 0
        assert prob.idx_h0 == 1
        assert prob.idx_l0 == 4
        assert prob.idx_alpha0 == 6
        assert prob.idx_lam == 26
        assert [b0.shape[0] for b0, _ in prob.psd_blocks] == [3, 3, 4, 17]
        assert prob.objective[prob.idx_gamma] == 1.0
        assert np.count_nonzero(prob.objective) == 1

    def test_scalar_bounds(self, canon):
        prob = reference_problem(canon)
        bounds = dict(prob.nonneg)
        assert bounds[prob.idx_gamma] == prob.eps
        assert bounds[prob.idx_lam] == 0.0
        for k in range(20):
            assert bounds[prob.idx_alpha0 + k] == 0.0

    def test_default_eps_tracks_state_norm(self, canon):
        prob = reference_problem(canon)
        want = EPS_SCALE * (1.0 + np.linalg.norm(canon["x0"]))
        assert prob.eps == pytest.approx(want, rel=1e-12)

    def test_unpack_evaluate_consistency(self, canon):
        prob = reference_problem(canon)
        rng = np.random.default_rng(12)
        xvec = rng.standard_normal(prob.n_vars)
        gamma, h, l, alpha, lam = prob.unpack(xvec)
        assert gamma == xvec[0]
        np.testing.assert_array_equal(h, h.T)
        assert l.shape == (1, 2) and alpha.shape == (20,)
        # evaluate must agree with a direct sum over the request coefficients
        req = prob.to_request(SolverOptions())
        mats = prob.evaluate(xvec)
        for (b0, coeffs), m in zip(req.psd_blocks, mats):
            direct = b0.copy()
            for v, a in coeffs.items():
                direct = direct + xvec[v] * a
            np.testing.assert_allclose(m, direct, atol=1e-12)

    def test_vector_length_checked(self, canon):
        prob = reference_problem(canon)
        with pytest.raises(ValueError, match="length"):
            prob.unpack(np.zeros(5))
        with pytest.raises(ValueError, match="length"):
            prob.evaluate(np.zeros(5))

    def test_empty_dataset_drops_multipliers(self, canon):
        ds0 = canon["ds"].prefix(0)
        prob = assemble(canon["x0"], ds0, canon["bound"], canon["ing"],
                        cd=(canon["plant"].C, canon["plant"].D))
        assert prob.T == 0
        assert prob.n_vars == 1 + 3 + 2 + 0 + 1

    def test_input_validation(self, canon):
        plant = canon["plant"]
        with pytest.raises(ValueError, match="x_t"):
            assemble([1.0], canon["ds"], canon["bound"], canon["ing"],
                     cd=(plant.C, plant.D))
        with pytest.raises(ValueError, match="finite"):
            assemble([np.nan, 0.0], canon["ds"], canon["bound"],
                     canon["ing"], cd=(plant.C, plant.D))
        with pytest.raises(ValueError, match="eps"):
            reference_problem(canon, eps=0.0)
        with pytest.raises(ValueError, match="eps"):
            reference_problem(canon, eps=1.5)
        with pytest.raises(ValueError, match="C must be"):
            assemble(canon["x0"], canon["ds"], canon["bound"], canon["ing"],
                     cd=(np.zeros((3, 2)), plant.D))


class TestSolveAndExtract:
    def test_reference_objective(self, canon_sol0):
        assert canon_sol0.status == "optimal"
        assert canon_sol0.gamma == pytest.approx(GAMMA_REFERENCE, rel=1e-7)

    def test_solution_identities(self, canon_sol0, canon):
        sol = canon_sol0
        np.testing.assert_allclose(sol.F @ sol.H, sol.L, atol=1e-9)
        np.testing.assert_allclose(sol.P @ sol.H, sol.gamma * np.eye(2),
                                   atol=1e-8)
        assert np.linalg.eigvalsh(sol.P).min() > 0
        assert sol.lam >= 0 and (sol.alpha >= 0).all()
        value = canon["x0"] @ sol.P @ canon["x0"]
        assert value <= sol.gamma * (1.0 + 1e-9)

    def test_feasible_point_audit(self, canon, canon_sol0):
        prob = reference_problem(canon)
        audit = prob.audit(canon_sol0.solver_result.x)
        assert audit["min_margin"] >= -1e-7
        assert len(audit["block_margins"]) == 4
        assert len(audit["bound_slacks"]) == 22

    def test_infeasible_result_passthrough(self, canon):
        prob = reference_problem(canon)
        res = SolverResult(status="infeasible", x=None, objective=None,
                           solve_time=0.0, iterations=1,
                           certificate=np.zeros(3))
        sol = extract(prob, res)
        assert sol.status == "infeasible"
        assert sol.gamma is None and sol.F is None

    def test_solver_failure_passthrough(self, canon):
        prob = reference_problem(canon)
        res = SolverResult(status="iteration_limit", x=None, objective=None,
                           solve_time=0.0, iterations=200)
        sol = extract(prob, res)
        assert sol.status == "numerical_failure"
        assert sol.diagnostics["solver_status"] == "iteration_limit"

    def test_singular_h_degraded(self, canon, canon_sol0):
        prob = reference_problem(canon)
        x = np.array(canon_sol0.solver_result.x, dtype=float)
        x[prob.idx_h0:prob.idx_h0 + 3] = [1.0, 0.0, 1e-14]
        res = SolverResult(status="optimal", x=x, objective=float(x[0]),
                           solve_time=0.0, iterations=5)
        sol = extract(prob, res)
        assert sol.status == "numerical_failure"
        assert "singular" in sol.diagnostics["failure"]

    def test_infeasible_iterate_degraded(self, canon, canon_sol0):
        prob = reference_problem(canon)
        x = np.array(canon_sol0.solver_result.x, dtype=float)
        x[prob.idx_h0] *= 10.0
        res = SolverResult(status="optimal", x=x, objective=float(x[0]),
                           solve_time=0.0, iterations=5)
        sol = extract(prob, res)
        assert sol.status == "numerical_failure"
        assert sol.diagnostics["failure"] == "feasible-point audit failed"

    def test_status_vocabulary_enforced(self):
        with pytest.raises(ValueError, match="status"):
            SdpSolution(status="solved", x_t=np.zeros(2))

    def test_gamma_grows_when_data_shrinks(self, canon):
        opts = SolverOptions()
        gammas = []
        for t in (3, 10, 20):
            prob = assemble(canon["x0"], canon["ds"].prefix(t),
                            canon["bound"], canon["ing"],
                            cd=(canon["plant"].C, canon["plant"].D))
            sol = extract(prob, solve(prob.to_request(opts)))
            assert sol.status == "optimal"
            gammas.append(sol.gamma)
        assert gammas[0] >= gammas[1] >= gammas[2]
        assert gammas[2] == pytest.approx(GAMMA_REFERENCE, rel=1e-7)


class TestEpsFloor:
    def test_infeasible_when_eps_exceeds_value_scale(self, canon):
        # with a large strictness margin the same data admits no certificate
        prob = reference_problem(canon, eps=0.9)
        res = solve(prob.to_request(SolverOptions()))
        assert res.status == "infeasible"

    def test_value_tracks_eps_monotonically(self, canon):
        sols = []
        for eps in (1e-7, 1e-9):
            prob = reference_problem(canon, eps=eps)
            sols.append(extract(prob, solve(prob.to_request(SolverOptions()))))
        assert all(s.status == "optimal" for s in sols)
        # tightening the floor can only raise the optimal value, and the
        # shift stays proportional to eps (sensitivity is about 1e4 here)
        assert sols[0].gamma >= sols[1].gamma - 1e-9
        assert abs(sols[0].gamma - sols[1].gamma) <= 2e-3
