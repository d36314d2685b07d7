import numpy as np
import pytest

from helpers import dense_tr_decrease, small_instance
from riemix import model as gm
from riemix import spd
from riemix.derivatives import build_workspace, hessian_vector_product, riemannian_gradient
from riemix.em import EmConfig, KppConfig, fit_em, kmeanspp_init
from riemix.experiments import SimSpec, generate_mixture
from riemix.rtr import (
    TcgConfig,
    TrConfig,
    ZeroGradient,
    fit_rntr,
    initial_radius,
    lbfgs_preconditioner,
    solve_subproblem_tcg,
)
from riemix.spd import SpdMatrix, TangentVector, ThetaPoint


def euclidean_theta(n_blocks=1, block_dim=2, n_eta=0):
    """Identity blocks make the manifold metric plain Frobenius/Euclidean."""
    return ThetaPoint([SpdMatrix(np.eye(block_dim)) for _ in range(n_blocks)], np.zeros(n_eta))


class TestTcg:
    def test_identity_hessian_newton_step(self):
        rng = np.random.default_rng(0)
        theta = euclidean_theta(2, 2, 1)
        g = spd.random_tangent(theta, rng)
        res = solve_subproblem_tcg(theta, g, lambda v: v, 1e6, TcgConfig())
        assert res.stop_reason == "residual"
        assert res.iterations == 1
        assert spd.norm(theta, res.step + g) <= 1e-12

    def test_negative_curvature_hits_boundary(self):
        rng = np.random.default_rng(1)
        theta = euclidean_theta(1, 3, 0)
        g = spd.random_tangent(theta, rng)
        delta = 0.7
        res = solve_subproblem_tcg(theta, g, lambda v: -1.0 * v, delta, TcgConfig())
        assert res.stop_reason == "negative curvature"
        assert spd.norm(theta, res.step) == pytest.approx(delta, rel=1e-10)

    def test_boundary_exit(self):
        rng = np.random.default_rng(2)
        theta = euclidean_theta(1, 3, 0)
        g = spd.random_tangent(theta, rng)
        res = solve_subproblem_tcg(theta, g, lambda v: 0.01 * v, 0.5, TcgConfig())
        assert res.stop_reason == "boundary"
        assert spd.norm(theta, res.step) == pytest.approx(0.5, rel=1e-10)

    def test_model_decrease_bookkeeping(self):
        # the internally tracked decrease must equal a direct evaluation
        theta, data, cfg, rng = small_instance(3, d=2, k=2, m=30)
        ws = build_workspace(theta, data)
        gres = riemannian_gradient(theta, data, cfg, ws)
        hvp = lambda v: -1.0 * hessian_vector_product(theta, v, data, cfg, ws)
        g = -1.0 * gres.grad
        for delta in [1e-3, 0.1, 10.0]:
            res = solve_subproblem_tcg(theta, g, hvp, delta, TcgConfig())
            direct = -(
                spd.inner_product(theta, g, res.step)
                + 0.5 * spd.inner_product(theta, hvp(res.step), res.step)
            )
            assert res.model_decrease == pytest.approx(direct, rel=1e-9, abs=1e-12)

    def test_rho_is_one_on_exact_quadratic(self):
        # when the objective is its own model, actual / predicted = 1
        rng = np.random.default_rng(4)
        theta = euclidean_theta(2, 2, 1)
        g = spd.random_tangent(theta, rng)
        scale = rng.uniform(0.5, 2.0)
        hvp = lambda v: scale * v + 0.3 * spd.inner_product(theta, g, v) * g
        res = solve_subproblem_tcg(theta, g, hvp, 0.2, TcgConfig())
        quadratic_decrease = -(
            spd.inner_product(theta, g, res.step)
            + 0.5 * spd.inner_product(theta, hvp(res.step), res.step)
        )
        rho = quadratic_decrease / res.model_decrease
        assert rho == pytest.approx(1.0, abs=1e-12)

    def test_cauchy_decrease_floor(self):
        for seed in range(10):
            theta, data, cfg, rng = small_instance(30 + seed, d=2, k=2, m=25)
            ws = build_workspace(theta, data)
            gres = riemannian_gradient(theta, data, cfg, ws)
            hvp = lambda v: -1.0 * hessian_vector_product(theta, v, data, cfg, ws)
            g = -1.0 * gres.grad
            delta = float(rng.uniform(0.05, 5.0))
            res = solve_subproblem_tcg(theta, g, hvp, delta, TcgConfig())
            g_norm2 = spd.inner_product(theta, g, g)
            g_norm = np.sqrt(g_norm2)
            g_hg = spd.inner_product(theta, hvp(g), g)
            tau = min(g_norm2 / g_hg, delta / g_norm) if g_hg > 0 else delta / g_norm
            cauchy = tau * g_norm2 - 0.5 * tau * tau * g_hg
            assert res.model_decrease >= cauchy * (1.0 - 1e-9)

    def test_matches_dense_oracle(self):
        # small tangent dimension: full-subspace mode against the exact dense solve
        dense_cfg = TcgConfig(
            kappa=1e-6, delta_exponent=1.0, max_inner=50, subspace_refinement="full"
        )
        worst = 1.0
        for seed in range(12):
            theta, data, cfg, rng = small_instance(50 + seed, d=1, k=2, m=20)
            ws = build_workspace(theta, data)
            gres = riemannian_gradient(theta, data, cfg, ws)
            hvp = lambda v: -1.0 * hessian_vector_product(theta, v, data, cfg, ws)
            g = -1.0 * gres.grad
            delta = float(rng.uniform(0.1, 2.0))
            res = solve_subproblem_tcg(theta, g, hvp, delta, dense_cfg)
            exact = dense_tr_decrease(theta, g, hvp, delta)
            worst = min(worst, res.model_decrease / exact)
        assert worst >= 0.95

    def test_exit_refinement_never_hurts(self):
        for seed in range(6):
            theta, data, cfg, rng = small_instance(90 + seed, d=2, k=2, m=25)
            ws = build_workspace(theta, data)
            gres = riemannian_gradient(theta, data, cfg, ws)
            hvp = lambda v: -1.0 * hessian_vector_product(theta, v, data, cfg, ws)
            g = -1.0 * gres.grad
            delta = float(rng.uniform(0.05, 1.0))
            plain = solve_subproblem_tcg(theta, g, hvp, delta,
                                         TcgConfig(subspace_refinement="off"))
            refined = solve_subproblem_tcg(theta, g, hvp, delta,
                                           TcgConfig(subspace_refinement="exit"))
            assert refined.model_decrease >= plain.model_decrease * (1.0 - 1e-9)
            assert spd.norm(theta, refined.step) <= delta * (1.0 + 1e-9)


class TestLbfgsPreconditioner:
    def test_empty_history_identity(self):
        theta = euclidean_theta()
        assert lbfgs_preconditioner(theta, [], 5) is None

    def test_diagonal_quadratic_speedup(self):
        n = 8
        # K = n+1 identity blocks so the eta part is Euclidean R^n
        theta = euclidean_theta(n + 1, 2, n)
        diag = np.arange(1.0, n + 1.0)
        zero_blocks = [np.zeros((2, 2))] * (n + 1)

        def hvp(v):
            return TangentVector(zero_blocks, diag * v.eta)

        g = TangentVector(zero_blocks, np.ones(n))
        cfg = TcgConfig(kappa=1e-8, delta_exponent=1.0, max_inner=2 * n, precondition=False)
        plain = solve_subproblem_tcg(theta, g, hvp, 1e9, cfg)
        assert plain.iterations == n  # distinct eigenvalues: full CG sweep
        precond = lbfgs_preconditioner(theta, plain.pairs, memory=n)
        again = solve_subproblem_tcg(theta, g, hvp, 1e9, cfg, precond)
        assert again.iterations <= 2
        assert spd.norm(theta, again.step + TangentVector(zero_blocks, 1.0 / diag)) <= 1e-6

    def test_operator_positive_definite(self):
        theta, data, cfg, rng = small_instance(70, d=2, k=2, m=25)
        ws = build_workspace(theta, data)
        gres = riemannian_gradient(theta, data, cfg, ws)
        hvp = lambda v: -1.0 * hessian_vector_product(theta, v, data, cfg, ws)
        res = solve_subproblem_tcg(theta, -1.0 * gres.grad, hvp, 5.0, TcgConfig(max_inner=10))
        precond = lbfgs_preconditioner(theta, res.pairs, memory=10)
        if precond is None:
            pytest.skip("no curvature pairs collected")
        for _ in range(100):
            xi = spd.random_tangent(theta, rng)
            assert spd.inner_product(theta, precond(xi), xi) > 0.0


class TestInitialRadius:
    def test_identity_hessian(self):
        rng = np.random.default_rng(5)
        theta = euclidean_theta(1, 3, 0)
        g = spd.random_tangent(theta, rng, unit=False)
        got = initial_radius(theta, g, lambda v: v)
        assert got == pytest.approx(spd.norm(theta, g), rel=1e-12)

    def test_negative_curvature_fallback(self):
        rng = np.random.default_rng(6)
        theta = euclidean_theta(1, 3, 0)
        g = spd.random_tangent(theta, rng)
        assert initial_radius(theta, g, lambda v: -1.0 * v) == pytest.approx(1.0, rel=1e-12)

    def test_lower_clip(self):
        rng = np.random.default_rng(7)
        theta = euclidean_theta(1, 2, 0)
        g = 1e-10 * spd.random_tangent(theta, rng)
        assert initial_radius(theta, g, lambda v: v) == 1e-4

    def test_zero_gradient_rejected(self):
        theta = euclidean_theta()
        with pytest.raises(ZeroGradient):
            initial_radius(theta, TangentVector.zero(theta), lambda v: v)


def well_separated_instance(seed, d=2, k=3, m=300, separation=2.0, eccentricity=3.0):
    truth, data, labels = generate_mixture(
        SimSpec(dim=d, n_components=k, n_samples=m, separation=separation,
                eccentricity=eccentricity, seed=seed)
    )
    penalty = gm.build_penalty_config(data)
    init = kmeanspp_init(data, k, KppConfig(seed=seed))
    return data, init, penalty


class TestFitRntr:
    def test_converged_init_stops_immediately(self):
        data, init, penalty = well_separated_instance(0)
        first = fit_rntr(data, init, TrConfig(grad_tol=1e-8, all_diff_tol=0.0,
                                              max_iters=400), penalty)
        assert first.final_grad_norm <= 1e-8
        again = fit_rntr(data, first.params, TrConfig(grad_tol=1e-6), penalty)
        assert again.n_accepted == 0
        assert again.n_iterations == 0
        assert again.termination == "grad_tol"

    def test_reaches_gradient_tolerance(self):
        data, init, penalty = well_separated_instance(1)
        report = fit_rntr(data, init, TrConfig(grad_tol=1e-6, all_diff_tol=0.0,
                                               max_iters=200), penalty)
        assert report.termination == "grad_tol"
        assert report.final_grad_norm <= 1e-6

    def test_matches_em_objective(self):
        # moderate separation, eccentric covariances: both solvers land on the
        # same optimum from a shared init (low-separation basins can differ)
        for seed in [2, 3]:
            data, init, penalty = well_separated_instance(
                seed, m=500, separation=1.0, eccentricity=10.0
            )
            tr = fit_rntr(data, init, TrConfig(grad_tol=1e-7, all_diff_tol=1e-12,
                                               max_iters=300), penalty)
            em = fit_em(data, init, EmConfig(), penalty)
            assert tr.final_all >= em.final_all - 1e-6

    def test_trace_invariants(self):
        data, init, penalty = well_separated_instance(4)
        cfg = TrConfig(grad_tol=1e-6, all_diff_tol=0.0, max_iters=200)
        report = fit_rntr(data, init, cfg, penalty)
        delta_bar = max(r.delta for r in report.trace) * 10  # only an upper sanity bound
        accepted_objectives = [r.objective for r in report.trace if r.accepted]
        accepted_objectives.append(report.final_objective)
        assert all(b >= a - 1e-12 for a, b in zip(accepted_objectives, accepted_objectives[1:]))
        for rec in report.trace:
            assert 0.0 < rec.delta <= delta_bar
            assert rec.step_norm <= rec.delta + 1e-10
            assert rec.tcg_stop_reason in {"negative curvature", "boundary", "residual", "max_inner"}
            assert rec.min_weight is not None and rec.min_weight > 0.0
            assert rec.block_norm_ratio is not None and rec.block_norm_ratio > 0.0
        assert all(isinstance(b, SpdMatrix) for b in report.theta.s_blocks)

    def test_preconditioning_does_not_move_fixed_points(self):
        data, init, penalty = well_separated_instance(5, m=200)
        base = TrConfig(grad_tol=1e-8, all_diff_tol=0.0, max_iters=300)
        on = fit_rntr(data, init, base, penalty)
        off = fit_rntr(
            data,
            init,
            TrConfig(grad_tol=1e-8, all_diff_tol=0.0, max_iters=300,
                     tcg=TcgConfig(precondition=False)),
            penalty,
        )
        assert on.final_objective == pytest.approx(off.final_objective, abs=1e-6)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrConfig(rho_prime=0.3)
        with pytest.raises(ValueError):
            TrConfig(rho_prime=0.0)
        with pytest.raises(ValueError):
            TrConfig(omega1=0.8, omega2=0.2)
        with pytest.raises(ValueError):
            TrConfig(tau2=0.9)
        with pytest.raises(ValueError):
            TcgConfig(delta_exponent=1.5)
        with pytest.raises(ValueError):
            TcgConfig(kappa=0.0)
