import numpy as np
import pytest

from helpers import small_instance
from riemix import derivatives as dv
from riemix import model as gm
from riemix import spd
from riemix.derivatives import (
    StaleWorkspace,
    build_workspace,
    directional_derivative_fd,
    fd_gradient_check,
    hessian_vector_product,
    riemannian_gradient,
    second_derivative_fd,
)
from riemix.model import GmmParams, augment, build_penalty_config, forward_transform
from riemix.spd import SpdMatrix, SymMatrix, TangentVector, ThetaPoint


class TestGradientSpecialCases:
    def test_single_gaussian_mle_is_stationary(self):
        # K = 1, no penalty: the optimum block is the augmented second moment
        rng = np.random.default_rng(0)
        x = rng.standard_normal((40, 2))
        data = augment(x)
        y = data.augmented
        s_opt = SpdMatrix(y.T @ y / y.shape[0])
        theta = ThetaPoint([s_opt], np.zeros(0))
        res = riemannian_gradient(theta, data, None)
        assert np.linalg.norm(res.grad.s_blocks[0].entries) <= 1e-10 * np.linalg.norm(
            s_opt.entries
        )

    def test_penalty_mode_is_stationary(self):
        # penalty only: gradient vanishes at S = (beta/rho) Psi
        rng = np.random.default_rng(1)
        data = augment(rng.standard_normal((30, 2)))
        cfg = build_penalty_config(data)
        s_star = SpdMatrix((cfg.beta / cfg.rho) * cfg.psi_matrix.entries)
        theta = ThetaPoint([s_star], np.zeros(0))
        res = riemannian_gradient(theta, None, cfg)
        assert np.linalg.norm(res.grad.s_blocks[0].entries) <= 1e-14

    def test_identical_components_balanced_eta_gradient(self):
        rng = np.random.default_rng(2)
        data = augment(rng.standard_normal((25, 2)))
        cfg = build_penalty_config(data)
        cov = spd.random_spd(2, rng)
        p = GmmParams([0.5, 0.5], np.zeros((2, 2)), [cov, cov])
        res = riemannian_gradient(forward_transform(p), data, cfg)
        assert abs(res.grad.eta[0]) <= 1e-10

    def test_eta_gradient_two_forms_agree(self):
        # sum_i (f_r - alpha_r sum_j f_j) against the simplified counts form
        theta, data, cfg, rng = small_instance(3, d=2, k=3, m=40)
        resp = gm.responsibilities(theta, data)
        alphas = gm.weights_from_eta(theta.eta)
        direct = (resp.f[:, :-1] - alphas[:-1] * resp.f.sum(axis=1)[:, None]).sum(axis=0)
        res = riemannian_gradient(theta, data, None)
        np.testing.assert_allclose(res.grad.eta, direct, rtol=1e-12, atol=1e-12)

    def test_blocks_symmetric(self):
        theta, data, cfg, _ = small_instance(4, d=3, k=2)
        res = riemannian_gradient(theta, data, cfg)
        for b in res.grad.s_blocks:
            np.testing.assert_array_equal(b.entries, b.entries.T)

    def test_objective_value_shared(self):
        theta, data, cfg, _ = small_instance(5)
        res = riemannian_gradient(theta, data, cfg)
        assert res.objective_value == pytest.approx(
            gm.penalized_objective(theta, data, cfg), rel=1e-13
        )


class TestGradientFiniteDifferences:
    @pytest.mark.parametrize("seed,d,k", [(0, 1, 1), (1, 2, 2), (2, 3, 3), (3, 2, 3)])
    def test_directional_derivative(self, seed, d, k):
        theta, data, cfg, rng = small_instance(seed, d=d, k=k, m=30)
        res = riemannian_gradient(theta, data, cfg)
        for _ in range(6):
            xi = spd.random_tangent(theta, rng)
            fd = directional_derivative_fd(theta, xi, data, cfg)
            exact = spd.inner_product(theta, res.grad, xi)
            assert abs(exact - fd) / max(1.0, abs(fd)) <= 1e-5

    def test_superposition(self):
        theta, data, cfg, rng = small_instance(6, d=2, k=2)
        full = riemannian_gradient(theta, data, cfg).grad
        data_only = riemannian_gradient(theta, data, None).grad
        pen_only = riemannian_gradient(theta, None, cfg).grad
        combo = data_only + pen_only
        for a, b in zip(full.s_blocks, combo.s_blocks):
            np.testing.assert_allclose(a.entries, b.entries, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(full.eta, combo.eta, rtol=1e-12, atol=1e-14)


class TestHessianVectorProduct:
    def test_zero_maps_to_zero(self):
        theta, data, cfg, _ = small_instance(7)
        out = hessian_vector_product(theta, TangentVector.zero(theta), data, cfg, None)
        assert spd.norm(theta, out) == 0.0

    def test_linearity(self):
        theta, data, cfg, rng = small_instance(8, d=2, k=3)
        ws = build_workspace(theta, data)
        xi = spd.random_tangent(theta, rng)
        chi = spd.random_tangent(theta, rng)
        a, b = 1.7, -0.4
        lhs = hessian_vector_product(theta, a * xi + b * chi, data, cfg, ws)
        rhs = a * hessian_vector_product(theta, xi, data, cfg, ws) + b * hessian_vector_product(
            theta, chi, data, cfg, ws
        )
        assert spd.norm(theta, lhs - rhs) <= 1e-9 * max(1.0, spd.norm(theta, lhs))

    @pytest.mark.parametrize("seed,d,k", [(0, 1, 2), (1, 2, 2), (2, 3, 1), (3, 2, 3)])
    def test_geodesic_second_derivative(self, seed, d, k):
        theta, data, cfg, rng = small_instance(10 + seed, d=d, k=k, m=25)
        ws = build_workspace(theta, data)
        for _ in range(4):
            xi = spd.random_tangent(theta, rng)
            quad = spd.inner_product(theta, hessian_vector_product(theta, xi, data, cfg, ws), xi)
            fd = second_derivative_fd(theta, xi, data, cfg)
            assert abs(quad - fd) / max(1.0, abs(fd)) <= 1e-4

    def test_self_adjoint(self):
        theta, data, cfg, rng = small_instance(14, d=2, k=3, m=35)
        ws = build_workspace(theta, data)
        for _ in range(25):
            xi = spd.random_tangent(theta, rng)
            chi = spd.random_tangent(theta, rng)
            hx = hessian_vector_product(theta, xi, data, cfg, ws)
            hc = hessian_vector_product(theta, chi, data, cfg, ws)
            lhs = spd.inner_product(theta, hx, chi)
            rhs = spd.inner_product(theta, xi, hc)
            assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(lhs), abs(rhs))

    def test_superposition(self):
        theta, data, cfg, rng = small_instance(15, d=2, k=2)
        ws = build_workspace(theta, data)
        xi = spd.random_tangent(theta, rng)
        full = hessian_vector_product(theta, xi, data, cfg, ws)
        data_only = hessian_vector_product(theta, xi, data, None, ws)
        pen_only = hessian_vector_product(theta, xi, None, cfg, None)
        combo = data_only + pen_only
        assert spd.norm(theta, full - combo) <= 1e-12 * max(1.0, spd.norm(theta, full))

    def test_stale_workspace_rejected(self):
        theta, data, cfg, rng = small_instance(16)
        other, _, _, _ = small_instance(17)
        ws = build_workspace(other, data)
        with pytest.raises(StaleWorkspace):
            hessian_vector_product(theta, spd.random_tangent(theta, rng), data, cfg, ws)

    def test_outputs_symmetric(self):
        theta, data, cfg, rng = small_instance(18, d=3, k=2)
        ws = build_workspace(theta, data)
        out = hessian_vector_product(theta, spd.random_tangent(theta, rng), data, cfg, ws)
        for b in out.s_blocks:
            np.testing.assert_array_equal(b.entries, b.entries.T)


class TestFdGradientCheck:
    def test_exact_gradient_passes(self):
        theta, data, cfg, rng = small_instance(19, d=2, k=2)
        report = fd_gradient_check(theta, data, cfg, trials=10, rng=rng)
        assert report.max_rel_error <= 1e-5
        assert report.trials == 10
        assert report.worst_direction is not None

    def test_mutation_detected(self, monkeypatch):
        # a 1e-3 error on one gradient entry must trip the harness
        theta, data, cfg, rng = small_instance(20, d=2, k=2)
        true_gradient = dv.riemannian_gradient

        def perturbed(theta_, data_, cfg_, ws=None):
            res = true_gradient(theta_, data_, cfg_, ws)
            blocks = [b.entries.copy() for b in res.grad.s_blocks]
            blocks[0][0, 0] += 1e-3
            bad = TangentVector([SymMatrix(b) for b in blocks], res.grad.eta)
            return dv.GradResult(bad, res.norm, res.objective_value)

        monkeypatch.setattr(dv, "riemannian_gradient", perturbed)
        report = dv.fd_gradient_check(theta, data, cfg, trials=10, rng=rng)
        assert report.max_rel_error > 1e-5

    def test_zero_trials(self):
        theta, data, cfg, _ = small_instance(21)
        report = fd_gradient_check(theta, data, cfg, trials=0)
        assert report.trials == 0
        assert report.rel_errors.size == 0
        assert report.worst_direction is None
