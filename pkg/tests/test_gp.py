import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flars.errors import OptimizationFailedError
from flars.gp import (
    GpModel,
    Kernel,
    backfit,
    fit_g,
    fit_hyperparameters,
    inverse_distance_weights,
    kernel_matrix,
    marginal_loglik,
    predict_new_subject,
    predict_within_subject,
)


def se_cov(phi, kernel, noise=False):
    """Dense covariance computed independently, element by element."""
    phi = np.atleast_2d(phi)
    n = phi.shape[0]
    K = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            d2 = np.sum(kernel.w * (phi[i] - phi[j]) ** 2)
            K[i, j] = kernel.v1 * np.exp(-0.5 * d2)
    if noise:
        K += kernel.sigma ** 2 * np.eye(n)
    return K


class TestKernel:
    def test_hand_computed_matrix(self):
        # v1=1, w=2, sigma=0.1, phi = 0, 0.5, 1
        k = Kernel(v1=1.0, w=np.array([2.0]), sigma=0.1)
        phi = np.array([[0.0], [0.5], [1.0]])
        K = kernel_matrix(phi, phi, k, include_noise=True)
        e_quarter = np.exp(-0.25)
        expected = np.array([
            [1.01, e_quarter, np.exp(-1.0)],
            [e_quarter, 1.01, e_quarter],
            [np.exp(-1.0), e_quarter, 1.01],
        ])
        assert np.allclose(K, expected, atol=1e-12)

    def test_matches_elementwise_oracle(self, rng):
        k = Kernel(v1=0.7, w=np.array([1.5, 0.3]), sigma=0.05)
        phi = rng.standard_normal((12, 2))
        assert np.allclose(kernel_matrix(phi, phi, k, include_noise=True),
                           se_cov(phi, k, noise=True), atol=1e-14)

    def test_cross_matrix_no_noise_option(self, rng):
        k = Kernel(v1=1.0, w=np.array([1.0]), sigma=0.1)
        a, b = rng.standard_normal((4, 1)), rng.standard_normal((6, 1))
        K = kernel_matrix(a, b, k)
        assert K.shape == (4, 6)
        with pytest.raises(ValueError):
            kernel_matrix(a, b, k, include_noise=True)

    def test_dimension_check(self, rng):
        k = Kernel(v1=1.0, w=np.array([1.0, 1.0]), sigma=0.1)
        with pytest.raises(ValueError):
            kernel_matrix(rng.standard_normal((5, 1)),
                          rng.standard_normal((5, 1)), k)

    def test_positive_parameters_required(self):
        with pytest.raises(ValueError):
            Kernel(v1=-1.0, w=np.array([1.0]), sigma=0.1)
        with pytest.raises(ValueError):
            Kernel(v1=1.0, w=np.array([0.0]), sigma=0.1)
        with pytest.raises(ValueError):
            Kernel(v1=1.0, w=np.array([1.0]), sigma=0.0)

    def test_log_vector_round_trip(self):
        k = Kernel(v1=0.3, w=np.array([2.0, 0.5, 7.0]), sigma=0.02)
        k2 = Kernel.from_log_vector(k.to_log_vector())
        assert k2.v1 == pytest.approx(k.v1)
        assert np.allclose(k2.w, k.w)
        assert k2.sigma == pytest.approx(k.sigma)

    @given(st.integers(0, 100))
    @settings(max_examples=30, deadline=None)
    def test_psd(self, seed):
        r = np.random.default_rng(seed)
        k = Kernel(v1=float(r.uniform(0.1, 3)), w=r.uniform(0.1, 5, size=2),
                   sigma=float(r.uniform(0.01, 1)))
        phi = r.standard_normal((10, 2))
        K = kernel_matrix(phi, phi, k, include_noise=True)
        assert np.linalg.eigvalsh(K).min() > 0


class TestMarginalLoglik:
    def test_value_against_dense_oracle(self, rng):
        k = Kernel(v1=0.8, w=np.array([1.2]), sigma=0.3)
        phi = rng.standard_normal((15, 1))
        r = rng.standard_normal(15)
        subj = np.repeat([0, 1, 2], 5)
        ll, _ = marginal_loglik(k.to_log_vector(), phi, r, subj)
        # oracle: sum of per-block Gaussian log densities
        expected = 0.0
        for s in range(3):
            rows = subj == s
            K = se_cov(phi[rows], k, noise=True)
            rb = r[rows]
            sign, logdet = np.linalg.slogdet(K)
            expected += (-0.5 * rb @ np.linalg.solve(K, rb) - 0.5 * logdet
                         - 0.5 * rb.size * np.log(2 * np.pi))
        assert ll == pytest.approx(expected, abs=1e-10)

    def test_gradient_against_finite_differences(self):
        worst = 0.0
        for seed in range(20):
            r = np.random.default_rng(seed)
            phi = r.standard_normal((12, 2))
            resid = r.standard_normal(12)
            subj = np.repeat([0, 1], 6)
            theta = r.uniform(-1.5, 1.0, size=4)
            _, grad = marginal_loglik(theta, phi, resid, subj)
            h = 1e-6
            for j in range(4):
                e = np.zeros(4)
                e[j] = h
                lp, _ = marginal_loglik(theta + e, phi, resid, subj)
                lm, _ = marginal_loglik(theta - e, phi, resid, subj)
                fd = (lp - lm) / (2 * h)
                denom = max(abs(fd), 1.0)
                worst = max(worst, abs(grad[j] - fd) / denom)
        assert worst < 1e-4

    def test_block_diagonal_equals_sum_of_subjects(self, rng):
        k = Kernel(v1=1.0, w=np.array([1.0]), sigma=0.2)
        phi = rng.standard_normal((10, 1))
        r = rng.standard_normal(10)
        subj = np.repeat([0, 1], 5)
        ll, _ = marginal_loglik(k.to_log_vector(), phi, r, subj)
        ll0, _ = marginal_loglik(k.to_log_vector(), phi[:5], r[:5], None)
        ll1, _ = marginal_loglik(k.to_log_vector(), phi[5:], r[5:], None)
        assert ll == pytest.approx(ll0 + ll1, abs=1e-10)


class TestFitG:
    def test_matches_dense_formulas(self, rng):
        k = Kernel(v1=0.9, w=np.array([2.0]), sigma=0.25)
        phi = rng.standard_normal((12, 1))
        r = rng.standard_normal(12)
        subj = np.repeat([0, 1, 2], 4)
        model = GpModel(kernel=k, train_phi=phi, train_resid=r, subject_index=subj)
        g_hat, g_var = fit_g(model)
        for s in range(3):
            rows = np.flatnonzero(subj == s)
            c = se_cov(phi[rows], k)
            K = c + k.sigma ** 2 * np.eye(rows.size)
            assert np.allclose(g_hat[rows], c @ np.linalg.solve(K, r[rows]),
                               atol=1e-10)
            assert np.allclose(g_var[rows],
                               k.sigma ** 2 * np.diag(np.linalg.solve(K, c)),
                               atol=1e-10)

    def test_small_noise_interpolates(self, rng):
        k = Kernel(v1=1.0, w=np.array([1.0]), sigma=1e-5)
        phi = np.linspace(-1, 1, 8)[:, None]
        r = np.sin(2 * phi).ravel()
        model = GpModel(kernel=k, train_phi=phi, train_resid=r,
                        subject_index=np.zeros(8, dtype=int))
        g_hat, g_var = fit_g(model)
        assert np.allclose(g_hat, r, atol=1e-6)
        assert np.all(g_var >= 0)

    def test_large_noise_shrinks_to_zero(self, rng):
        k = Kernel(v1=0.1, w=np.array([1.0]), sigma=100.0)
        phi = rng.standard_normal((10, 1))
        r = rng.standard_normal(10)
        model = GpModel(kernel=k, train_phi=phi, train_resid=r,
                        subject_index=np.zeros(10, dtype=int))
        g_hat, _ = fit_g(model)
        assert np.max(np.abs(g_hat)) < 1e-3 * np.max(np.abs(r))


class TestPrediction:
    def _model(self, rng, k=None):
        k = k or Kernel(v1=1.0, w=np.array([1.5]), sigma=0.2)
        phi = rng.standard_normal((12, 1))
        r = rng.standard_normal(12)
        subj = np.repeat([0, 1, 2], 4)
        return GpModel(kernel=k, train_phi=phi, train_resid=r, subject_index=subj)

    def test_matches_dense_oracle(self, rng):
        model = self._model(rng)
        k = model.kernel
        phi_star = np.array([0.3])
        rows = np.flatnonzero(model.subject_index == 1)
        pb, rb = model.train_phi[rows], model.train_resid[rows]
        c = se_cov(pb, k)
        K = c + k.sigma ** 2 * np.eye(rows.size)
        cs = np.array([k.v1 * np.exp(-0.5 * k.w[0] * (p[0] - 0.3) ** 2) for p in pb])
        mean_o = 5.0 + cs @ np.linalg.solve(K, rb)
        var_o = k.v1 - cs @ np.linalg.solve(K, cs) + k.sigma ** 2
        mean, var = predict_within_subject(model, 5.0, phi_star, 1)
        assert mean == pytest.approx(mean_o, abs=1e-10)
        assert var == pytest.approx(var_o, abs=1e-10)

    def test_variance_at_least_noise(self, rng):
        model = self._model(rng)
        for x in np.linspace(-3, 3, 11):
            _, var = predict_within_subject(model, 0.0, np.array([x]), 0)
            assert var >= model.kernel.sigma ** 2 - 1e-10

    def test_far_point_reverts_to_fixed(self, rng):
        model = self._model(rng)
        mean, var = predict_within_subject(model, 2.5, np.array([1e4]), 2)
        assert mean == pytest.approx(2.5, abs=1e-8)
        assert var == pytest.approx(model.kernel.v1 + model.kernel.sigma ** 2,
                                    abs=1e-8)

    def test_unknown_subject_raises(self, rng):
        model = self._model(rng)
        with pytest.raises(KeyError):
            predict_within_subject(model, 0.0, np.array([0.0]), 99)

    def test_new_subject_average(self):
        assert predict_new_subject([1.0, 2.0, 6.0]) == pytest.approx(3.0)
        assert predict_new_subject([1.0, 3.0], weights=[0.25, 0.75]) == 2.5

    def test_new_subject_validation(self):
        with pytest.raises(ValueError):
            predict_new_subject([])
        with pytest.raises(ValueError):
            predict_new_subject([1.0, 2.0], weights=[0.5])
        with pytest.raises(ValueError):
            predict_new_subject([1.0, 2.0], weights=[0.9, 0.9])

    def test_inverse_distance_weights(self):
        groups = [np.array([[0.0]]), np.array([[1.0]]), np.array([[10.0]])]
        w = inverse_distance_weights(groups, np.array([0.0]))
        assert w.sum() == pytest.approx(1.0)
        assert w[0] > w[1] > w[2]


class TestHyperparameterFit:
    def test_recovers_generating_kernel(self):
        r = np.random.default_rng(5)
        true = Kernel(v1=1.0, w=np.array([4.0]), sigma=0.05)
        phi = r.uniform(-1, 1, size=(120, 1))
        subj = np.repeat(np.arange(12), 10)
        resid = np.empty(120)
        for s in range(12):
            rows = subj == s
            K = se_cov(phi[rows], true)
            resid[rows] = np.linalg.cholesky(K + 1e-10 * np.eye(10)) \
                @ r.standard_normal(10)
        resid += true.sigma * r.standard_normal(120)
        k = fit_hyperparameters(phi, resid, subj, n_restarts=3, seed=1)
        assert 0.3 < k.v1 < 3.0
        assert 1.0 < k.w[0] < 16.0
        assert 0.02 < k.sigma < 0.15

    def test_requires_enough_points(self, rng):
        with pytest.raises(ValueError):
            fit_hyperparameters(rng.standard_normal((3, 1)),
                                rng.standard_normal(3))

    def test_deterministic_for_seed(self, rng):
        phi = rng.standard_normal((30, 1))
        resid = rng.standard_normal(30)
        a = fit_hyperparameters(phi, resid, None, n_restarts=2, seed=3)
        b = fit_hyperparameters(phi, resid, None, n_restarts=2, seed=3)
        assert a.to_log_vector() == pytest.approx(b.to_log_vector())


class TestBackfit:
    def test_recovers_linear_plus_gp(self):
        r = np.random.default_rng(11)
        n_subj, visits = 10, 8
        n = n_subj * visits
        subj = np.repeat(np.arange(n_subj), visits)
        phi = r.uniform(-1, 1, size=(n, 1))
        z = r.standard_normal(n)
        true_k = Kernel(v1=0.5, w=np.array([6.0]), sigma=0.05)
        g = np.empty(n)
        for s in range(n_subj):
            rows = subj == s
            K = se_cov(phi[rows], true_k)
            g[rows] = np.linalg.cholesky(K + 1e-10 * np.eye(visits)) \
                @ r.standard_normal(visits)
        y = 2.0 * z + g + true_k.sigma * r.standard_normal(n)

        # no free intercept: a constant would trade off against the
        # per-subject levels the process absorbs, and the sweep would drift
        def refit_fixed(y_tilde):
            beta = float(z @ y_tilde) / float(z @ z)
            return {"z": beta}, beta * z

        fit = backfit(y, refit_fixed, phi, subj, max_sweeps=30, n_restarts=2,
                      seed=2)
        assert fit.converged
        assert fit.fixed_coefs["z"] == pytest.approx(2.0, rel=0.1)
        # combined fit explains most of the variance
        rss = float(np.sum((y - fit.fitted) ** 2))
        assert rss < 0.1 * float(np.sum((y - y.mean()) ** 2))

    def test_reports_phi_standardization(self, rng):
        n = 40
        subj = np.repeat(np.arange(8), 5)
        phi = rng.uniform(0, 10, size=(n, 1))
        z = rng.standard_normal(n)
        y = z + 0.1 * rng.standard_normal(n)

        def refit_fixed(y_tilde):
            beta = float(z @ y_tilde) / float(z @ z)
            return {"z": beta}, beta * z

        fit = backfit(y, refit_fixed, phi, subj, max_sweeps=5, n_restarts=1)
        assert fit.diagnostics["phi_mean"] == pytest.approx(phi.mean(axis=0))
        assert fit.diagnostics["phi_sd"] == pytest.approx(phi.std(axis=0, ddof=1))
        assert fit.n_backfit_iters <= 5
        # the stored GP trains on the residual around the final fixed part
        assert fit.gp.train_resid.size == n
