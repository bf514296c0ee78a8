import numpy as np
import pytest
from sklearn.base import clone

from flars import FunctionalLarsRegressor, GpMixedRegressor

from conftest import make_functional


def mixed_X(rng, n=60, q=40):
    x1 = make_functional(rng, n=n, q=q)
    x2 = make_functional(rng, n=n, q=q)
    z1 = rng.standard_normal(n)
    z2 = rng.standard_normal(n)
    t = np.linspace(0, 1, q)
    y = x1.values @ np.sin(2 * np.pi * t) / q + 2.0 * z1 \
        + 0.05 * rng.standard_normal(n)
    X = {"functional": {"f1": x1.values, "f2": x2.values},
         "scalar": {"z1": z1, "z2": z2},
         "grid": t}
    return X, y


class TestFunctionalLarsRegressor:
    def test_get_params_and_clone(self):
        est = FunctionalLarsRegressor(Q=10, stop="cp", seed=5)
        params = est.get_params()
        assert params["Q"] == 10
        assert params["stop"] == "cp"
        c = clone(est)
        assert c.get_params() == params

    def test_fit_predict(self, rng):
        X, y = mixed_X(rng)
        est = FunctionalLarsRegressor(Q=10).fit(X, y)
        assert "z1" in est.selected_ids_
        pred = est.predict(X)
        assert pred.shape == y.shape
        assert np.corrcoef(pred, y)[0, 1] > 0.95

    def test_scalar_only_input(self, rng):
        n = 50
        Z = rng.standard_normal((n, 3))
        y = Z @ np.array([2.0, 0.0, -1.0]) + 0.1 * rng.standard_normal(n)
        X = {"scalar": {f"z{j}": Z[:, j] for j in range(3)}}
        est = FunctionalLarsRegressor().fit(X, y)
        assert est.rep_ is None
        assert set(est.selected_ids_) >= {"z0", "z2"}

    def test_unfitted_predict_raises(self, rng):
        X, _ = mixed_X(rng)
        with pytest.raises(AttributeError):
            FunctionalLarsRegressor().predict(X)

    def test_lambda_validation(self, rng):
        X, y = mixed_X(rng)
        with pytest.raises(ValueError):
            FunctionalLarsRegressor(lambda1=0.5, lambda2="auto").fit(X, y)

    def test_coefficient_curve_shape(self, rng):
        X, y = mixed_X(rng)
        est = FunctionalLarsRegressor(Q=10).fit(X, y)
        if "f1" in est.selected_ids_:
            curve = est.coefficient_curve("f1")
            assert curve.shape == (40,)

    def test_deterministic(self, rng):
        X, y = mixed_X(rng)
        a = FunctionalLarsRegressor(Q=10).fit(X, y).predict(X)
        b = FunctionalLarsRegressor(Q=10).fit(X, y).predict(X)
        assert np.array_equal(a, b)


class TestGpMixedRegressor:
    def _data(self, seed=0):
        r = np.random.default_rng(seed)
        n_subj, visits = 8, 6
        n = n_subj * visits
        subject = np.repeat(np.arange(n_subj), visits)
        phi = r.uniform(-1, 1, size=(n, 1))
        z = r.standard_normal(n)
        levels = r.normal(scale=1.0, size=n_subj)
        y = 2.0 * z + levels[subject] + 0.1 * r.standard_normal(n)
        X = {"scalar": {"z": z}}
        return X, y, phi, subject

    def test_requires_phi_and_subject(self):
        X, y, phi, subject = self._data()
        with pytest.raises(ValueError):
            GpMixedRegressor().fit(X, y)

    def test_fit_improves_over_fixed_only(self):
        X, y, phi, subject = self._data(3)
        est = GpMixedRegressor(restarts=2, max_sweeps=10, tol=1e-3)
        est.fit(X, y, phi=phi, subject=subject)
        full = est.predict(X, phi=phi, subject=subject)
        fixed_only = est.predict(X)
        rss_full = np.sum((y - full) ** 2)
        rss_fixed = np.sum((y - fixed_only) ** 2)
        assert rss_full < 0.5 * rss_fixed

    def test_unseen_subject_falls_back_to_fixed(self):
        X, y, phi, subject = self._data(4)
        est = GpMixedRegressor(restarts=1, max_sweeps=5, tol=1e-3)
        est.fit(X, y, phi=phi, subject=subject)
        out = est.predict(X, phi=phi, subject=np.full(y.size, 999))
        assert np.array_equal(out, est.predict(X))

    def test_random_effects_shapes(self):
        X, y, phi, subject = self._data(5)
        est = GpMixedRegressor(restarts=1, max_sweeps=5, tol=1e-3)
        est.fit(X, y, phi=phi, subject=subject)
        g_hat, g_var = est.random_effects()
        assert g_hat.shape == y.shape
        assert np.all(g_var >= 0)
