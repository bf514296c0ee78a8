"""Estimator front end following the scikit-learn conventions.

The underlying machinery works with domain containers (candidate sets,
representations); these classes accept plain arrays and dictionaries so
the models compose with scikit-learn tooling (clone, grid search over
get_params, pipelines on the scalar side).
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .cca import PenaltyConfig
from .gp import backfit, fit_g, predict_within_subject
from .lars import CandidateSet, FlarsOptions, NormalizationRule, run_flars
from .representation import FunctionalSample, TimeGrid, build_representation

__all__ = ["FunctionalLarsRegressor", "GpMixedRegressor"]


def _as_candidate_set(X, rep) -> CandidateSet:
    """Accept a CandidateSet, or a dict with 'functional' (id -> (n, q)
    array), 'scalar' (id -> vector) and 'grid' entries."""
    if isinstance(X, CandidateSet):
        return X
    if not isinstance(X, dict):
        raise TypeError(
            "X must be a CandidateSet or a dict with 'functional'/'scalar' entries"
        )
    grid = X.get("grid")
    functional = []
    for fid, arr in (X.get("functional") or {}).items():
        if grid is None:
            raise ValueError("functional entries require a 'grid' entry in X")
        tg = grid if isinstance(grid, TimeGrid) else TimeGrid(np.asarray(grid, float))
        functional.append((fid, FunctionalSample(np.asarray(arr, float), tg)))
    scalar = [(sid, np.asarray(v, float)) for sid, v in (X.get("scalar") or {}).items()]
    return CandidateSet(functional=tuple(functional), scalar=tuple(scalar), rep=rep)


class FunctionalLarsRegressor(BaseEstimator, RegressorMixin):
    """Least angle regression over mixed scalar and functional covariates.

    Parameters
    ----------
    representation : {'GQ', 'BF', 'RDP'}, default 'GQ'
        How functional covariates are reduced to finite dimension.
    Q : int, default 18
        Quadrature points (GQ only).
    n_basis : int, default 12
        Spline basis size (BF only).
    normalization : {'Norm', 'Trace', 'Identity'}, default 'Norm'
    lambda1, lambda2 : 'auto' or float
        Roughness and ridge penalties; 'auto' tunes them per iteration.
    kappa : float or None
        Enables dropping of decayed variables when set (e.g. 0.05).
    stop : {'cd', 'cp', 'max_iter'}, default 'cd'
    cd_threshold_frac : float, default 0.10
    max_iter : int or None
    refit : bool, default True
        Re-estimate coefficients on the selected set by penalized least
        squares instead of using the accumulated path coefficients.
    seed : int, default 0

    Attributes
    ----------
    model_ : FittedModel
    selected_ids_ : list
    state_ : SelectionState
    diagnostics_ : StoppingDiagnostics
    """

    def __init__(self, representation="GQ", Q=18, n_basis=12,
                 normalization="Norm", lambda1="auto", lambda2="auto",
                 kappa=None, stop="cd", cd_threshold_frac=0.10,
                 max_iter=None, refit=True, seed=0):
        self.representation = representation
        self.Q = Q
        self.n_basis = n_basis
        self.normalization = normalization
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.kappa = kappa
        self.stop = stop
        self.cd_threshold_frac = cd_threshold_frac
        self.max_iter = max_iter
        self.refit = refit
        self.seed = seed

    def _options(self) -> FlarsOptions:
        pen = None
        if self.lambda1 != "auto" or self.lambda2 != "auto":
            if self.lambda1 == "auto" or self.lambda2 == "auto":
                raise ValueError("lambda1 and lambda2 must both be 'auto' or numeric")
            pen = PenaltyConfig(float(self.lambda1), float(self.lambda2))
        return FlarsOptions(
            pen=pen,
            norm=NormalizationRule(self.normalization),
            kappa=self.kappa,
            stop=self.stop,
            cd_threshold_frac=self.cd_threshold_frac,
            max_iter=self.max_iter,
            refit=self.refit,
            seed=self.seed,
        )

    def _rep(self, X):
        if isinstance(X, CandidateSet):
            return X.rep
        if not (X.get("functional") or {}):
            return None
        grid = X["grid"]
        tg = grid if isinstance(grid, TimeGrid) else TimeGrid(np.asarray(grid, float))
        kw = {"Q": self.Q} if self.representation == "GQ" else (
            {"n_basis": self.n_basis} if self.representation == "BF" else {})
        return build_representation(self.representation, tg, **kw)

    def fit(self, X, y):
        rep = self._rep(X)
        cands = _as_candidate_set(X, rep)
        y = np.asarray(y, dtype=float).ravel()
        state, diag, model = run_flars(y, cands, self._options())
        self.rep_ = rep
        self.state_ = state
        self.diagnostics_ = diag
        self.model_ = model
        self.selected_ids_ = list(model.selected_ids)
        return self

    def predict(self, X):
        if not hasattr(self, "model_"):
            raise AttributeError("estimator is not fitted")
        cands = _as_candidate_set(X, self.rep_)
        return self.model_.predict(cands)

    def coefficient_curve(self, cid):
        """Functional coefficient on the grid, raw-data scale."""
        return self.model_.coefficient_curve(cid)


class GpMixedRegressor(BaseEstimator, RegressorMixin):
    """Fixed-effects regression plus a per-subject Gaussian-process layer.

    The fixed part is a FunctionalLarsRegressor run to completion on the
    supplied candidates (selection is assumed done beforehand); the
    random part is a squared-exponential process over the covariates
    ``phi``, independent across subjects.

    Parameters mirror FunctionalLarsRegressor plus the backfit knobs.
    """

    def __init__(self, representation="GQ", Q=18, n_basis=12,
                 normalization="Norm", lambda1="auto", lambda2="auto",
                 max_sweeps=50, tol=1e-6, restarts=5, seed=0):
        self.representation = representation
        self.Q = Q
        self.n_basis = n_basis
        self.normalization = normalization
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.max_sweeps = max_sweeps
        self.tol = tol
        self.restarts = restarts
        self.seed = seed

    def fit(self, X, y, phi=None, subject=None):
        if phi is None or subject is None:
            raise ValueError("fit requires phi (n, H) and subject (n,) arrays")
        y = np.asarray(y, dtype=float).ravel()
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        if phi.shape[0] != y.size:
            phi = phi.T
        base = FunctionalLarsRegressor(
            representation=self.representation, Q=self.Q, n_basis=self.n_basis,
            normalization=self.normalization, lambda1=self.lambda1,
            lambda2=self.lambda2, stop="max_iter", seed=self.seed,
        )
        rep = base._rep(X)
        cands = _as_candidate_set(X, rep)

        def refit_fixed(y_tilde):
            _, _, m = run_flars(y_tilde, cands, base._options())
            return m, m.predict(cands)

        mixed = backfit(y, refit_fixed, phi, subject,
                        max_sweeps=self.max_sweeps, tol=self.tol,
                        n_restarts=self.restarts, seed=self.seed)
        self.rep_ = rep
        self.mixed_ = mixed
        self.model_ = mixed.fixed_coefs
        self.gp_ = mixed.gp
        self.converged_ = mixed.converged
        self.phi_mean_ = mixed.diagnostics["phi_mean"]
        self.phi_sd_ = mixed.diagnostics["phi_sd"]
        return self

    def predict(self, X, phi=None, subject=None):
        if not hasattr(self, "model_"):
            raise AttributeError("estimator is not fitted")
        cands = _as_candidate_set(X, self.rep_)
        fixed = self.model_.predict(cands)
        if phi is None or subject is None:
            return fixed
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        if phi.shape[0] != fixed.size:
            phi = phi.T
        phi_std = (phi - self.phi_mean_) / self.phi_sd_
        known = set(self.gp_.subjects())
        out = np.empty(fixed.size)
        for i in range(fixed.size):
            s = subject[i]
            key = s.item() if hasattr(s, "item") else s
            if key in known:
                out[i], _ = predict_within_subject(self.gp_, float(fixed[i]),
                                                   phi_std[i], key)
            else:
                out[i] = fixed[i]
        return out

    def random_effects(self):
        """Posterior mean and variance of the fitted random effects."""
        return fit_g(self.gp_)
