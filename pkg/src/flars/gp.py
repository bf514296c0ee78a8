"""Gaussian-process random effects for longitudinal residual structure.

The fixed-effects regression leaves a residual r = y - f(z, x(t)) that is
modelled per subject as a zero-mean Gaussian process over a small set of
scalar covariates phi, with a squared-exponential kernel

    kappa(phi, phi') = v1 * exp(-0.5 * sum_h w_h (phi_h - phi'_h)^2) + delta * sigma^2.

Hyperparameters are estimated empirically by maximizing the marginal
likelihood of the residuals; covariance is block-diagonal across
subjects (visits within a subject are correlated, subjects are not).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize

from .errors import OptimizationFailedError

__all__ = [
    "Kernel",
    "GpModel",
    "MixedFit",
    "kernel_matrix",
    "fit_hyperparameters",
    "marginal_loglik",
    "fit_g",
    "backfit",
    "predict_within_subject",
    "predict_new_subject",
]

_JITTER_START = 1e-8
_JITTER_MAX = 1e-4


@dataclass(frozen=True)
class Kernel:
    """Squared-exponential kernel hyperparameters."""

    v1: float
    w: np.ndarray
    sigma: float

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.w, dtype=float))
        if self.v1 <= 0 or self.sigma <= 0 or np.any(w <= 0):
            raise ValueError("kernel hyperparameters must be strictly positive")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "v1", float(self.v1))
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def n_dims(self) -> int:
        return self.w.size

    def to_log_vector(self) -> np.ndarray:
        return np.log(np.concatenate([[self.v1], self.w, [self.sigma]]))

    @classmethod
    def from_log_vector(cls, theta: np.ndarray) -> "Kernel":
        theta = np.exp(np.asarray(theta, dtype=float))
        return cls(v1=theta[0], w=theta[1:-1], sigma=theta[-1])


def kernel_matrix(phi_a: np.ndarray, phi_b: np.ndarray, kernel: Kernel,
                  include_noise: bool = False) -> np.ndarray:
    """Covariance between two point sets; optionally adds sigma^2 on the
    diagonal when both sets are the same points."""
    phi_a = np.atleast_2d(np.asarray(phi_a, dtype=float))
    phi_b = np.atleast_2d(np.asarray(phi_b, dtype=float))
    if phi_a.shape[1] != kernel.n_dims or phi_b.shape[1] != kernel.n_dims:
        raise ValueError(
            f"kernel expects {kernel.n_dims} covariate dimensions, "
            f"got {phi_a.shape[1]} and {phi_b.shape[1]}"
        )
    diff = phi_a[:, None, :] - phi_b[None, :, :]
    sq = np.einsum("ijh,h->ij", diff * diff, kernel.w)
    K = kernel.v1 * np.exp(-0.5 * sq)
    if include_noise:
        if phi_a.shape != phi_b.shape or not np.array_equal(phi_a, phi_b):
            raise ValueError("include_noise requires identical input point sets")
        K = K + kernel.sigma ** 2 * np.eye(phi_a.shape[0])
    return K


def _blocks(subject_index) -> list[np.ndarray]:
    """Row-index arrays per subject, in first-appearance order."""
    subject_index = np.asarray(subject_index)
    order = []
    seen = {}
    for i, s in enumerate(subject_index):
        key = s.item() if hasattr(s, "item") else s
        if key not in seen:
            seen[key] = []
            order.append(key)
        seen[key].append(i)
    return [np.asarray(seen[k], dtype=int) for k in order]


def _chol_with_jitter(K: np.ndarray, v1: float) -> tuple[np.ndarray, float]:
    jitter = 0.0
    scale = _JITTER_START * max(v1, 1.0)
    while True:
        try:
            return linalg.cholesky(K + jitter * np.eye(K.shape[0]), lower=True), jitter
        except linalg.LinAlgError:
            jitter = scale if jitter == 0.0 else jitter * 10.0
            if jitter > _JITTER_MAX * max(v1, 1.0):
                raise


def marginal_loglik(theta_log: np.ndarray, phi: np.ndarray, resid: np.ndarray,
                    subject_index=None) -> tuple[float, np.ndarray]:
    """Gaussian marginal log-likelihood of the residuals and its gradient
    with respect to the log hyperparameters."""
    kernel = Kernel.from_log_vector(theta_log)
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    resid = np.asarray(resid, dtype=float).ravel()
    if subject_index is None:
        blocks = [np.arange(phi.shape[0])]
    else:
        blocks = _blocks(subject_index)

    total = 0.0
    grad = np.zeros(theta_log.size)
    sigma2 = kernel.sigma ** 2
    for idx in blocks:
        pb, rb = phi[idx], resid[idx]
        d = idx.size
        diff = pb[:, None, :] - pb[None, :, :]
        sq = diff * diff  # (d, d, H)
        Kse = kernel.v1 * np.exp(-0.5 * np.einsum("ijh,h->ij", sq, kernel.w))
        K = Kse + sigma2 * np.eye(d)
        L, _ = _chol_with_jitter(K, kernel.v1)
        alpha = linalg.cho_solve((L, True), rb)
        total += (-0.5 * float(rb @ alpha)
                  - float(np.sum(np.log(np.diag(L))))
                  - 0.5 * d * math.log(2.0 * math.pi))
        Kinv = linalg.cho_solve((L, True), np.eye(d))
        B = np.outer(alpha, alpha) - Kinv  # dL/dK = B / 2
        # d/dlog v1: Kse; d/dlog w_h: -0.5 * w_h * sq_h * Kse; d/dlog sigma: 2 sigma^2 I
        grad[0] += 0.5 * float(np.sum(B * Kse))
        for h in range(kernel.n_dims):
            dK = -0.5 * kernel.w[h] * sq[:, :, h] * Kse
            grad[1 + h] += 0.5 * float(np.sum(B * dK))
        grad[-1] += 0.5 * float(np.trace(B)) * 2.0 * sigma2
    return total, grad


def fit_hyperparameters(phi: np.ndarray, resid: np.ndarray, subject_index=None,
                        n_restarts: int = 5, seed: int = 0) -> Kernel:
    """Empirical-Bayes hyperparameters: maximize the marginal likelihood
    in log-parameter space with multi-start quasi-Newton."""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    resid = np.asarray(resid, dtype=float).ravel()
    if resid.size < 5:
        raise ValueError("need at least 5 data points to fit hyperparameters")
    resid = resid - resid.mean()
    var_r = max(float(np.var(resid, ddof=1)), 1e-12)
    H = phi.shape[1]
    phi_var = np.var(phi, axis=0, ddof=1)
    phi_var = np.where(phi_var > 0, phi_var, 1.0)
    base = np.log(np.concatenate([[0.5 * var_r], 1.0 / phi_var,
                                  [math.sqrt(0.5 * var_r)]]))

    def objective(theta_log):
        try:
            ll, g = marginal_loglik(theta_log, phi, resid, subject_index)
        except linalg.LinAlgError:
            return np.inf, np.zeros_like(theta_log)
        if not np.isfinite(ll):
            return np.inf, np.zeros_like(theta_log)
        return -ll, -g

    rng = np.random.default_rng(seed)
    best_val, best_theta = np.inf, None
    attempts = 0
    for start in range(max(n_restarts, 1)):
        x0 = base if start == 0 else base + rng.uniform(-2.0, 2.0, size=base.size)
        for _retry in range(5):
            try:
                res = optimize.minimize(objective, x0, jac=True, method="L-BFGS-B",
                                        options={"maxiter": 200})
            except (linalg.LinAlgError, FloatingPointError):
                x0 = x0 + rng.normal(scale=0.5, size=x0.size)
                attempts += 1
                continue
            if np.isfinite(res.fun):
                if res.fun < best_val:
                    best_val, best_theta = res.fun, res.x
                break
            x0 = x0 + rng.normal(scale=0.5, size=x0.size)
            attempts += 1
    if best_theta is None:
        raise OptimizationFailedError(
            f"marginal-likelihood optimization failed after {attempts} restarts"
        )
    return Kernel.from_log_vector(best_theta)


@dataclass
class GpModel:
    """Fitted random-effects layer: kernel, training covariates grouped by
    subject, and the residuals it was trained on."""

    kernel: Kernel
    train_phi: np.ndarray
    train_resid: np.ndarray
    subject_index: np.ndarray

    def __post_init__(self):
        self.train_phi = np.atleast_2d(np.asarray(self.train_phi, dtype=float))
        self.train_resid = np.asarray(self.train_resid, dtype=float).ravel()
        self.subject_index = np.asarray(self.subject_index)
        if self.train_phi.shape[0] != self.train_resid.size:
            raise ValueError("phi and residual lengths disagree")
        if self.subject_index.size != self.train_resid.size:
            raise ValueError("subject index length disagrees with data")

    def subjects(self) -> list:
        out = []
        for s in self.subject_index:
            key = s.item() if hasattr(s, "item") else s
            if key not in out:
                out.append(key)
        return out

    def _subject_rows(self, subject) -> np.ndarray:
        mask = self.subject_index == subject
        return np.flatnonzero(mask)


def fit_g(model: GpModel) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance of the random effect at the training
    points, evaluated per subject block:

        g_hat = c (c + sigma^2 I)^{-1} r      Var = diag of sigma^2 (c + sigma^2 I)^{-1} c
    """
    n = model.train_resid.size
    g_hat = np.zeros(n)
    g_var = np.zeros(n)
    sigma2 = model.kernel.sigma ** 2
    for idx in _blocks(model.subject_index):
        c = kernel_matrix(model.train_phi[idx], model.train_phi[idx], model.kernel)
        K = c + sigma2 * np.eye(idx.size)
        L, _ = _chol_with_jitter(K, model.kernel.v1)
        g_hat[idx] = c @ linalg.cho_solve((L, True), model.train_resid[idx])
        g_var[idx] = sigma2 * np.diag(linalg.cho_solve((L, True), c))
    return g_hat, g_var


def predict_within_subject(model: GpModel, fixed_pred: float,
                           phi_star: np.ndarray, subject) -> tuple[float, float]:
    """Predictive mean and variance at a new visit of an observed subject.

        mean = fixed_pred + c*' (c + sigma^2 I)^{-1} r
        var  = kappa(phi*, phi*) - c*' (c + sigma^2 I)^{-1} c* + sigma^2
    """
    rows = model._subject_rows(subject)
    if rows.size == 0:
        raise KeyError(
            f"subject {subject!r} has no observed visits; use predict_new_subject"
        )
    phi_star = np.atleast_2d(np.asarray(phi_star, dtype=float))
    pb = model.train_phi[rows]
    rb = model.train_resid[rows]
    sigma2 = model.kernel.sigma ** 2
    c = kernel_matrix(pb, pb, model.kernel)
    K = c + sigma2 * np.eye(rows.size)
    L, _ = _chol_with_jitter(K, model.kernel.v1)
    c_star = kernel_matrix(pb, phi_star, model.kernel).ravel()
    solved = linalg.cho_solve((L, True), c_star)
    mean = float(fixed_pred) + float(c_star @ linalg.cho_solve((L, True), rb))
    var = model.kernel.v1 - float(c_star @ solved) + sigma2
    return mean, max(var, sigma2 - 1e-12)


def predict_new_subject(per_subject_preds, weights=None) -> float:
    """Weighted average of as-if-subject predictions for an unseen subject."""
    preds = np.asarray(list(per_subject_preds), dtype=float)
    if preds.size == 0:
        raise ValueError(
            "no subject predictions supplied; fall back to the fixed-effects prediction"
        )
    if weights is None:
        weights = np.full(preds.size, 1.0 / preds.size)
    weights = np.asarray(weights, dtype=float)
    if weights.size != preds.size:
        raise ValueError("weights length disagrees with predictions")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-8:
        raise ValueError("weights must be nonnegative and sum to 1")
    return float(weights @ preds)


def inverse_distance_weights(train_phi_by_subject, phi_star: np.ndarray,
                             eps: float = 1e-8) -> np.ndarray:
    """Similarity weights: inverse mean distance to each subject's visits."""
    phi_star = np.asarray(phi_star, dtype=float).ravel()
    dists = []
    for pb in train_phi_by_subject:
        pb = np.atleast_2d(np.asarray(pb, dtype=float))
        dists.append(float(np.mean(np.linalg.norm(pb - phi_star, axis=1))))
    inv = 1.0 / (np.asarray(dists) + eps)
    return inv / inv.sum()


@dataclass
class MixedFit:
    """Result of alternating fixed-effects and random-effects estimation."""

    fixed_coefs: dict
    gp: GpModel | None
    n_backfit_iters: int
    converged: bool
    fitted: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def backfit(y: np.ndarray, refit_fixed, phi: np.ndarray, subject_index,
            max_sweeps: int = 50, tol: float = 1e-6, n_restarts: int = 5,
            seed: int = 0) -> MixedFit:
    """Alternate fixed-effects and GP re-estimation until the combined
    fitted values stabilize.

    ``refit_fixed(y_tilde) -> (coefs, fitted)`` re-estimates the
    fixed-effects part on the partial response; the GP layer is refit on
    the leftover residual each sweep.  Divergence (training RSS rising
    three sweeps in a row) yields a non-converged result, not an error.
    """
    y = np.asarray(y, dtype=float).ravel()
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    # z-score phi so the relevance weights are unit-scale
    phi_mean = phi.mean(axis=0)
    phi_sd = phi.std(axis=0, ddof=1)
    phi_sd = np.where(phi_sd > 0, phi_sd, 1.0)
    phi_std = (phi - phi_mean) / phi_sd

    g_hat = np.zeros(y.size)
    prev_total = None
    prev_rss = np.inf
    rising = 0
    converged = False
    coefs, f_hat, gp = None, np.zeros(y.size), None
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        coefs, f_hat = refit_fixed(y - g_hat)
        r = y - f_hat
        kernel = fit_hyperparameters(phi_std, r, subject_index,
                                     n_restarts=n_restarts, seed=seed)
        gp = GpModel(kernel=kernel, train_phi=phi_std, train_resid=r,
                     subject_index=np.asarray(subject_index))
        g_hat, _ = fit_g(gp)
        total = f_hat + g_hat
        rss = float(np.sum((y - total) ** 2))
        if prev_total is not None:
            denom = max(float(np.linalg.norm(prev_total)), 1e-12)
            if float(np.linalg.norm(total - prev_total)) / denom < tol:
                converged = True
                prev_total = total
                break
        rising = rising + 1 if rss > prev_rss + 1e-12 else 0
        if rising >= 3:
            prev_total = total
            break
        prev_rss, prev_total = rss, total

    gp = GpModel(kernel=gp.kernel, train_phi=phi_std, train_resid=y - f_hat,
                 subject_index=np.asarray(subject_index))
    fit = MixedFit(
        fixed_coefs=coefs,
        gp=gp,
        n_backfit_iters=sweeps,
        converged=converged,
        fitted=prev_total if prev_total is not None else f_hat + g_hat,
        diagnostics={
            "phi_mean": phi_mean,
            "phi_sd": phi_sd,
            "final_rss": float(np.sum((y - (f_hat + g_hat)) ** 2)),
            "diverged": rising >= 3,
        },
    )
    return fit
