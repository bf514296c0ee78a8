"""Functional least angle regression over mixed scalar and functional candidates.

Each iteration projects the active variable group onto the current
residual through penalized canonical correlation, moves along the
standardized fitted direction until an inactive candidate ties in
normalized squared correlation (the positive root of a per-candidate
quadratic), and accumulates the implied coefficient increments.  Two
modifications handle the no-real-root terminal case (full OLS along the
current direction) and the dropping of variables whose projection
variance has decayed.  Stopping uses either the correlation-times-
distance (CD) drop rule or a Mallows Cp criterion built on a
hat-matrix-product notion of degrees of freedom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .cca import (
    CcaResult,
    PenaltyConfig,
    VariableGroup,
    _assemble_pxx,
    _centered_design,
    _condition_number,
    _solve_pxx,
    cca_scalar_group,
    default_lambda1_grid,
    select_lambda1_gcv,
    select_lambda2_cv,
)
from .errors import NoSignalError, SingularMatrixError
from .representation import FunctionalSample, Representation

__all__ = [
    "CandidateSet",
    "NormalizationRule",
    "SelectionState",
    "StoppingDiagnostics",
    "FittedModel",
    "FlarsOptions",
    "prepare_candidates",
    "first_selection",
    "direction",
    "step_distance_functional",
    "step_distance_scalar",
    "iterate",
    "modification_one",
    "modification_two",
    "stopping_cd",
    "degrees_of_freedom",
    "mallows_cp",
    "run_flars",
    "refit_penalized_ls",
]

_ROOT_TOL = 1e-12


@dataclass(frozen=True)
class NormalizationRule:
    """How the candidate-side matrix of the tie equation is normalized.

    'Norm' divides by its Frobenius norm, 'Trace' by its trace and
    'Identity' leaves it untouched.  Rank-one scalar/direction
    projection matrices have unit trace and unit Frobenius norm, so the
    rule only matters for functional candidates.
    """

    kind: str = "Norm"

    def __post_init__(self):
        if self.kind not in ("Norm", "Trace", "Identity"):
            raise ValueError(f"unknown normalization {self.kind!r}")

    def factor(self, m_trace: float, m_sq_trace: float) -> float:
        """Normalizing constant from tr(M) and tr(M @ M) of the raw matrix."""
        if self.kind == "Trace":
            return m_trace
        if self.kind == "Norm":
            return math.sqrt(max(m_sq_trace, 0.0))
        return 1.0


@dataclass(frozen=True)
class CandidateSet:
    """All candidate variables sharing one representation and sample count."""

    functional: tuple
    scalar: tuple
    rep: Representation | None = None

    def __post_init__(self):
        object.__setattr__(self, "functional", tuple(self.functional))
        object.__setattr__(self, "scalar", tuple(self.scalar))
        ids = [i for i, _ in self.functional] + [i for i, _ in self.scalar]
        if not ids:
            raise ValueError("candidate set is empty")
        if len(set(ids)) != len(ids):
            raise ValueError("candidate ids must be unique")
        if self.functional and self.rep is None:
            raise ValueError("functional candidates require a representation")
        n_set = {x.n_samples for _, x in self.functional}
        n_set |= {np.asarray(z).shape[0] for _, z in self.scalar}
        if len(n_set) > 1:
            raise ValueError(f"candidates disagree on sample count: {sorted(n_set)}")

    @property
    def n_samples(self) -> int:
        if self.functional:
            return self.functional[0][1].n_samples
        return np.asarray(self.scalar[0][1]).shape[0]

    def all_ids(self) -> list:
        return [i for i, _ in self.functional] + [i for i, _ in self.scalar]

    def member(self, cid):
        for i, x in self.functional:
            if i == cid:
                return (cid, "functional", x)
        for i, z in self.scalar:
            if i == cid:
                return (cid, "scalar", np.asarray(z, dtype=float))
        raise KeyError(cid)

    def group(self, ids) -> VariableGroup:
        return VariableGroup(members=tuple(self.member(i) for i in ids), rep=self.rep)


@dataclass
class Standardization:
    """Centering/scaling constants applied before selection."""

    y_mean: float
    scalar_stats: dict  # id -> (mean, sd)
    functional_stats: dict  # id -> (column_means, pooled_sd)


def prepare_candidates(y: np.ndarray, cands: CandidateSet
                       ) -> tuple[np.ndarray, CandidateSet, Standardization]:
    """Center the response; center and scale every candidate.

    Scalars go to zero mean and unit sample SD.  Functional candidates
    are column-centered and divided by the SD of their values pooled
    over the whole grid, so both kinds enter the tie equations on
    comparable scales.
    """
    y = np.asarray(y, dtype=float).ravel()
    y_mean = float(y.mean())
    y_c = y - y_mean

    scalar_stats, functional_stats = {}, {}
    new_scalar, new_functional = [], []
    for cid, z in cands.scalar:
        z = np.asarray(z, dtype=float).ravel()
        m, s = float(z.mean()), float(z.std(ddof=1))
        if s <= 0:
            raise ValueError(f"scalar candidate {cid!r} is constant")
        scalar_stats[cid] = (m, s)
        new_scalar.append((cid, (z - m) / s))
    for cid, x in cands.functional:
        col_means = x.values.mean(axis=0)
        centered = x.values - col_means
        pooled_sd = float(centered.std(ddof=1))
        if pooled_sd <= 0:
            raise ValueError(f"functional candidate {cid!r} is constant")
        functional_stats[cid] = (col_means, pooled_sd)
        new_functional.append((cid, FunctionalSample(centered / pooled_sd, x.grid)))

    prepared = CandidateSet(functional=tuple(new_functional),
                            scalar=tuple(new_scalar), rep=cands.rep)
    return y_c, prepared, Standardization(y_mean, scalar_stats, functional_stats)


@dataclass
class SelectionState:
    """Mutable record of a selection path."""

    n: int
    residual: np.ndarray
    active: list = field(default_factory=list)
    inactive: list = field(default_factory=list)
    dropped: set = field(default_factory=set)
    iteration: int = 0
    directions: list = field(default_factory=list)
    distances: list = field(default_factory=list)
    corr_history: list = field(default_factory=list)
    cd_history: list = field(default_factory=list)
    selections: list = field(default_factory=list)  # winner per iteration; None for terminal
    coef_accum: dict = field(default_factory=dict)
    coef_increments: list = field(default_factory=list)  # per iteration: id -> increment
    hat_product: np.ndarray | None = None
    proj_var_history: dict = field(default_factory=dict)
    rss_history: list = field(default_factory=list)
    df_history: list = field(default_factory=list)
    pen_history: list = field(default_factory=list)
    var_y: float = 0.0
    terminal: bool = False

    @classmethod
    def initial(cls, y: np.ndarray, cands: CandidateSet, first_id) -> "SelectionState":
        y = np.asarray(y, dtype=float).ravel()
        ids = cands.all_ids()
        if first_id not in ids:
            raise KeyError(first_id)
        return cls(
            n=y.size,
            residual=y.copy(),
            active=[first_id],
            inactive=[i for i in ids if i != first_id],
            hat_product=np.eye(y.size),
            var_y=float(np.var(y, ddof=1)),
        )

    @property
    def model_ids(self) -> list:
        """Active variables still in the model (drops excluded)."""
        return [i for i in self.active if i not in self.dropped]


@dataclass
class StoppingDiagnostics:
    df_star: float
    cp: float
    cd_trace: np.ndarray
    stop_index: int
    stop_rule: str
    cp_trace: np.ndarray | None = None
    sigma2: float | None = None


@dataclass
class FittedModel:
    """Final coefficients on the standardized scale, plus the constants
    needed to predict from raw data."""

    rep: Representation | None
    functional_coefs: dict
    scalar_coefs: dict
    standardization: Standardization
    selected_ids: list

    @property
    def intercept(self) -> float:
        return self.standardization.y_mean

    def predict(self, cands: CandidateSet) -> np.ndarray:
        """Predict the response for raw (unstandardized) candidate data."""
        n = cands.n_samples
        out = np.full(n, self.intercept)
        for cid, coef in self.functional_coefs.items():
            _, _, x = cands.member(cid)
            mu, sd = self.standardization.functional_stats[cid]
            xs = (x.values - mu) / sd
            out += xs @ (self.rep.W @ np.asarray(coef, dtype=float))
        for cid, gamma in self.scalar_coefs.items():
            _, _, z = cands.member(cid)
            m, s = self.standardization.scalar_stats[cid]
            out += (np.asarray(z, dtype=float).ravel() - m) / s * float(gamma)
        return out

    def coefficient_curve(self, cid) -> np.ndarray:
        """Functional coefficient evaluated on the grid, raw-data scale."""
        coef = np.asarray(self.functional_coefs[cid], dtype=float)
        _, sd = self.standardization.functional_stats[cid]
        return self.rep.curve(coef) / sd


@dataclass(frozen=True)
class FlarsOptions:
    """Knobs of one selection run."""

    pen: PenaltyConfig | None = None  # None -> resolve lambda1/lambda2 automatically
    norm: NormalizationRule = NormalizationRule("Norm")
    kappa: float | None = None  # None disables modification II
    stop: str = "cd"  # 'cd' | 'cp' | 'max_iter'
    cd_threshold_frac: float = 0.10
    max_iter: int | None = None
    lambda1_grid: np.ndarray | None = None
    lambda2_grid: tuple = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
    refit: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.stop not in ("cd", "cp", "max_iter"):
            raise ValueError(f"unknown stopping rule {self.stop!r}")
        if self.kappa is not None and not (0.0 < self.kappa < 1.0):
            raise ValueError("kappa must be in (0, 1)")


def _resolve_pen(r: np.ndarray, group: VariableGroup,
                 options: FlarsOptions) -> PenaltyConfig:
    """Fixed penalties if given, otherwise GCV lambda1 and conditional CV lambda2."""
    if options.pen is not None:
        return options.pen
    has_functional = any(kind == "functional" for _, kind, _ in group.members)
    if not has_functional:
        return PenaltyConfig(0.0, 0.0)
    grid = options.lambda1_grid
    if grid is None:
        grid = default_lambda1_grid(group)
    lam1 = select_lambda1_gcv(r, group, grid)
    pen = PenaltyConfig(lambda1=lam1, lambda2=0.0)
    design, slices = _centered_design(group)
    P = _assemble_pxx(design, slices, group, pen)
    if _condition_number(P) > 1e10:
        scale = float(np.linalg.norm(design.T @ design, "fro")) or 1.0
        lam2 = select_lambda2_cv(
            r, group, np.asarray(options.lambda2_grid) * scale,
            folds=5, lambda1=lam1, seed=options.seed,
        )
        pen = PenaltyConfig(lambda1=lam1, lambda2=lam2)
    return pen


def first_selection(y: np.ndarray, cands: CandidateSet,
                    pen: PenaltyConfig | None = None,
                    options: FlarsOptions | None = None):
    """Candidate with the largest penalized correlation with the response.

    Ties break toward the earlier candidate.
    """
    y = np.asarray(y, dtype=float).ravel()
    best_id, best_rho = None, 0.0
    for cid in cands.all_ids():
        group = cands.group([cid])
        use_pen = pen
        if use_pen is None:
            use_pen = _resolve_pen(y, group, options or FlarsOptions())
        try:
            rho = cca_scalar_group(y, group, use_pen).rho
        except SingularMatrixError:
            continue
        if rho > best_rho + 1e-15:
            best_id, best_rho = cid, rho
    if best_id is None or best_rho < 1e-12:
        raise NoSignalError("no candidate is correlated with the response")
    return best_id


@dataclass
class _DirectionStep:
    u: np.ndarray
    step_coefs: dict
    sd_fitted: float
    hat: np.ndarray
    cca: CcaResult
    active_scale: float = 1.0
    hat_scale: float = 1.0  # turns H into H* when multiplied by alpha


def _direction_step(state: SelectionState, cands: CandidateSet,
                    pen: PenaltyConfig) -> _DirectionStep:
    if not state.model_ids:
        raise ValueError("active set is empty")
    group = cands.group(state.model_ids)
    res = cca_scalar_group(state.residual, group, pen)
    fitted = res.fitted
    sd = float(np.std(fitted, ddof=1))
    if sd <= 0:
        raise SingularMatrixError("active-group projection is constant")
    sign = -1.0 if float(fitted @ state.residual) < 0 else 1.0
    u = sign * fitted / sd
    coefs = {cid: sign * np.asarray(v) for cid, v in res.coef_blocks.items()}
    # penalized-projection smoother; feeds the hat-product degrees of freedom.
    # The residual update r - alpha u equals (I - alpha * hat_scale * H) r,
    # since H r = fitted * rho * ||r|| and u = sign * fitted / sd
    hat = res.design @ _solve_pxx(res.pxx, res.design.T, pen)
    hat_scale = sign / (sd * res.rho * float(np.linalg.norm(state.residual)))
    # The tie equation compares a candidate's correlation against that of
    # the variables already in the model, not of the direction itself.
    # Cor(r - alpha u, x)^2 = Cor(u, x)^2 Cor(r - alpha u, u)^2 whenever the
    # active-set fit of the residual stays proportional to u, so the
    # direction side of the quadratic carries the factor rho^2(u, x_last),
    # with x_last the most recently selected variable.  With scalar
    # variables and zero penalties this makes the path coincide with the
    # classical least angle regression solution.
    last_id = state.model_ids[-1]
    try:
        rho_last = cca_scalar_group(u, cands.group([last_id]), pen).rho
        active_scale = float(rho_last) ** 2
    except (SingularMatrixError, ValueError):
        active_scale = 1.0
    return _DirectionStep(u=u, step_coefs=coefs, sd_fitted=sd, hat=hat, cca=res,
                          active_scale=active_scale, hat_scale=hat_scale)


def direction(state: SelectionState, cands: CandidateSet,
              pen: PenaltyConfig) -> tuple[np.ndarray, dict]:
    """Direction vector (centered, unit SD, positively correlated with the
    residual) and the per-active-member step coefficients behind it."""
    step = _direction_step(state, cands, pen)
    return step.u, step.step_coefs


def _smallest_positive_root(a: float, b: float, c: float) -> float | None:
    """Smallest positive real root of a*x^2 - 2*b*x + c = 0, or None."""
    scale = max(abs(a), abs(b), abs(c))
    if scale == 0.0:
        return None
    if abs(a) <= _ROOT_TOL * scale:
        if abs(b) <= _ROOT_TOL * scale:
            return None
        x = c / (2.0 * b)
        return float(x) if x > _ROOT_TOL else None
    disc = b * b - a * c
    if disc < 0:
        return None
    sq = math.sqrt(disc)
    roots = sorted(((b - sq) / a, (b + sq) / a))
    for x in roots:
        if x > _ROOT_TOL * max(1.0, abs(roots[-1])):
            return float(x)
    return None


def _tie_root(r: np.ndarray, u: np.ndarray,
              s_uu: float, s_ur: float, s_rr: float,
              active_scale: float = 1.0) -> float | None:
    """Solve the equal-normalized-correlation quadratic.

    s_* are the quadratic forms of the normalized candidate matrix; the
    direction-side matrix is u(u'u)^{-1}u' (unit trace and Frobenius
    norm), whose quadratic forms are u'u, u'r and (u'r)^2/(u'u), scaled
    by rho^2(u, newest active variable) so the comparison is against the
    correlation of the active variables rather than of u itself.
    """
    uu = float(u @ u)
    ur = float(u @ r)
    a = s_uu - active_scale * uu
    b = s_ur - active_scale * ur
    c = s_rr - active_scale * ur * ur / uu
    return _smallest_positive_root(a, b, c)


def step_distance_functional(r: np.ndarray, u: np.ndarray, x: FunctionalSample,
                             rep: Representation, pen: PenaltyConfig,
                             norm: NormalizationRule,
                             active_scale: float = 1.0) -> float | None:
    """Tie distance along u for a functional candidate, or None when the
    quadratic has no positive real root."""
    D = rep.design(x)
    D = D - D.mean(axis=0)
    Wa = rep.W_active
    K = D.T @ D + pen.lambda1 * rep.W2_active + pen.lambda2 * (Wa.T @ Wa)
    K = 0.5 * (K + K.T)
    try:
        cf = linalg.cho_factor(K, check_finite=False)

        def solve(rhs):
            return linalg.cho_solve(cf, rhs, check_finite=False)
    except linalg.LinAlgError:
        if pen.lambda1 == 0 and pen.lambda2 == 0:
            raise SingularMatrixError(
                "candidate cross-product is singular; set lambda2 > 0"
            ) from None

        def solve(rhs):
            return linalg.lstsq(K, rhs, check_finite=False)[0]

    gram = D.T @ D
    A = solve(gram)  # K^{-1} D'D; tr(A) and tr(A@A) give trace/Frobenius of D K^{-1} D'
    n_f = norm.factor(float(np.trace(A)), float(np.sum(A * A.T)))
    if n_f <= 0:
        return None

    du, dr = D.T @ u, D.T @ r
    sdu, sdr = solve(du), solve(dr)
    s_uu = float(du @ sdu) / n_f
    s_ur = float(dr @ sdu) / n_f
    s_rr = float(dr @ sdr) / n_f
    return _tie_root(r, u, s_uu, s_ur, s_rr, active_scale)


def step_distance_scalar(r: np.ndarray, u: np.ndarray, z: np.ndarray,
                         norm: NormalizationRule,
                         active_scale: float = 1.0) -> float | None:
    """Tie distance along u for a scalar candidate."""
    z = np.asarray(z, dtype=float).ravel()
    z = z - z.mean()
    zz = float(z @ z)
    if zz <= 0:
        return None
    n_z = norm.factor(1.0, 1.0)  # rank-one projection
    zu, zr = float(z @ u), float(z @ r)
    s_uu = zu * zu / (zz * n_z)
    s_ur = zr * zu / (zz * n_z)
    s_rr = zr * zr / (zz * n_z)
    return _tie_root(r, u, s_uu, s_ur, s_rr, active_scale)


def _candidate_distance(state: SelectionState, cands: CandidateSet, cid,
                        u: np.ndarray, pen: PenaltyConfig,
                        norm: NormalizationRule,
                        candidate_pen=None,
                        active_scale: float = 1.0) -> float | None:
    _, kind, data = cands.member(cid)
    if kind == "functional":
        cand_pen = pen if candidate_pen is None else candidate_pen(cid)
        return step_distance_functional(state.residual, u, data, cands.rep,
                                        cand_pen, norm, active_scale)
    return step_distance_scalar(state.residual, u, data, norm, active_scale)


def _apply_step(state: SelectionState, cands: CandidateSet,
                step: _DirectionStep, alpha: float,
                winner, pen: PenaltyConfig) -> None:
    """Advance the state by one accepted step along the current direction."""
    n = state.n
    u = step.u
    state.iteration += 1
    state.directions.append(u)
    state.distances.append(float(alpha))
    state.selections.append(winner)
    state.pen_history.append(pen)

    new_residual = state.residual - alpha * u
    # coefficient increments: the unique scaling that makes the accumulated
    # fitted values equal sum_k alpha_k u^(k)
    scale = alpha / step.sd_fitted
    increments = {}
    for cid, coef in step.step_coefs.items():
        inc = np.asarray(coef, dtype=float) * scale
        increments[cid] = inc
        if cid in state.coef_accum:
            state.coef_accum[cid] = state.coef_accum[cid] + inc
        else:
            state.coef_accum[cid] = inc.copy()
    state.coef_increments.append(increments)

    hat_star = step.hat * (alpha * step.hat_scale)
    state.hat_product = state.hat_product @ (np.eye(n) - hat_star)

    if state.iteration == 1 or winner is None:
        # no correlation value for the first iteration; terminal OLS steps
        # tie no new variable, so rho* is undefined there as well
        rho_star = math.nan
    else:
        denom = float(np.linalg.norm(u) * np.linalg.norm(new_residual))
        rho_star = abs(float(u @ new_residual)) / denom if denom > 0 else 0.0
    state.corr_history.append(rho_star)
    state.cd_history.append(rho_star * alpha)

    state.residual = new_residual
    if winner is not None:
        state.active.append(winner)
        state.inactive.remove(winner)

    state.rss_history.append(float(new_residual @ new_residual))
    state.df_history.append(degrees_of_freedom(state))
    _record_projection_variances(state, cands)


def _record_projection_variances(state: SelectionState, cands: CandidateSet) -> None:
    for cid in state.model_ids:
        coef = state.coef_accum.get(cid)
        if coef is None:
            var = 0.0
        else:
            _, kind, data = cands.member(cid)
            if kind == "functional":
                proj = data.values @ (cands.rep.W @ coef)
            else:
                proj = data * float(coef[0])
            var = float(np.var(proj, ddof=1))
        state.proj_var_history.setdefault(cid, []).append(var)


def iterate(state: SelectionState, cands: CandidateSet, pen: PenaltyConfig,
            norm: NormalizationRule = NormalizationRule("Norm"),
            candidate_pen=None) -> SelectionState:
    """One selection step: direction, per-candidate tie distances, winner.

    ``candidate_pen`` optionally maps a functional candidate id to the
    penalty used in its side of the tie equation (its own fCCA); by
    default the direction penalty is reused.  Falls back to modification
    I (full OLS along the direction) when no inactive candidate yields a
    positive real root, or none remain.
    """
    step = _direction_step(state, cands, pen)
    best_alpha, winner = None, None
    for cid in state.inactive:
        alpha = _candidate_distance(state, cands, cid, step.u, pen, norm,
                                    candidate_pen, step.active_scale)
        if alpha is not None and (best_alpha is None or alpha < best_alpha - 1e-15):
            best_alpha, winner = alpha, cid
    if winner is None:
        return _modification_one_step(state, cands, step, pen)
    _apply_step(state, cands, step, best_alpha, winner, pen)
    return state


def _ols_distance(u: np.ndarray, r: np.ndarray) -> float:
    return float(u @ r) / float(u @ u)


def _modification_one_step(state: SelectionState, cands: CandidateSet,
                           step: _DirectionStep, pen: PenaltyConfig) -> SelectionState:
    alpha = _ols_distance(step.u, state.residual)
    _apply_step(state, cands, step, alpha, None, pen)
    state.terminal = True
    return state


def modification_one(state: SelectionState, cands: CandidateSet,
                     pen: PenaltyConfig) -> SelectionState:
    """Terminal full-OLS step along the current direction."""
    step = _direction_step(state, cands, pen)
    return _modification_one_step(state, cands, step, pen)


def modification_two(state: SelectionState, cands: CandidateSet,
                     kappa: float = 0.05) -> SelectionState:
    """Drop active variables whose projection variance fell below both
    their own past maximum and kappa * Var(y)."""
    if not (0.0 < kappa < 1.0):
        raise ValueError("kappa must be in (0, 1)")
    threshold = kappa * state.var_y
    for cid in list(state.model_ids):
        hist = state.proj_var_history.get(cid, [])
        if len(hist) < 2:
            continue  # newly tracked variables are protected
        current, past_max = hist[-1], max(hist[:-1])
        if current < past_max and current < threshold:
            state.dropped.add(cid)
    return state


def stopping_cd(cd_trace, threshold_frac: float = 0.10) -> int:
    """Stop index from the CD drop rule (1-based over the trace).

    Returns the last index before the first entry falling below
    ``threshold_frac`` times the maximum CD; the last index if no entry
    does.  Only entries after the maximum count as drops (a small early
    step before the signal peaks does not mean the signal is exhausted).
    NaN entries (first iteration, terminal OLS steps) are ignored.
    """
    cd = np.asarray(cd_trace, dtype=float)
    if cd.size == 0:
        raise ValueError("cd trace is empty")
    finite = np.isfinite(cd)
    if not finite.any():
        return int(cd.size)
    k_max = int(np.nanargmax(np.where(finite, cd, -np.inf)))
    threshold = threshold_frac * float(cd[k_max])
    for k in range(k_max + 1, cd.size):
        if finite[k] and cd[k] < threshold:
            return max(k, 1)  # 1-based index of the previous entry
    return int(cd.size)


def degrees_of_freedom(state: SelectionState) -> float:
    """tr(I - prod_k (I - H*_k)) via the running hat product."""
    if state.hat_product is None or state.iteration == 0:
        return 0.0
    return float(state.n - np.trace(state.hat_product))


def mallows_cp(state: SelectionState, sigma2: float) -> float:
    """RSS / sigma^2 - n + 2 df*."""
    if not np.isfinite(sigma2) or sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    rss = float(state.residual @ state.residual)
    return rss / sigma2 - state.n + 2.0 * degrees_of_freedom(state)


def refit_penalized_ls(y: np.ndarray, cands: CandidateSet, ids,
                       pen: PenaltyConfig) -> dict:
    """Penalized least squares of y on the given variables.

    Equivalent to running the selection path on the pre-selected set to
    completion; used for final coefficient estimates and backfitting.
    """
    ids = list(ids)
    group = cands.group(ids)
    y = np.asarray(y, dtype=float).ravel()
    y_c = y - y.mean()
    design, slices = _centered_design(group)
    P = _assemble_pxx(design, slices, group, pen)
    coef = _solve_pxx(P, design.T @ y_c, pen)
    out = {}
    for (cid, kind, _) in group.members:
        block = coef[slices[cid]]
        out[cid] = group.rep.scatter(block) if kind == "functional" else block.copy()
    return out


def _selected_at(state: SelectionState, stop_index: int) -> list:
    """Variables retained when stopping after ``stop_index`` iterations:
    the first selection plus the winners of iterations 1..stop_index-1,
    minus any drops."""
    ids = [state.active[0]]
    for winner in state.selections[: max(stop_index - 1, 0)]:
        if winner is not None:
            ids.append(winner)
    return [i for i in ids if i not in state.dropped]


def _build_model(y_c: np.ndarray, prepared: CandidateSet, state: SelectionState,
                 selected: list, stop_index: int, options: FlarsOptions,
                 standardization: Standardization) -> FittedModel:
    if options.refit and selected:
        pen = options.pen
        if pen is None:
            pen = _resolve_pen(y_c, prepared.group(selected), options)
        coefs = refit_penalized_ls(y_c, prepared, selected, pen)
    else:
        coefs = {}
        for k in range(stop_index):
            for cid, inc in state.coef_increments[k].items():
                if cid in coefs:
                    coefs[cid] = coefs[cid] + inc
                else:
                    coefs[cid] = inc.copy()
        coefs = {cid: c for cid, c in coefs.items() if cid in selected}

    functional_coefs, scalar_coefs = {}, {}
    for cid in selected:
        _, kind, _ = prepared.member(cid)
        c = coefs.get(cid)
        if kind == "functional":
            functional_coefs[cid] = (np.zeros(prepared.rep.dim) if c is None
                                     else np.asarray(c, dtype=float))
        else:
            scalar_coefs[cid] = 0.0 if c is None else float(np.asarray(c).ravel()[0])
    return FittedModel(
        rep=prepared.rep,
        functional_coefs=functional_coefs,
        scalar_coefs=scalar_coefs,
        standardization=standardization,
        selected_ids=list(selected),
    )


def run_flars(y: np.ndarray, cands: CandidateSet,
              options: FlarsOptions | None = None
              ) -> tuple[SelectionState, StoppingDiagnostics, FittedModel]:
    """Full selection run: standardize, select, iterate, stop, fit.

    Returns the selection state (full path), stopping diagnostics and the
    fitted model for the retained variables.
    """
    options = options or FlarsOptions()
    y = np.asarray(y, dtype=float).ravel()
    y_c, prepared, standardization = prepare_candidates(y, cands)

    n_cand = len(prepared.all_ids())
    max_iter = options.max_iter if options.max_iter is not None else n_cand + 1
    max_iter = min(max_iter, n_cand + 1)

    first_pen = options.pen
    fs_id = first_selection(y_c, prepared, pen=first_pen, options=options)
    state = SelectionState.initial(y_c, prepared, fs_id)

    rss0 = float(y_c @ y_c)
    while state.iteration < max_iter and not state.terminal:
        group = prepared.group(state.model_ids)
        pen = _resolve_pen(state.residual, group, options)

        def candidate_pen(cid, _r=state.residual):
            # each functional candidate's side of the tie equation uses the
            # penalty of its own fCCA against the current residual
            return _resolve_pen(_r, prepared.group([cid]), options)

        if state.inactive:
            iterate(state, prepared, pen, options.norm,
                    candidate_pen=None if options.pen is not None else candidate_pen)
        else:
            modification_one(state, prepared, pen)
        if options.kappa is not None:
            modification_two(state, prepared, options.kappa)
        rss = state.rss_history[-1]
        if rss < 1e-20 * max(rss0, 1.0):
            state.terminal = True
        if options.stop == "cd" and state.iteration >= 3:
            # stop computing the path once the CD trace has clearly dropped;
            # two consecutive sub-threshold values guard against a single
            # small step that precedes the CD peak
            cd = np.asarray(state.cd_history, dtype=float)
            finite = cd[np.isfinite(cd)]
            if finite.size and np.isfinite(cd[-1]) and np.isfinite(cd[-2]):
                thr = options.cd_threshold_frac * finite.max()
                if cd[-1] < thr and cd[-2] < thr:
                    break

    # sigma^2 from the longest computed path point
    df_last = state.df_history[-1] if state.df_history else 0.0
    rss_last = state.rss_history[-1] if state.rss_history else rss0
    denom = max(state.n - df_last, 1.0)
    sigma2 = max(rss_last / denom, 1e-300)

    cp_trace = np.array([
        rss / sigma2 - state.n + 2.0 * df
        for rss, df in zip(state.rss_history, state.df_history)
    ])
    cd_trace = np.asarray(state.cd_history, dtype=float)

    if state.iteration == 0:
        stop_index, rule = 0, "ModificationI_terminal"
    elif options.stop == "cd":
        stop_index = stopping_cd(cd_trace, options.cd_threshold_frac)
        rule = "CD_drop"
        if state.terminal and stop_index >= state.iteration - 1:
            stop_index, rule = state.iteration, "ModificationI_terminal"
    elif options.stop == "cp":
        stop_index = int(np.argmin(cp_trace)) + 1
        rule = "Cp_min"
    else:
        stop_index = state.iteration
        rule = "MaxIter"
    if not state.terminal and state.iteration >= max_iter and options.stop == "cd" \
            and stop_index == state.iteration:
        rule = "MaxIter"

    selected = _selected_at(state, stop_index)
    model = _build_model(y_c, prepared, state, selected, stop_index, options,
                         standardization)
    diagnostics = StoppingDiagnostics(
        df_star=degrees_of_freedom(state),
        cp=float(cp_trace[-1]) if cp_trace.size else math.nan,
        cd_trace=cd_trace,
        stop_index=stop_index,
        stop_rule=rule,
        cp_trace=cp_trace,
        sigma2=sigma2,
    )
    return state, diagnostics, model
