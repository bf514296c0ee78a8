"""Penalized canonical correlation between a scalar and a mixed group.

This is the inner engine of every selection step: given a scalar
response and a group of scalar/functional variables it returns the
maximal correlation achievable by a linear functional of the group,
subject to a roughness + ridge penalty on functional coefficients, along
with the maximizing coefficients.  Closed forms:

    rho^2 = V' P^{-1} V / V_y        coef = P^{-1} V / (rho * ||y||_2)

where V stacks the cross-products of the projected designs with y, P is
the penalized cross-product block matrix and V_y = y'y.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import DegenerateResponseError, IllPosedError, SingularMatrixError
from .representation import FunctionalSample, Representation

__all__ = [
    "PenaltyConfig",
    "VariableGroup",
    "CcaResult",
    "penalized_crossprod",
    "cca_scalar_group",
    "select_lambda1_gcv",
    "select_lambda2_cv",
]

_COND_LIMIT = 1e10


@dataclass(frozen=True)
class PenaltyConfig:
    """Sparsity-smoothness penalty: lambda1 * roughness + lambda2 * ridge."""

    lambda1: float = 0.0
    lambda2: float = 0.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class VariableGroup:
    """Ordered mixed group of scalar vectors and functional samples.

    ``members`` holds ``(id, kind, data)`` triples with kind in
    {'scalar', 'functional'}; all functional members share ``rep``.
    """

    members: tuple
    rep: Representation | None = None

    def __post_init__(self):
        if len(self.members) == 0:
            raise ValueError("group must contain at least one member")
        ids = [m[0] for m in self.members]
        if len(set(ids)) != len(ids):
            raise ValueError("member ids must be unique")
        n_set = set()
        for _, kind, data in self.members:
            if kind == "scalar":
                n_set.add(np.asarray(data).shape[0])
            elif kind == "functional":
                if self.rep is None:
                    raise ValueError("functional members require a representation")
                n_set.add(data.n_samples)
            else:
                raise ValueError(f"unknown member kind {kind!r}")
        if len(n_set) != 1:
            raise ValueError(f"members disagree on sample count: {sorted(n_set)}")
        object.__setattr__(self, "members", tuple(self.members))

    @property
    def n_samples(self) -> int:
        _, kind, data = self.members[0]
        return data.n_samples if kind == "functional" else np.asarray(data).shape[0]

    def ids(self) -> list:
        return [m[0] for m in self.members]


@dataclass
class CcaResult:
    """Penalized canonical correlation and its maximizing coefficients.

    ``coef_blocks`` maps member id to its coefficient vector (length
    ``rep.dim`` for functional members, length 1 for scalars).
    ``fitted`` is the group projection evaluated at the coefficients.
    """

    rho: float
    coef_blocks: dict
    alpha_scale: float
    pxx: np.ndarray
    design: np.ndarray = field(repr=False)
    block_slices: dict = field(repr=False)
    coef_stacked: np.ndarray = field(repr=False)

    @property
    def fitted(self) -> np.ndarray:
        return self.design @ self.coef_stacked


def _centered_design(group: VariableGroup) -> tuple[np.ndarray, dict]:
    """Column-centered stacked projected design and per-member column slices."""
    cols = []
    slices = {}
    start = 0
    for mid, kind, data in group.members:
        if kind == "scalar":
            d = np.asarray(data, dtype=float).reshape(-1, 1)
        else:
            d = group.rep.design(data)
        d = d - d.mean(axis=0)
        cols.append(d)
        slices[mid] = slice(start, start + d.shape[1])
        start += d.shape[1]
    return np.hstack(cols), slices


def _penalty_blocks(group: VariableGroup, pen: PenaltyConfig) -> list[np.ndarray | None]:
    """Per-member penalty matrix in identified coordinates (None for scalars)."""
    out = []
    for _, kind, _ in group.members:
        if kind == "scalar":
            out.append(None)
        else:
            rep = group.rep
            Wa = rep.W_active
            out.append(pen.lambda1 * rep.W2_active + pen.lambda2 * (Wa.T @ Wa))
    return out


def _assemble_pxx(design: np.ndarray, slices: dict, group: VariableGroup,
                  pen: PenaltyConfig) -> np.ndarray:
    P = design.T @ design
    for (mid, kind, _), pen_block in zip(group.members, _penalty_blocks(group, pen)):
        if pen_block is not None:
            s = slices[mid]
            P[s, s] += pen_block
    return 0.5 * (P + P.T)


def penalized_crossprod(group: VariableGroup, pen: PenaltyConfig) -> np.ndarray:
    """Block matrix P: cross-products of projected designs plus diagonal penalties.

    Functional-functional blocks are ``W' X_i' X_j W`` (+ penalty when
    i = j), functional-scalar blocks ``W' X_i' z`` and scalar-scalar
    blocks ``z'z``.  Raises ``SingularMatrixError`` when the result is
    numerically singular and both penalties are zero.
    """
    design, slices = _centered_design(group)
    P = _assemble_pxx(design, slices, group, pen)
    if pen.lambda1 == 0 and pen.lambda2 == 0 and _condition_number(P) > _COND_LIMIT:
        raise SingularMatrixError(
            "penalized cross-product is singular with zero penalties; "
            "set lambda2 > 0 to regularize"
        )
    return P


def _condition_number(P: np.ndarray) -> float:
    try:
        ev = linalg.eigvalsh(P)
    except linalg.LinAlgError:
        return np.inf
    small = max(ev[-1], 0.0) * np.finfo(float).eps
    if ev[0] <= small:
        return np.inf
    return ev[-1] / ev[0]


def _solve_pxx(P: np.ndarray, rhs: np.ndarray, pen: PenaltyConfig) -> np.ndarray:
    """Solve P x = rhs: Cholesky first, pivoted/pseudo-inverse fallback."""
    try:
        c, low = linalg.cho_factor(P, check_finite=False)
        return linalg.cho_solve((c, low), rhs, check_finite=False)
    except linalg.LinAlgError:
        if pen.lambda1 == 0 and pen.lambda2 == 0:
            raise SingularMatrixError(
                "cross-product matrix is not positive definite; set lambda2 > 0"
            ) from None
        return linalg.lstsq(P, rhs, check_finite=False)[0]


def cca_scalar_group(y: np.ndarray, group: VariableGroup,
                     pen: PenaltyConfig | None = None) -> CcaResult:
    """Penalized canonical correlation of a scalar y with a mixed group.

    The response and every member are centered internally.  The reported
    rho is the nonnegative square root of the squared-correlation closed
    form; direction signs live in the coefficients.
    """
    pen = pen or PenaltyConfig()
    y = np.asarray(y, dtype=float).ravel()
    if y.size != group.n_samples:
        raise ValueError("response length does not match group sample count")
    y_scale = abs(float(y.mean()))
    y = y - y.mean()
    v_y = float(y @ y)
    if v_y <= (1e-13 * (1.0 + y_scale)) ** 2 * y.size:
        raise DegenerateResponseError("response is constant; correlation undefined")

    design, slices = _centered_design(group)
    P = _assemble_pxx(design, slices, group, pen)
    V = design.T @ y
    solved = _solve_pxx(P, V, pen)
    rho_sq = float(V @ solved) / v_y
    rho = float(np.sqrt(max(rho_sq, 0.0)))

    norm_y = float(np.linalg.norm(y))
    if rho > 0:
        coef_stacked = solved / (rho * norm_y)
    else:
        coef_stacked = np.zeros_like(solved)

    coef_blocks = {}
    for mid, kind, _ in group.members:
        block = coef_stacked[slices[mid]]
        if kind == "functional":
            coef_blocks[mid] = group.rep.scatter(block)
        else:
            coef_blocks[mid] = block.copy()

    sd_y = float(np.std(y, ddof=1))
    return CcaResult(
        rho=min(rho, 1.0) if rho <= 1.0 + 1e-8 else rho,
        coef_blocks=coef_blocks,
        alpha_scale=1.0 / sd_y,
        pxx=P,
        design=design,
        block_slices=slices,
        coef_stacked=coef_stacked,
    )


def smoother_matrix(y: np.ndarray, group: VariableGroup, pen: PenaltyConfig) -> np.ndarray:
    """Linear smoother H = D P^{-1} D' of the penalized projection fit."""
    design, slices = _centered_design(group)
    P = _assemble_pxx(design, slices, group, pen)
    return design @ _solve_pxx(P, design.T, pen)


def default_lambda1_grid(group: VariableGroup, n_points: int = 10) -> np.ndarray:
    """Log-spaced lambda1 candidates scaled by the design cross-product norm."""
    design, _ = _centered_design(group)
    scale = float(np.linalg.norm(design.T @ design, "fro"))
    if scale <= 0:
        scale = 1.0
    return np.logspace(-8, 2, n_points) * scale


def select_lambda1_gcv(y: np.ndarray, group: VariableGroup,
                       grid: np.ndarray | None = None,
                       lambda2: float = 0.0) -> float:
    """Pick lambda1 on a grid by generalized cross validation.

    GCV(lambda1) = n * RSS / (n - tr H)^2 with H the penalized-projection
    smoother; ties break toward the larger lambda1.
    """
    y = np.asarray(y, dtype=float).ravel()
    y = y - y.mean()
    n = y.size
    if grid is None:
        grid = default_lambda1_grid(group)
    grid = np.sort(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise ValueError("lambda1 grid must be nonempty")

    design, slices = _centered_design(group)
    gram = design.T @ design
    dy = design.T @ y
    yy = float(y @ y)
    best_val, best_lam = np.inf, None
    for lam in grid:
        pen = PenaltyConfig(lambda1=float(lam), lambda2=lambda2)
        P = gram.copy()
        for (mid, _, _), blk in zip(group.members, _penalty_blocks(group, pen)):
            if blk is not None:
                s = slices[mid]
                P[s, s] += blk
        P = 0.5 * (P + P.T)
        try:
            coef = _solve_pxx(P, dy, pen)
            tr_h = float(np.trace(_solve_pxx(P, gram, pen)))
        except SingularMatrixError:
            continue
        if tr_h >= n:
            continue
        rss = yy - 2.0 * float(dy @ coef) + float(coef @ gram @ coef)
        gcv = n * max(rss, 0.0) / (n - tr_h) ** 2
        if best_lam is None or gcv < best_val - 1e-12 * max(abs(best_val), 1.0):
            best_val, best_lam = gcv, float(lam)
        elif abs(gcv - best_val) <= 1e-12 * max(abs(best_val), 1.0):
            best_lam = max(best_lam, float(lam))  # ties toward more smoothing
    if best_lam is None:
        raise IllPosedError("every lambda1 candidate yields tr(H) >= n")
    return best_lam


def select_lambda2_cv(y: np.ndarray, group: VariableGroup, grid: np.ndarray,
                      folds: int = 5, lambda1: float = 0.0,
                      seed: int = 0) -> float:
    """Pick lambda2 by k-fold CV on held-out squared error of the projection fit."""
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if n < folds:
        raise ValueError(f"need at least {folds} samples for {folds}-fold CV")
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("lambda2 grid must be nonempty")
    if grid.size == 1:
        return float(grid[0])

    design, slices = _centered_design(group)
    y_c = y - y.mean()
    rng = np.random.default_rng(seed)
    assignment = rng.permutation(n) % folds

    best_val, best_lam = np.inf, float(grid[0])
    for lam in grid:
        pen = PenaltyConfig(lambda1=lambda1, lambda2=float(lam))
        pen_blocks = _penalty_blocks(group, pen)
        sse = 0.0
        ok = True
        for f in range(folds):
            test = assignment == f
            train = ~test
            D_tr, D_te = design[train], design[test]
            P = D_tr.T @ D_tr
            for (mid, _, _), blk in zip(group.members, pen_blocks):
                if blk is not None:
                    s = slices[mid]
                    P[s, s] += blk
            P = 0.5 * (P + P.T)
            try:
                coef = _solve_pxx(P, D_tr.T @ y_c[train], pen)
            except SingularMatrixError:
                ok = False
                break
            resid = y_c[test] - D_te @ coef
            sse += float(resid @ resid)
        if ok and sse < best_val:
            best_val, best_lam = sse, float(lam)
    return best_lam
