"""Finite-dimensional representation of functional variables.

A curve observed on a grid enters the regression only through two
integrals: the projection ``int x(t) beta(t) dt`` and the roughness
penalty ``int [beta''(t)]^2 dt``.  Both reduce to linear algebra once a
representation backend is chosen:

* ``RDP``  -- representative data points: the coefficient lives on the
  full grid and integrals are Riemann sums with weight ``1/q``.
* ``GQ``   -- Gauss-Legendre quadrature: weights are placed at the grid
  points closest to the mapped abscissas, zero elsewhere; only the
  coefficient values at those points are identified.
* ``BF``   -- cubic B-spline basis functions evaluated on the grid.

Every backend yields a projection weight matrix ``W`` (so the projection
is ``X @ W @ coef``) and a roughness weight matrix ``W2`` (so the penalty
is ``coef @ W2 @ coef``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

__all__ = [
    "TimeGrid",
    "FunctionalSample",
    "Representation",
    "DiffMatrix",
    "gauss_legendre_rule",
    "build_representation",
    "project",
    "roughness",
    "uneven_diff_matrix",
]


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing observation times, at least three of them."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 3:
            raise ValueError("grid must be a 1-d array with at least 3 points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("grid contains non-finite values")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("grid must be strictly increasing")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.size

    @property
    def span(self) -> tuple[float, float]:
        return float(self.points[0]), float(self.points[-1])


@dataclass(frozen=True)
class FunctionalSample:
    """n curves observed on a common grid, stored as an (n, q) matrix."""

    values: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        vals = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(vals)):
            raise ValueError("curve values contain non-finite entries")
        if vals.shape[1] != len(self.grid):
            raise ValueError(
                f"curves have {vals.shape[1]} columns but grid has {len(self.grid)} points"
            )
        object.__setattr__(self, "values", vals)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class DiffMatrix:
    """Three-point second-difference operator on a (possibly uneven) grid.

    Row j approximates ``f''`` at the j-th interior grid point; rows
    annihilate constant and linear functions exactly.
    """

    L: np.ndarray
    grid: TimeGrid


@dataclass(frozen=True)
class Representation:
    """Weight matrices of one representation backend.

    ``W`` is (q, dim) -- diagonal for RDP and GQ, the scaled basis matrix
    for BF.  ``W2`` is (dim, dim), symmetric PSD.  ``active`` lists the
    coefficient indices that are identified (all of them except for GQ,
    where only the quadrature points carry information); solvers work in
    that subspace and scatter results back to length ``dim``.
    """

    kind: str
    grid: TimeGrid
    W: np.ndarray
    W2: np.ndarray
    dim: int
    active: np.ndarray
    basis: BSpline | None = field(default=None, repr=False, compare=False)

    @property
    def W_active(self) -> np.ndarray:
        """Projection weights restricted to identified coefficients, (q, m)."""
        return self.W[:, self.active]

    @property
    def W2_active(self) -> np.ndarray:
        return self.W2[np.ix_(self.active, self.active)]

    def design(self, x: FunctionalSample) -> np.ndarray:
        """Projected design matrix ``X @ W`` on identified coefficients, (n, m)."""
        if x.values.shape[1] != len(self.grid):
            raise ValueError("sample grid length does not match representation")
        return x.values @ self.W_active

    def scatter(self, coef_active: np.ndarray) -> np.ndarray:
        """Embed an m-vector of identified coefficients into a dim-vector."""
        out = np.zeros(self.dim)
        out[self.active] = coef_active
        return out

    def curve(self, coef: np.ndarray) -> np.ndarray:
        """Coefficient function evaluated on the grid (length q)."""
        coef = np.asarray(coef, dtype=float)
        if coef.size != self.dim:
            raise ValueError(f"coefficient has length {coef.size}, expected {self.dim}")
        if self.kind == "BF":
            return self.basis(self.grid.points) @ coef
        return coef


def gauss_legendre_rule(Q: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the Q-point Gauss-Legendre rule on [-1, 1].

    Exact for polynomials of degree <= 2Q - 1; weights sum to 2.
    """
    if not isinstance(Q, (int, np.integer)) or isinstance(Q, bool):
        raise ValueError("Q must be an integer")
    if Q < 1 or Q > 64:
        raise ValueError(f"Q must be in 1..64, got {Q}")
    nodes, weights = np.polynomial.legendre.leggauss(int(Q))
    return nodes, weights


def uneven_diff_matrix(grid: TimeGrid) -> DiffMatrix:
    """Centred-difference second-derivative matrix for an uneven grid.

    Row j carries the three-point stencil at interior point t_j:
    ``2/((t_{j+1}-t_j)(t_{j+1}-t_{j-1}))`` on f(t_{j+1}),
    ``-2/((t_{j+1}-t_j)(t_j-t_{j-1}))`` on f(t_j) and
    ``2/((t_j-t_{j-1})(t_{j+1}-t_{j-1}))`` on f(t_{j-1}).
    """
    if not isinstance(grid, TimeGrid):
        grid = TimeGrid(np.asarray(grid, dtype=float))
    t = grid.points
    q = t.size
    L = np.zeros((q - 2, q))
    for j in range(1, q - 1):
        h_prev = t[j] - t[j - 1]
        h_next = t[j + 1] - t[j]
        h_both = t[j + 1] - t[j - 1]
        L[j - 1, j - 1] = 2.0 / (h_prev * h_both)
        L[j - 1, j] = -2.0 / (h_next * h_prev)
        L[j - 1, j + 1] = 2.0 / (h_next * h_both)
    return DiffMatrix(L=L, grid=grid)


def _nearest_grid_indices(grid: TimeGrid, targets: np.ndarray) -> np.ndarray:
    """Index of the grid point closest to each target; ties go to the lower index."""
    t = grid.points
    idx = np.searchsorted(t, targets)
    idx = np.clip(idx, 1, t.size - 1)
    lower = idx - 1
    # strict '<' keeps the lower index on exact ties
    take_upper = (t[idx] - targets) < (targets - t[lower])
    return np.where(take_upper, idx, lower)


def _build_rdp(grid: TimeGrid) -> Representation:
    q = len(grid)
    W = np.eye(q) / q
    L = uneven_diff_matrix(grid).L
    # interior quadrature weights 1/q, matching the projection convention
    W2 = L.T @ (L / q)
    return Representation(
        kind="RDP", grid=grid, W=W, W2=W2, dim=q, active=np.arange(q)
    )


def _build_gq(grid: TimeGrid, Q: int) -> Representation:
    q = len(grid)
    if Q > q:
        raise ValueError(f"Q={Q} exceeds the number of grid points q={q}")
    nodes, weights = gauss_legendre_rule(Q)
    a, b = grid.span
    half_range = 0.5 * (b - a)
    abscissas = a + (nodes + 1.0) * half_range
    idx = _nearest_grid_indices(grid, abscissas)
    if np.unique(idx).size != idx.size:
        raise ValueError(
            "grid is too coarse: several quadrature abscissas map to the same point"
        )
    W = np.zeros((q, q))
    W[idx, idx] = weights * half_range  # range-mapping Jacobian folded in
    W2 = np.zeros((q, q))
    if Q >= 3:
        sub = TimeGrid(grid.points[idx])
        Lsub = uneven_diff_matrix(sub).L
        w_interior = weights[1:-1] * half_range
        W2_sub = Lsub.T @ (w_interior[:, None] * Lsub)
        W2[np.ix_(idx, idx)] = W2_sub
    return Representation(kind="GQ", grid=grid, W=W, W2=W2, dim=q, active=np.sort(idx))


def _build_bf(grid: TimeGrid, n_basis: int) -> Representation:
    q = len(grid)
    if n_basis > q:
        raise ValueError(f"n_basis={n_basis} exceeds the number of grid points q={q}")
    if n_basis < 4:
        raise ValueError("cubic B-spline basis needs n_basis >= 4")
    a, b = grid.span
    degree = 3
    n_inner = n_basis - degree - 1
    inner = np.linspace(a, b, n_inner + 2)[1:-1]
    knots = np.concatenate([[a] * (degree + 1), inner, [b] * (degree + 1)])
    coeffs = np.eye(n_basis)
    basis = BSpline(knots, coeffs, degree, extrapolate=False)
    Phi = basis(grid.points)  # (q, n_basis)
    Phi2 = basis.derivative(2)(grid.points)
    W = Phi / q
    W2 = Phi2.T @ Phi2 / q
    return Representation(
        kind="BF",
        grid=grid,
        W=W,
        W2=W2,
        dim=n_basis,
        active=np.arange(n_basis),
        basis=basis,
    )


def build_representation(kind: str, grid: TimeGrid, **config) -> Representation:
    """Build the weight matrices of one backend.

    Parameters
    ----------
    kind : {'RDP', 'GQ', 'BF'}
    grid : TimeGrid
    **config : ``Q`` (int) for GQ, ``n_basis`` (int) for BF.
    """
    if not isinstance(grid, TimeGrid):
        grid = TimeGrid(np.asarray(grid, dtype=float))
    kind = str(kind).upper()
    if kind == "RDP":
        return _build_rdp(grid)
    if kind == "GQ":
        Q = config.get("Q")
        if Q is None:
            raise ValueError("GQ representation requires Q")
        return _build_gq(grid, int(Q))
    if kind == "BF":
        n_basis = config.get("n_basis")
        if n_basis is None:
            raise ValueError("BF representation requires n_basis")
        return _build_bf(grid, int(n_basis))
    raise ValueError(f"unknown representation kind {kind!r}")


def project(x: FunctionalSample, rep: Representation, coef: np.ndarray) -> np.ndarray:
    """Approximate ``int x(t) beta(t) dt`` for every sample: ``X @ W @ coef``."""
    coef = np.asarray(coef, dtype=float)
    if coef.size != rep.dim:
        raise ValueError(f"coefficient has length {coef.size}, expected {rep.dim}")
    if x.values.shape[1] != len(rep.grid):
        raise ValueError("sample grid length does not match representation")
    return x.values @ (rep.W @ coef)


def roughness(rep: Representation, coef: np.ndarray) -> float:
    """Approximate ``int [beta''(t)]^2 dt``: ``coef @ W2 @ coef``, clipped at 0."""
    coef = np.asarray(coef, dtype=float)
    if coef.size != rep.dim:
        raise ValueError(f"coefficient has length {coef.size}, expected {rep.dim}")
    return max(float(coef @ rep.W2 @ coef), 0.0)
