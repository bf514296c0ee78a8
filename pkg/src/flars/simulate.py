"""Synthetic scenario generator and replicated selection benchmarks.

A scenario draws smooth functional candidates as squared-exponential
Gaussian-process paths on [0, 1], standard-normal scalar candidates, and
builds the response from three true curves (sinusoid, bump, linear ramp,
each scaled so its contribution has unit population variance) plus three
true scalars with coefficients (1, -1, 0.5) and Gaussian noise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .errors import FlarsError
from .lars import CandidateSet, FlarsOptions, run_flars
from .representation import FunctionalSample, Representation, TimeGrid, build_representation

__all__ = [
    "ScenarioConfig",
    "ReplicationReport",
    "AggregateReport",
    "generate_scenario",
    "selection_metrics",
    "run_replications",
    "true_coefficient_curves",
]

_GP_LENGTH_SCALE = 0.2
_TRUE_GAMMA = (1.0, -1.0, 0.5)


@dataclass(frozen=True)
class ScenarioConfig:
    """Size and noise knobs of one synthetic scenario."""

    n_functional: int
    n_scalar: int
    n_true_functional: int = 3
    n_true_scalar: int = 3
    n_train: int = 200
    n_test: int = 200
    noise_sd: float = 0.05
    grid_q: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_true_functional > self.n_functional:
            raise ValueError("more true functional variables than candidates")
        if self.n_true_scalar > self.n_scalar:
            raise ValueError("more true scalar variables than candidates")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.grid_q < 3:
            raise ValueError("grid_q must be >= 3")
        if self.n_train < 2 or self.n_test < 1:
            raise ValueError("need n_train >= 2 and n_test >= 1")

    @classmethod
    def scenario1(cls, **kw) -> "ScenarioConfig":
        return cls(n_functional=7, n_scalar=5, **kw)

    @classmethod
    def scenario2(cls, **kw) -> "ScenarioConfig":
        return cls(n_functional=50, n_scalar=50, **kw)


@dataclass
class ReplicationReport:
    """Selection and prediction metrics of one replication."""

    rmse: float
    true_pct: float
    false_pct: float
    elapsed_seconds: float
    selected_ids: list
    stop_iteration: int
    seed: int
    failed: bool = False
    error: str | None = None


@dataclass
class AggregateReport:
    """Per-replication rows plus fixed-order means over the successes."""

    rows: list
    mean_rmse: float
    mean_true_pct: float
    mean_false_pct: float
    mean_elapsed_seconds: float
    n_reps: int
    n_failed: int


def _se_path_factory(grid: np.ndarray):
    """Cholesky factor of the SE covariance on the grid, for path draws."""
    d = grid[:, None] - grid[None, :]
    K = np.exp(-0.5 * (d / _GP_LENGTH_SCALE) ** 2)
    K[np.diag_indices_from(K)] += 1e-10
    return linalg.cholesky(K, lower=True)


def true_coefficient_curves(grid: np.ndarray) -> list[np.ndarray]:
    """Sinusoid, Gaussian bump and linear ramp, each scaled so that the
    contribution int x(t) beta(t) dt of an SE-path covariate has unit
    population variance."""
    t = np.asarray(grid, dtype=float)
    shapes = [
        np.sin(2.0 * np.pi * t),
        np.exp(-0.5 * ((t - 0.5) / 0.15) ** 2),
        2.0 * t - 1.0,
    ]
    d = t[:, None] - t[None, :]
    K = np.exp(-0.5 * (d / _GP_LENGTH_SCALE) ** 2)
    h = np.gradient(t)  # trapezoid weights on a general grid
    out = []
    for beta in shapes:
        hb = h * beta
        var = float(hb @ K @ hb)
        out.append(beta / np.sqrt(var))
    return out


def _integrate(curves: np.ndarray, beta: np.ndarray, grid: np.ndarray) -> np.ndarray:
    return np.trapezoid(curves * beta, grid, axis=1)


def generate_scenario(cfg: ScenarioConfig):
    """Draw one train/test pair.

    Returns ``(train, test, truth)`` where each dataset is a dict with
    keys ``y``, ``functional`` (list of (id, FunctionalSample)) and
    ``scalar`` (list of (id, vector)); ``truth`` carries the true ids,
    the coefficient curves and the scalar coefficients.
    """
    rng = np.random.default_rng(cfg.seed)
    grid_pts = np.linspace(0.0, 1.0, cfg.grid_q)
    grid = TimeGrid(grid_pts)
    chol = _se_path_factory(grid_pts)
    betas = true_coefficient_curves(grid_pts)[: cfg.n_true_functional]
    gammas = np.resize(np.asarray(_TRUE_GAMMA), cfg.n_true_scalar)

    func_ids = [f"x{j + 1}" for j in range(cfg.n_functional)]
    scalar_ids = [f"z{m + 1}" for m in range(cfg.n_scalar)]
    true_ids = set(func_ids[: cfg.n_true_functional]) | set(
        scalar_ids[: cfg.n_true_scalar]
    )

    def draw(n):
        functional = []
        signal = np.zeros(n)
        for j, fid in enumerate(func_ids):
            paths = rng.standard_normal((n, cfg.grid_q)) @ chol.T
            functional.append((fid, FunctionalSample(paths, grid)))
            if j < cfg.n_true_functional:
                signal += _integrate(paths, betas[j], grid_pts)
        scalar = []
        for m, sid in enumerate(scalar_ids):
            z = rng.standard_normal(n)
            scalar.append((sid, z))
            if m < cfg.n_true_scalar:
                signal += gammas[m] * z
        y = signal + cfg.noise_sd * rng.standard_normal(n)
        return {"y": y, "functional": functional, "scalar": scalar,
                "signal": signal, "grid": grid}

    train = draw(cfg.n_train)
    test = draw(cfg.n_test)
    truth = {
        "true_ids": true_ids,
        "beta_curves": {func_ids[j]: betas[j] for j in range(cfg.n_true_functional)},
        "gamma": {scalar_ids[m]: float(gammas[m]) for m in range(cfg.n_true_scalar)},
    }
    return train, test, truth


def selection_metrics(selected, truth) -> tuple[float, float, bool]:
    """True/false selection percentages A/(A+B) and B/(A+B).

    A counts selected variables that are truly in the model, B the rest.
    An empty selection returns (0, 0) with the empty flag set.
    """
    selected = set(selected)
    truth = set(truth)
    a = len(selected & truth)
    b = len(selected - truth)
    if a + b == 0:
        return 0.0, 0.0, True
    return 100.0 * a / (a + b), 100.0 * b / (a + b), False


def _candidate_set(data, rep: Representation) -> CandidateSet:
    return CandidateSet(functional=tuple(data["functional"]),
                        scalar=tuple(data["scalar"]), rep=rep)


def run_one(cfg: ScenarioConfig, rep: Representation,
            options: FlarsOptions) -> ReplicationReport:
    """Generate one scenario instance, select, fit, score on the test draw."""
    t0 = time.perf_counter()
    train, test, truth = generate_scenario(cfg)
    cands = _candidate_set(train, rep)
    state, diag, model = run_flars(train["y"], cands, options)
    preds = model.predict(_candidate_set(test, rep))
    rmse = float(np.sqrt(np.mean((test["y"] - preds) ** 2)))
    true_pct, false_pct, _ = selection_metrics(model.selected_ids, truth["true_ids"])
    return ReplicationReport(
        rmse=rmse,
        true_pct=true_pct,
        false_pct=false_pct,
        elapsed_seconds=time.perf_counter() - t0,
        selected_ids=list(model.selected_ids),
        stop_iteration=diag.stop_index,
        seed=cfg.seed,
    )


def run_replications(cfg: ScenarioConfig, rep_kind: str,
                     options: FlarsOptions | None = None,
                     n_reps: int = 100, rep_config: dict | None = None
                     ) -> AggregateReport:
    """Replicated benchmark with per-replication seeds derived by counter.

    Individual failures are recorded as failed rows; more than 10% of
    them aborts with an error.  Means are over successful rows only, in
    replication order.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    options = options or FlarsOptions()
    grid = TimeGrid(np.linspace(0.0, 1.0, cfg.grid_q))
    rep = build_representation(rep_kind, grid, **(rep_config or {}))

    rows = []
    n_failed = 0
    for i in range(n_reps):
        rep_cfg = replace(cfg, seed=cfg.seed * 1_000_003 + i)
        try:
            rows.append(run_one(rep_cfg, rep, options))
        except FlarsError as exc:
            n_failed += 1
            rows.append(ReplicationReport(
                rmse=float("nan"), true_pct=float("nan"), false_pct=float("nan"),
                elapsed_seconds=float("nan"), selected_ids=[], stop_iteration=0,
                seed=rep_cfg.seed, failed=True, error=str(exc),
            ))
    if n_failed > 0.10 * n_reps:
        raise FlarsError(
            f"{n_failed} of {n_reps} replications failed; inspect the error rows"
        )
    ok = [r for r in rows if not r.failed]
    return AggregateReport(
        rows=rows,
        mean_rmse=float(np.mean([r.rmse for r in ok])),
        mean_true_pct=float(np.mean([r.true_pct for r in ok])),
        mean_false_pct=float(np.mean([r.false_pct for r in ok])),
        mean_elapsed_seconds=float(np.mean([r.elapsed_seconds for r in ok])),
        n_reps=n_reps,
        n_failed=n_failed,
    )
