"""Batch command-line front end.

Commands: select | fit | predict | simulate | report.  Exit codes:
0 success, 2 data error, 3 non-convergence, 4 schema mismatch.
"""

from __future__ import annotations

import csv
import math
import os
import sys
from dataclasses import replace

import click
import numpy as np
import yaml

from . import io as fio
from .errors import DataFormatError, FlarsError
from .gp import backfit, predict_within_subject
from .lars import FlarsOptions, run_flars, stopping_cd
from .representation import TimeGrid
from .simulate import ScenarioConfig, run_replications

EXIT_DATA = 2
EXIT_NONCONVERGENCE = 3
EXIT_SCHEMA = 4

TRACE_COLUMNS = ["iteration", "selected_id", "alpha", "rho_star", "cd",
                 "df_star", "cp", "rss"]


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _set_threads(n: int | None):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Project configuration YAML.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--threads", type=int, default=None, help="BLAS thread cap.")
@click.option("--out", "out_dir", type=click.Path(), default=".",
              help="Output directory.")
@click.pass_context
def main(ctx, config_path, seed, threads, out_dir):
    """Variable selection and mixed-effects regression for scalar and
    functional covariates."""
    _set_threads(threads)
    ctx.ensure_object(dict)
    try:
        cfg = fio.load_project_config(config_path)
    except DataFormatError as exc:
        _fail(EXIT_DATA, str(exc))
    if seed is not None:
        cfg.seed = seed
    ctx.obj["config"] = cfg
    ctx.obj["out"] = out_dir


def _load(manifest_path: str, require_response: bool = True) -> fio.LoadedData:
    manifest = fio.load_manifest(manifest_path)
    return fio.load_dataset(manifest, require_response=require_response)


def _prepare_run(cfg: fio.ProjectConfig, data: fio.LoadedData):
    rep = cfg.build_representation(data.grid) if data.functional else None
    cands = data.candidate_set(rep)
    return rep, cands


def _trace_rows(state, diag):
    k = state.iteration
    selected = [state.active[0]] + [w for w in state.selections]
    rows = []
    for i in range(k):
        rows.append([
            i + 1,
            "" if selected[i] is None else selected[i],
            repr(state.distances[i]),
            repr(state.corr_history[i]),
            repr(state.cd_history[i]),
            repr(state.df_history[i]),
            repr(float(diag.cp_trace[i])),
            repr(state.rss_history[i]),
        ])
    return rows


@main.command()
@click.argument("manifest", type=click.Path(exists=True))
@click.pass_context
def select(ctx, manifest):
    """Run the selection path and export its trace."""
    cfg, out_dir = ctx.obj["config"], ctx.obj["out"]
    try:
        data = _load(manifest)
        rep, cands = _prepare_run(cfg, data)
        options = cfg.flars_options()
        state, diag, model = run_flars(data.y, cands, options)
    except (DataFormatError, FlarsError, ValueError) as exc:
        _fail(EXIT_DATA, str(exc))
    if data.n_dropped:
        click.echo(f"dropped {data.n_dropped} incomplete rows")

    trace_path = os.path.join(out_dir, "trace.csv")
    fio.write_csv_atomic(trace_path, TRACE_COLUMNS, _trace_rows(state, diag))

    summary_path = os.path.join(out_dir, "selection.txt")
    lines = [
        f"stop_rule: {diag.stop_rule}",
        f"stop_index: {diag.stop_index}",
        f"selected: {','.join(str(s) for s in model.selected_ids)}",
        f"df_star: {diag.df_star!r}",
        f"sigma2: {diag.sigma2!r}",
        "cd_trace: " + ",".join(repr(v) for v in diag.cd_trace),
    ]
    os.makedirs(out_dir, exist_ok=True)
    with open(summary_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    click.echo(f"selected {len(model.selected_ids)} variables "
               f"(stop {diag.stop_index}, rule {diag.stop_rule})")
    click.echo(f"wrote {trace_path} and {summary_path}")


@main.command()
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--selected", "selected_csv", required=True,
              help="Comma-separated variable ids to fit.")
@click.option("--model-out", default="model.json", show_default=True,
              help="Model file name inside the output directory.")
@click.pass_context
def fit(ctx, manifest, selected_csv, model_out):
    """Fit the regression on pre-selected variables, optionally with the
    random-effects layer."""
    cfg, out_dir = ctx.obj["config"], ctx.obj["out"]
    selected = [s.strip() for s in selected_csv.split(",") if s.strip()]
    try:
        data = _load(manifest)
    except (DataFormatError, FlarsError) as exc:
        _fail(EXIT_DATA, str(exc))
    known = {i for i, _ in data.functional} | {i for i, _ in data.scalar}
    missing = [s for s in selected if s not in known]
    if missing:
        _fail(EXIT_SCHEMA, f"selected ids not in manifest: {missing}")

    try:
        rep, _ = _prepare_run(cfg, data)
        sub = fio.LoadedData(
            y=data.y,
            functional=[(i, x) for i, x in data.functional if i in selected],
            scalar=[(i, z) for i, z in data.scalar if i in selected],
            subject_index=data.subject_index, visit=data.visit,
            grid=data.grid, n_dropped=data.n_dropped,
        )
        sub_rep = rep if sub.functional else None
        cands = sub.candidate_set(sub_rep)
        options = replace(cfg.flars_options(), stop="max_iter", max_iter=None)

        def fixed_fit(y_vec):
            _, _, m = run_flars(y_vec, cands, options)
            return m, m.predict(cands)

        model, fitted = fixed_fit(data.y)
    except (DataFormatError, FlarsError, ValueError) as exc:
        _fail(EXIT_DATA, str(exc))

    gp = None
    gp_diag = {}
    converged = True
    if cfg.gp.get("enabled", False):
        phi_cols = cfg.gp.get("phi_columns", [])
        scalar_map = dict(data.scalar)
        missing = [c for c in phi_cols if c not in scalar_map]
        if missing or not phi_cols:
            _fail(EXIT_SCHEMA, f"gp.phi_columns missing from data: {missing or phi_cols}")
        if data.subject_index is None:
            _fail(EXIT_SCHEMA, "random-effects fit needs a subject_column in the manifest")
        phi = np.column_stack([scalar_map[c] for c in phi_cols])

        def refit_fixed(y_tilde):
            m, f = fixed_fit(y_tilde)
            return m, f

        mixed = backfit(
            data.y, refit_fixed, phi, data.subject_index,
            max_sweeps=int(cfg.gp.get("max_sweeps", 50)),
            tol=float(cfg.gp.get("tol", 1e-6)),
            n_restarts=int(cfg.gp.get("restarts", 5)),
            seed=int(cfg.seed),
        )
        model = mixed.fixed_coefs
        gp = mixed.gp
        converged = mixed.converged
        gp_diag = {"phi_mean": mixed.diagnostics["phi_mean"],
                   "phi_sd": mixed.diagnostics["phi_sd"],
                   "phi_columns": phi_cols,
                   "n_backfit_iters": mixed.n_backfit_iters}

    rep_cfg = dict(cfg.representation) if model.rep is not None else {}
    model_path = os.path.join(out_dir, model_out)
    fio.save_model(model_path, model, rep_cfg, gp=gp, gp_diag=gp_diag,
                   converged=converged, extra={"seed": cfg.seed})
    click.echo(f"wrote {model_path}")
    if not converged:
        diag_path = os.path.join(out_dir, "fit_diagnostics.txt")
        with open(diag_path, "w") as fh:
            fh.write(f"converged: false\nsweeps: {gp_diag.get('n_backfit_iters')}\n")
        _fail(EXIT_NONCONVERGENCE,
              f"backfit did not converge; diagnostics in {diag_path}")
    click.echo("fit converged")


@main.command()
@click.argument("model_file", type=click.Path(exists=True))
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--predictions-out", default="predictions.csv", show_default=True)
@click.pass_context
def predict(ctx, model_file, manifest, predictions_out):
    """Predict responses for the rows of a manifest."""
    cfg, out_dir = ctx.obj["config"], ctx.obj["out"]
    try:
        bundle = fio.load_model(model_file)
        data = _load(manifest, require_response=False)
    except (DataFormatError, FlarsError) as exc:
        _fail(EXIT_DATA, str(exc))
    model = bundle["model"]
    gp = bundle["gp"]

    known = {i for i, _ in data.functional} | {i for i, _ in data.scalar}
    missing = [s for s in model.selected_ids if s not in known]
    if missing:
        _fail(EXIT_SCHEMA, f"manifest lacks variables required by the model: {missing}")

    out_path = os.path.join(out_dir, predictions_out)
    n = data.y.size if data.y is not None else 0
    if data.scalar:
        n = data.scalar[0][1].size
    elif data.functional:
        n = data.functional[0][1].n_samples
    if n == 0:
        fio.write_csv_atomic(out_path, ["subject", "visit", "mean", "sd"], [])
        click.echo(f"wrote {out_path} (empty)")
        return

    cands = data.candidate_set(model.rep)
    fixed = model.predict(cands)

    rows = []
    if gp is None:
        for i in range(n):
            subj = data.subject_index[i] if data.subject_index is not None else ""
            vis = data.visit[i] if data.visit is not None else ""
            rows.append([subj, vis, repr(float(fixed[i])), repr(0.0)])
    else:
        diag = bundle["gp_diagnostics"]
        phi_cols = list(diag.get("phi_columns", []))
        scalar_map = dict(data.scalar)
        missing = [c for c in phi_cols if c not in scalar_map]
        if missing:
            _fail(EXIT_SCHEMA, f"manifest lacks random-effects covariates: {missing}")
        if data.subject_index is None:
            _fail(EXIT_SCHEMA, "prediction with random effects needs a subject_column")
        phi = np.column_stack([scalar_map[c] for c in phi_cols])
        phi_std = (phi - np.asarray(diag["phi_mean"])) / np.asarray(diag["phi_sd"])
        train_subjects = gp.subjects()
        prior_var = gp.kernel.v1 + gp.kernel.sigma ** 2
        for i in range(n):
            subj = str(data.subject_index[i])
            vis = data.visit[i] if data.visit is not None else ""
            if subj in train_subjects:
                mean, var = predict_within_subject(gp, float(fixed[i]), phi_std[i], subj)
            else:
                # unseen subject: average the as-if-subject predictions
                preds = [predict_within_subject(gp, float(fixed[i]), phi_std[i], s)[0]
                         for s in train_subjects]
                mean = float(np.mean(preds)) if preds else float(fixed[i])
                var = prior_var
            rows.append([subj, vis, repr(float(mean)), repr(math.sqrt(max(var, 0.0)))])
    fio.write_csv_atomic(out_path, ["subject", "visit", "mean", "sd"], rows)
    click.echo(f"wrote {out_path} ({len(rows)} rows)")


@main.command()
@click.argument("scenario_config", type=click.Path(exists=True))
@click.pass_context
def simulate(ctx, scenario_config):
    """Run a replicated synthetic benchmark and write report CSVs."""
    cfg, out_dir = ctx.obj["config"], ctx.obj["out"]
    try:
        with open(scenario_config) as fh:
            raw = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        _fail(EXIT_DATA, f"cannot parse scenario config: {exc}")

    scenario = raw.pop("scenario", None)
    n_reps = int(raw.pop("reps", 100))
    rep_kind = raw.pop("representation", "GQ")
    rep_config = raw.pop("representation_config", {"Q": 18})
    raw.setdefault("seed", cfg.seed)
    try:
        if scenario == 1:
            sc = ScenarioConfig.scenario1(**raw)
        elif scenario == 2:
            sc = ScenarioConfig.scenario2(**raw)
        else:
            sc = ScenarioConfig(**raw)
        options = cfg.flars_options()
        agg = run_replications(sc, rep_kind, options, n_reps=n_reps,
                               rep_config=rep_config)
    except (FlarsError, ValueError, TypeError) as exc:
        _fail(EXIT_DATA, str(exc))

    rep_path = os.path.join(out_dir, "replications.csv")
    fio.write_csv_atomic(
        rep_path,
        ["replication", "seed", "rmse", "true_pct", "false_pct",
         "elapsed_seconds", "stop_iteration", "selected_ids", "failed", "error"],
        [[i + 1, r.seed, repr(r.rmse), repr(r.true_pct), repr(r.false_pct),
          repr(r.elapsed_seconds), r.stop_iteration,
          ";".join(str(s) for s in r.selected_ids),
          int(r.failed), r.error or ""]
         for i, r in enumerate(agg.rows)],
    )
    sum_path = os.path.join(out_dir, "summary.csv")
    fio.write_csv_atomic(
        sum_path,
        ["n_reps", "n_failed", "mean_rmse", "mean_true_pct", "mean_false_pct",
         "mean_elapsed_seconds"],
        [[agg.n_reps, agg.n_failed, repr(agg.mean_rmse), repr(agg.mean_true_pct),
          repr(agg.mean_false_pct), repr(agg.mean_elapsed_seconds)]],
    )
    click.echo(f"mean true%={agg.mean_true_pct:.2f} false%={agg.mean_false_pct:.2f} "
               f"rmse={agg.mean_rmse:.4f}")
    click.echo(f"wrote {rep_path} and {sum_path}")


@main.command()
@click.argument("trace_file", type=click.Path(exists=True))
@click.option("--threshold-frac", default=0.10, show_default=True)
def report(trace_file, threshold_frac):
    """Summarize a selection trace CSV and recompute its stop index."""
    try:
        with open(trace_file, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        _fail(EXIT_DATA, f"cannot read trace: {exc}")
    if not rows:
        _fail(EXIT_DATA, "trace file has no rows")
    missing = [c for c in TRACE_COLUMNS if c not in rows[0]]
    if missing:
        _fail(EXIT_SCHEMA, f"trace file lacks columns: {missing}")
    cd = np.array([float(r["cd"]) if r["cd"] not in ("", "nan") else np.nan
                   for r in rows])
    stop = stopping_cd(cd, threshold_frac)
    click.echo(f"iterations: {len(rows)}")
    click.echo(f"stop_index (cd rule, frac={threshold_frac}): {stop}")
    for r in rows:
        click.echo(f"  iter {r['iteration']:>3}  selected={r['selected_id'] or '-':<8} "
                   f"alpha={float(r['alpha']):.6g}  cd={r['cd']}  rss={float(r['rss']):.6g}")


if __name__ == "__main__":
    main()
