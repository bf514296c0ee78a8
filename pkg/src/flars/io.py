"""File formats: data manifests, project configuration, CSV ingestion,
atomic output writing and model serialization.

All interfaces are plain CSV plus YAML configuration.  A data manifest
lists the response file, an optional wide CSV of scalar variables and
one (curves, grid) CSV pair per functional variable.  Rows with any
missing required value are dropped consistently across all files, with
the count reported.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import DataFormatError
from .gp import GpModel, Kernel
from .lars import CandidateSet, FittedModel, FlarsOptions, NormalizationRule, Standardization
from .cca import PenaltyConfig
from .representation import FunctionalSample, TimeGrid, build_representation

__all__ = [
    "DataManifest",
    "ProjectConfig",
    "LoadedData",
    "load_manifest",
    "load_project_config",
    "load_dataset",
    "write_csv_atomic",
    "save_model",
    "load_model",
]

MODEL_FORMAT_VERSION = 1


@dataclass
class DataManifest:
    """Paths and column names describing one dataset on disk."""

    response_file: str
    scalar_file: str | None = None
    functional: list = field(default_factory=list)  # (id, curve_file, grid_file)
    subject_column: str | None = None
    visit_column: str | None = None
    base_dir: str = "."

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)


@dataclass
class ProjectConfig:
    """Algorithm configuration as read from the YAML config file."""

    representation: dict = field(default_factory=lambda: {"kind": "GQ", "Q": 18})
    normalization: str = "Norm"
    penalties: dict = field(default_factory=lambda: {"lambda1": "auto", "lambda2": "auto"})
    stopping: dict = field(default_factory=lambda: {"rule": "cd", "cd_threshold_frac": 0.10})
    modification2: dict = field(default_factory=lambda: {"enabled": False, "kappa": 0.05})
    gp: dict = field(default_factory=lambda: {"enabled": False, "phi_columns": []})
    seed: int = 0

    def flars_options(self) -> FlarsOptions:
        pen = None
        lam1 = self.penalties.get("lambda1", "auto")
        lam2 = self.penalties.get("lambda2", "auto")
        if lam1 != "auto" and lam2 != "auto":
            pen = PenaltyConfig(float(lam1), float(lam2))
        elif (lam1 == "auto") != (lam2 == "auto"):
            raise DataFormatError(
                "penalties.lambda1 and lambda2 must both be 'auto' or both numeric"
            )
        stopping = dict(self.stopping)
        rule = stopping.get("rule", "cd")
        kw = {}
        grid = self.penalties.get("lambda1_grid")
        if grid is not None:
            kw["lambda1_grid"] = np.asarray(grid, dtype=float)
        l2grid = self.penalties.get("lambda2_grid")
        if l2grid is not None:
            kw["lambda2_grid"] = tuple(float(v) for v in l2grid)
        return FlarsOptions(
            pen=pen,
            norm=NormalizationRule(self.normalization),
            kappa=(float(self.modification2.get("kappa", 0.05))
                   if self.modification2.get("enabled", False) else None),
            stop=rule,
            cd_threshold_frac=float(stopping.get("cd_threshold_frac", 0.10)),
            max_iter=stopping.get("max_iter"),
            seed=int(self.seed),
            **kw,
        )

    def build_representation(self, grid: TimeGrid):
        cfg = dict(self.representation)
        kind = cfg.pop("kind", "GQ")
        return build_representation(kind, grid, **cfg)


@dataclass
class LoadedData:
    """In-memory dataset: aligned response, candidates and grouping."""

    y: np.ndarray
    functional: list  # (id, FunctionalSample)
    scalar: list  # (id, vector)
    subject_index: np.ndarray | None
    visit: np.ndarray | None
    grid: TimeGrid | None
    n_dropped: int

    def candidate_set(self, rep) -> CandidateSet:
        return CandidateSet(functional=tuple(self.functional),
                            scalar=tuple(self.scalar), rep=rep)


def _read_table(path: str) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataFormatError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    width = len(header)
    for i, row in enumerate(body):
        if len(row) != width:
            raise DataFormatError(
                f"{path}: row {i + 2} has {len(row)} fields, header has {width}"
            )
    return header, body


def _to_float(path: str, row_idx: int, col: str, text: str) -> float:
    text = text.strip()
    if text == "" or text.upper() in ("NA", "NAN"):
        return np.nan
    try:
        return float(text)
    except ValueError:
        raise DataFormatError(
            f"{path}: row {row_idx + 2}, column {col!r}: non-numeric value {text!r}"
        ) from None


def _load_matrix(path: str) -> np.ndarray:
    header, body = _read_table(path)
    out = np.empty((len(body), len(header)))
    for i, row in enumerate(body):
        for j, text in enumerate(row):
            out[i, j] = _to_float(path, i, header[j], text)
    return out


def load_manifest(path: str) -> DataManifest:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise DataFormatError(f"cannot parse manifest {path}: {exc}") from exc
    if not isinstance(raw, dict) or "response" not in raw:
        raise DataFormatError(f"manifest {path} must be a mapping with a 'response' key")
    functional = []
    for entry in raw.get("functional", []) or []:
        missing = {"id", "curves", "grid"} - set(entry)
        if missing:
            raise DataFormatError(
                f"manifest functional entry missing keys: {sorted(missing)}"
            )
        functional.append((str(entry["id"]), entry["curves"], entry["grid"]))
    return DataManifest(
        response_file=raw["response"],
        scalar_file=raw.get("scalars"),
        functional=functional,
        subject_column=raw.get("subject_column"),
        visit_column=raw.get("visit_column"),
        base_dir=os.path.dirname(os.path.abspath(path)),
    )


def load_project_config(path: str | None) -> ProjectConfig:
    if path is None:
        return ProjectConfig()
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise DataFormatError(f"cannot parse config {path}: {exc}") from exc
    known = {"representation", "normalization", "penalties", "stopping",
             "modification2", "gp", "seed"}
    unknown = set(raw) - known
    if unknown:
        raise DataFormatError(f"unknown config keys: {sorted(unknown)}")
    cfg = ProjectConfig()
    for key, value in raw.items():
        if isinstance(getattr(cfg, key), dict) and isinstance(value, dict):
            merged = dict(getattr(cfg, key))
            merged.update(value)
            setattr(cfg, key, merged)
        else:
            setattr(cfg, key, value)
    return cfg


def load_dataset(manifest: DataManifest, require_response: bool = True) -> LoadedData:
    """Load and align all files of a manifest, dropping incomplete rows."""
    header, body = _read_table(manifest.resolve(manifest.response_file))
    path = manifest.resolve(manifest.response_file)
    colmap = {name: j for j, name in enumerate(header)}
    if require_response and "y" not in colmap:
        raise DataFormatError(f"{path}: response file needs a 'y' column")

    n = len(body)
    y = np.full(n, np.nan)
    if "y" in colmap:
        y = np.array([_to_float(path, i, "y", row[colmap["y"]])
                      for i, row in enumerate(body)])
    subject = visit = None
    if manifest.subject_column:
        if manifest.subject_column not in colmap:
            raise DataFormatError(
                f"{path}: subject column {manifest.subject_column!r} not found"
            )
        subject = np.array([row[colmap[manifest.subject_column]].strip()
                            for row in body])
    if manifest.visit_column:
        if manifest.visit_column not in colmap:
            raise DataFormatError(
                f"{path}: visit column {manifest.visit_column!r} not found"
            )
        visit = np.array([_to_float(path, i, manifest.visit_column,
                                    row[colmap[manifest.visit_column]])
                          for i, row in enumerate(body)])

    keep = np.ones(n, dtype=bool)
    if require_response:
        keep &= np.isfinite(y)

    scalars = []
    if manifest.scalar_file:
        spath = manifest.resolve(manifest.scalar_file)
        sheader, sbody = _read_table(spath)
        if len(sbody) != n:
            raise DataFormatError(
                f"{spath}: {len(sbody)} rows, response file has {n}"
            )
        for j, name in enumerate(sheader):
            col = np.array([_to_float(spath, i, name, row[j])
                            for i, row in enumerate(sbody)])
            scalars.append((name, col))
            keep &= np.isfinite(col)

    functional = []
    grid = None
    for fid, curve_file, grid_file in manifest.functional:
        gpath = manifest.resolve(grid_file)
        gmat = _load_matrix(gpath)
        pts = gmat.ravel()
        fgrid = TimeGrid(pts)
        if grid is None:
            grid = fgrid
        elif not np.array_equal(grid.points, fgrid.points):
            raise DataFormatError(
                f"functional variable {fid!r} uses a different grid; "
                "all curves must share one grid"
            )
        cpath = manifest.resolve(curve_file)
        curves = _load_matrix(cpath)
        if curves.shape != (n, len(fgrid)):
            raise DataFormatError(
                f"{cpath}: shape {curves.shape}, expected ({n}, {len(fgrid)})"
            )
        functional.append((fid, curves))
        keep &= np.all(np.isfinite(curves), axis=1)

    n_dropped = int(n - keep.sum())
    if keep.sum() == 0:
        raise DataFormatError("no complete rows remain after dropping missing data")

    return LoadedData(
        y=y[keep],
        functional=[(fid, FunctionalSample(c[keep], grid)) for fid, c in functional],
        scalar=[(name, col[keep]) for name, col in scalars],
        subject_index=subject[keep] if subject is not None else None,
        visit=visit[keep] if visit is not None else None,
        grid=grid,
        n_dropped=n_dropped,
    )


def write_csv_atomic(path: str, header: list[str], rows) -> None:
    """Write a CSV via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow(row)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _arr(x) -> list:
    return np.asarray(x).tolist()


def save_model(path: str, model: FittedModel, rep_config: dict,
               gp: GpModel | None = None, gp_diag: dict | None = None,
               converged: bool = True, extra: dict | None = None) -> None:
    """Serialize a fitted model (and optional random-effects layer) as JSON.

    Floats go through Python's shortest-round-trip repr, so a reload
    reproduces predictions bit for bit.
    """
    std = model.standardization
    payload = {
        "format_version": MODEL_FORMAT_VERSION,
        "representation": rep_config,
        "grid": _arr(model.rep.grid.points) if model.rep is not None else None,
        "selected_ids": list(model.selected_ids),
        "intercept": std.y_mean,
        "functional_coefs": {k: _arr(v) for k, v in model.functional_coefs.items()},
        "scalar_coefs": {k: float(v) for k, v in model.scalar_coefs.items()},
        "standardization": {
            "y_mean": std.y_mean,
            "scalar": {k: [float(m), float(s)] for k, (m, s) in std.scalar_stats.items()},
            "functional": {k: {"col_means": _arr(mu), "pooled_sd": float(sd)}
                           for k, (mu, sd) in std.functional_stats.items()},
        },
        "converged": bool(converged),
        "gp": None,
        "extra": extra or {},
    }
    if gp is not None:
        payload["gp"] = {
            "kernel": {"v1": gp.kernel.v1, "w": _arr(gp.kernel.w),
                       "sigma": gp.kernel.sigma},
            "train_phi": _arr(gp.train_phi),
            "train_resid": _arr(gp.train_resid),
            "subject_index": [str(s) for s in gp.subject_index],
            "diagnostics": {k: (_arr(v) if isinstance(v, np.ndarray) else v)
                            for k, v in (gp_diag or {}).items()},
        }
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=1)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path: str) -> dict:
    """Load a serialized model; returns a dict with 'model', 'gp',
    'rep_config', 'converged' and 'extra' keys."""
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot load model {path}: {exc}") from exc
    if payload.get("format_version") != MODEL_FORMAT_VERSION:
        raise DataFormatError(
            f"unsupported model format version {payload.get('format_version')!r}"
        )
    rep = None
    if payload["grid"] is not None:
        grid = TimeGrid(np.asarray(payload["grid"], dtype=float))
        cfg = dict(payload["representation"])
        kind = cfg.pop("kind")
        rep = build_representation(kind, grid, **cfg)
    std_raw = payload["standardization"]
    std = Standardization(
        y_mean=float(std_raw["y_mean"]),
        scalar_stats={k: (v[0], v[1]) for k, v in std_raw["scalar"].items()},
        functional_stats={k: (np.asarray(v["col_means"], dtype=float), v["pooled_sd"])
                          for k, v in std_raw["functional"].items()},
    )
    model = FittedModel(
        rep=rep,
        functional_coefs={k: np.asarray(v, dtype=float)
                          for k, v in payload["functional_coefs"].items()},
        scalar_coefs={k: float(v) for k, v in payload["scalar_coefs"].items()},
        standardization=std,
        selected_ids=list(payload["selected_ids"]),
    )
    gp = None
    gp_diag = {}
    if payload["gp"] is not None:
        graw = payload["gp"]
        gp = GpModel(
            kernel=Kernel(v1=graw["kernel"]["v1"],
                          w=np.asarray(graw["kernel"]["w"], dtype=float),
                          sigma=graw["kernel"]["sigma"]),
            train_phi=np.asarray(graw["train_phi"], dtype=float),
            train_resid=np.asarray(graw["train_resid"], dtype=float),
            subject_index=np.asarray(graw["subject_index"]),
        )
        gp_diag = {k: (np.asarray(v) if isinstance(v, list) else v)
                   for k, v in graw.get("diagnostics", {}).items()}
    return {
        "model": model,
        "gp": gp,
        "gp_diagnostics": gp_diag,
        "rep_config": payload["representation"],
        "converged": payload["converged"],
        "extra": payload.get("extra", {}),
    }
