"""Command-line pipeline: simulate, ingest, QC, fit, correlate, regress.

Every subcommand reads a flat flag set (optionally seeded from a TOML or
JSON config file, with flags taking precedence), writes UTF-8 CSV/JSON
artifacts under ``--out``, and records them in a ``manifest.json`` carrying
the tool version, a hash of the effective configuration (excluding the
output directory and thread count, so reruns elsewhere are byte-identical),
and the seed.  Exit codes: 0 ok, 2 configuration, 3 data/schema, 4
numerical degeneracy, 5 bootstrap instability.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .crosscorr import (
    FsBootstrapPlan,
    correlation_surface,
    correlation_trajectory_fs,
    crosscov_ff,
    crosscov_fs,
)
from .datamodel import (
    Cohort,
    IngestSchema,
    QcPolicy,
    design_count_matrix,
    ingest_long_csv,
    qc_filter,
    write_long_csv,
    write_scalar_csv,
    write_schema_json,
)
from .errors import ConfigError, DataError, SparseFdaError, exit_code_for
from .fcr import FcrSpec, fcr_bootstrap, solve_fcr
from .fpca import FpcaModel, fit_fpca
from .scalarmodels import (
    bootstrap_score_lm,
    fit_score_lm,
    pearson_scores_vs_outcome,
    residualize,
)
from .simulate import ingest_schema_for, load_scenario, simulate_cohort

# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

_HASH_EXCLUDED = {"out_dir", "threads", "config"}


@dataclass
class RunConfig:
    """Flat, file-overridable settings shared by all subcommands."""

    # inputs
    data: str | None = None
    scalars: str | None = None
    schema: str | None = None
    scenario: str | None = None
    scores: str | None = None
    response: str | None = None          # response table path (score models)
    response_var: str | None = None      # response variable/field name (fcr)
    out_dir: str = "out"
    # selections
    variable: str | None = None
    variables: list[str] = field(default_factory=list)
    scalar_covariates: list[str] = field(default_factory=list)
    outcome_field: str | None = None
    response_column: str = "residual"
    score_columns: list[str] = field(default_factory=list)
    interactions: list[str] = field(default_factory=list)
    # estimation
    grid_size: int = 51
    bw_mean: float | str = 1.0
    bw_cov: float | str = 1.0
    bw_cross: float = 2.0
    bw_sigma2: float | None = None
    fve: float = 0.95
    max_k: int | None = None
    ridge: float | str = "auto"
    standardize: bool = False
    bin_width: float | None = None
    # quality control
    qc_schedule: list[float] | None = None
    qc_tolerance: float = 0.5
    qc_max_missed: int = 2
    qc_max_increment: dict[str, float] = field(default_factory=dict)
    qc_monotonic: bool = False
    keep_first_duplicates: bool = False
    # inference
    k_boot: int = 0
    seed: int | None = None
    threads: int = 1

    def validate(self) -> None:
        for name in ("data", "scalars", "schema", "scenario", "scores",
                     "response"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"--{name.replace('_', '-')}: "
                                  f"file not found: {path}")
        if self.k_boot < 0:
            raise ConfigError("k_boot must be nonnegative")
        if self.k_boot > 0 and self.seed is None:
            raise ConfigError("a seed is mandatory when a bootstrap is "
                              "requested (--seed)")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.grid_size < 2:
            raise ConfigError("grid size must be >= 2")
        if not (0 < self.fve <= 1):
            raise ConfigError("fve must be in (0, 1]")

    def hash(self) -> str:
        d = dataclasses.asdict(self)
        for key in _HASH_EXCLUDED:
            d.pop(key, None)
        blob = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def _parse_bw(text: str):
    if text == "cv":
        return "cv"
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"bandwidth must be a number or 'cv', got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("bandwidth must be positive")
    return v


def _parse_ridge(text: str):
    if text == "auto":
        return "auto"
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"ridge must be a number or 'auto', got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("ridge must be nonnegative")
    return v


def _parse_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _parse_floats(text: str) -> list[float]:
    return [float(p) for p in _parse_list(text)]


def _parse_assignments(pairs: list[str]) -> dict[str, float]:
    out: dict[str, float] = {}
    for p in pairs:
        if "=" not in p:
            raise argparse.ArgumentTypeError(
                f"expected name=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = float(v)
    return out


def _load_config_file(path: str) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:  # Python 3.10
            import tomli as tomllib
        data = tomllib.loads(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a table/object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return data


def build_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults < config file < explicit flags into a RunConfig."""
    merged: dict = {}
    if getattr(args, "config", None):
        merged.update(_load_config_file(args.config))
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            merged[f.name] = v
    if "qc_max_increment" in merged and isinstance(
            merged["qc_max_increment"], list):
        merged["qc_max_increment"] = _parse_assignments(
            merged["qc_max_increment"])
    cfg = RunConfig(**merged)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Deterministic writers
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return v


class Workspace:
    """Output directory with manifest bookkeeping."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.root = Path(cfg.out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.hash = cfg.hash()
        self.artifacts: dict[str, str] = {}
        self.stages: dict[str, dict] = {}

    def meta_lines(self) -> list[str]:
        seed = "none" if self.cfg.seed is None else str(self.cfg.seed)
        return [f"tool: sparsefda {__version__}",
                f"config: {self.hash}",
                f"seed: {seed}"]

    def write_csv(self, name: str, rows) -> str:
        path = self.root / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            for line in self.meta_lines():
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self.artifacts[name] = name
        return name

    def write_json(self, name: str, obj) -> str:
        path = self.root / name
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, sort_keys=True)
            fh.write("\n")
        self.artifacts[name] = name
        return name

    def record_file(self, name: str) -> str:
        self.artifacts[name] = name
        return name

    def run_stage(self, name: str, fn) -> bool:
        """Run one pipeline stage, recording success or failure."""
        try:
            fn()
        except SparseFdaError as exc:
            self.stages[name] = {"status": "failed", "error": str(exc),
                                 "exit_code": exit_code_for(exc)}
            return False
        self.stages[name] = {"status": "ok"}
        return True

    def finish(self) -> int:
        manifest = {
            "tool": "sparsefda",
            "version": __version__,
            "command": self.command,
            "config_hash": self.hash,
            "seed": self.cfg.seed,
            "artifacts": dict(sorted(self.artifacts.items())),
        }
        if self.stages:
            manifest["stages"] = self.stages
        with open(self.root / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True)
            fh.write("\n")
        failed = [s for s in self.stages.values()
                  if s["status"] == "failed"]
        if failed:
            return int(failed[0].get("exit_code", 1))
        if any(s["status"] != "ok" for s in self.stages.values()):
            return 1
        return 0


def _read_table(path) -> tuple[list[str], list[dict[str, str]]]:
    """CSV with '#' comment lines -> (header, row dicts)."""
    header: list[str] | None = None
    rows: list[dict[str, str]] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if header is None:
                header = row
                continue
            rows.append(dict(zip(header, row)))
    if header is None:
        raise DataError(f"{path}: no header row")
    return header, rows


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


# ---------------------------------------------------------------------------
# Shared loading steps
# ---------------------------------------------------------------------------


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if not getattr(cfg, n)]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise ConfigError(f"missing required option(s): {flags}")


def _qc_policy(cfg: RunConfig) -> QcPolicy:
    return QcPolicy(
        schedule=tuple(cfg.qc_schedule) if cfg.qc_schedule else None,
        visit_tolerance=cfg.qc_tolerance,
        max_missed_visits=cfg.qc_max_missed,
        max_increment_per_month=dict(cfg.qc_max_increment),
        enforce_monotonic=cfg.qc_monotonic,
    )


def _load_cohort(cfg: RunConfig, qc: bool = True) -> Cohort:
    _require(cfg, "data", "schema")
    schema = IngestSchema.from_path(cfg.schema)
    cohort = ingest_long_csv(cfg.data, schema, cfg.scalars,
                             strict_duplicates=not cfg.keep_first_duplicates)
    if qc:
        cohort = qc_filter(cohort, _qc_policy(cfg))
    if not any(s.n_subjects for s in cohort.samples.values()):
        raise DataError(f"{cfg.data}: no usable observations"
                        + (" after qc" if qc else ""))
    return cohort


def _pick_sample(cohort: Cohort, name: str):
    if name not in cohort.samples:
        raise DataError(f"variable {name!r} not in cohort; have "
                        f"{cohort.variable_names}")
    sample = cohort.samples[name]
    if sample.n_subjects == 0:
        raise DataError(f"variable {name!r} has no subjects after QC")
    return sample


def _fit_variable(cfg: RunConfig, cohort: Cohort, name: str) -> FpcaModel:
    sample = _pick_sample(cohort, name)
    bw_mean = None if cfg.bw_mean == "cv" else float(cfg.bw_mean)
    bw_cov = None if cfg.bw_cov == "cv" else float(cfg.bw_cov)
    return fit_fpca(
        sample, bw_mean, bw_cov, grid_size=cfg.grid_size,
        fve_threshold=cfg.fve, max_components=cfg.max_k,
        sigma2_bandwidth=cfg.bw_sigma2, ridge=cfg.ridge,
        cv_seed=cfg.seed if cfg.seed is not None else 0,
    )


def _numeric_field_map(cohort: Cohort, fieldname: str) -> dict[str, float]:
    if cohort.scalars is None:
        raise DataError("no scalar covariate table was loaded")
    if fieldname not in cohort.scalars.numeric_fields:
        raise DataError(f"{fieldname!r} is not a declared numeric field; "
                        f"have {cohort.scalars.numeric_fields}")
    out: dict[str, float] = {}
    for sid, rec in cohort.scalars.records.items():
        v = rec.get(fieldname)
        if v is not None:
            out[sid] = float(v)
    if not out:
        raise DataError(f"{fieldname!r} has no usable values")
    return out


# ---------------------------------------------------------------------------
# Artifact emitters shared by commands and the pipeline
# ---------------------------------------------------------------------------


def _emit_fpca(ws: Workspace, model: FpcaModel, prefix: str) -> None:
    ws.write_json(f"{prefix}_model.json", model.to_json_dict())
    fve_rows = [("variable", "component", "eigenvalue", "fve",
                 "cumulative_fve", "retained")]
    fve_rows += [tuple(r.values()) for r in model.fve_rows()]
    ws.write_csv(f"{prefix}_fve.csv", fve_rows)

    k = model.eigen.n_components
    header = (["subject_id"] + [f"pc{j + 1}" for j in range(k)]
              + [f"pc{j + 1}_norm" for j in range(k)])
    sds = model.score_sds()
    rows: list[tuple] = [tuple(header)]
    for i, sid in enumerate(model.scores.ids):
        raw = model.scores.scores[i]
        rows.append((sid, *raw.tolist(), *(raw / sds).tolist()))
    ws.write_csv(f"{prefix}_scores.csv", rows)


def _emit_design(ws: Workspace, cfg: RunConfig, cohort: Cohort,
                 name: str) -> None:
    sample = _pick_sample(cohort, name)
    dcm = design_count_matrix(sample, bin_width=cfg.bin_width)
    rows = [("time_j", "time_k", "count")]
    rows += list(dcm.csv_rows())
    ws.write_csv(f"{_safe_name(name)}_design_counts.csv", rows)


def _emit_score_lm(ws: Workspace, fit, prefix: str) -> None:
    ws.write_json(f"{prefix}.json", fit.to_json_dict())
    ws.write_csv(f"{prefix}.csv", fit.table_rows())
    for name, curve in sorted(fit.kdes.items()):
        if curve is None:
            continue
        rows = [("value", "density")]
        rows += list(curve.csv_rows())
        ws.write_csv(f"{prefix}_kde_{_safe_name(name)}.csv", rows)


def _emit_trajectory(ws: Workspace, traj, name: str) -> None:
    ws.write_csv(name, traj.csv_rows())


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> int:
    _require(cfg, "scenario")
    if cfg.seed is None:
        raise ConfigError("--seed is required for simulation")
    ws = Workspace(cfg, "simulate")
    spec = load_scenario(cfg.scenario)
    cohort, truth = simulate_cohort(spec, cfg.seed)
    comments = ws.meta_lines()
    write_long_csv(cohort, ws.root / "observations.csv", comments)
    ws.record_file("observations.csv")
    if cohort.scalars is not None:
        write_scalar_csv(cohort.scalars, ws.root / "subjects.csv", comments)
        ws.record_file("subjects.csv")
    write_schema_json(ingest_schema_for(spec), ws.root / "schema.json")
    ws.record_file("schema.json")
    ws.write_json("truth.json", truth.to_json_dict())
    return ws.finish()


def cmd_ingest(cfg: RunConfig) -> int:
    ws = Workspace(cfg, "ingest")
    cohort = _load_cohort(cfg, qc=False)
    comments = ws.meta_lines()
    write_long_csv(cohort, ws.root / "observations.csv", comments)
    ws.record_file("observations.csv")
    if cohort.scalars is not None:
        write_scalar_csv(cohort.scalars, ws.root / "subjects.csv", comments)
        ws.record_file("subjects.csv")
    rows: list[tuple] = [("source", "line", "reason", "row")]
    rows += [(r.source, r.line_no, r.reason, "|".join(r.row))
             for r in cohort.rejects]
    ws.write_csv("rejects.csv", rows)
    ws.write_json("ingest_summary.json", {
        "variables": {name: s.n_subjects
                      for name, s in cohort.samples.items()},
        "observations": {name: s.total_observations
                         for name, s in cohort.samples.items()},
        "rejected_rows": len(cohort.rejects),
        "scalar_subjects": (0 if cohort.scalars is None
                            else len(cohort.scalars.records)),
    })
    return ws.finish()


def cmd_qc(cfg: RunConfig) -> int:
    ws = Workspace(cfg, "qc")
    cohort = _load_cohort(cfg, qc=True)
    comments = ws.meta_lines()
    write_long_csv(cohort, ws.root / "observations.csv", comments)
    ws.record_file("observations.csv")
    if cohort.scalars is not None:
        write_scalar_csv(cohort.scalars, ws.root / "subjects.csv", comments)
        ws.record_file("subjects.csv")
    rep = cohort.qc_report
    ws.write_json("qc_report.json", {
        "excluded_by_rule": rep.to_json_dict(),
        "excluded_subjects": rep.excluded_subjects,
        "tie_records_dropped": rep.tie_records_dropped,
        "remaining_subjects": {name: s.n_subjects
                               for name, s in cohort.samples.items()},
    })
    return ws.finish()


def cmd_fpca(cfg: RunConfig) -> int:
    _require(cfg, "variable")
    ws = Workspace(cfg, "fpca")
    cohort = _load_cohort(cfg)
    model = _fit_variable(cfg, cohort, cfg.variable)
    prefix = _safe_name(cfg.variable)
    _emit_fpca(ws, model, prefix)
    _emit_design(ws, cfg, cohort, cfg.variable)
    if cohort.qc_report is not None:
        ws.write_json("qc_report.json",
                      {"excluded_by_rule": cohort.qc_report.to_json_dict()})
    return ws.finish()


def cmd_crosscov(cfg: RunConfig) -> int:
    if len(cfg.variables) != 2:
        raise ConfigError("--variables must name exactly two variables")
    ws = Workspace(cfg, "crosscov")
    cohort = _load_cohort(cfg)
    a, b = cfg.variables
    cc = crosscov_ff(_pick_sample(cohort, a), _pick_sample(cohort, b),
                     cfg.bw_cross,
                     mean_bandwidth=(None if cfg.bw_mean == "cv"
                                     else float(cfg.bw_mean)),
                     grid_size=cfg.grid_size)
    name = f"crosscov_{_safe_name(a)}_{_safe_name(b)}"
    ws.write_json(f"{name}.json", cc.to_json_dict())
    rows: list[tuple] = [("s", "t", "value")]
    rows += list(cc.csv_rows())
    ws.write_csv(f"{name}.csv", rows)
    return ws.finish()


def cmd_corr(cfg: RunConfig) -> int:
    want_surface = len(cfg.variables) == 2
    want_traj = bool(cfg.variable and cfg.outcome_field)
    if not want_surface and not want_traj:
        raise ConfigError("corr needs --variables A,B and/or "
                          "--variable plus --outcome-field")
    ws = Workspace(cfg, "corr")
    cohort = _load_cohort(cfg)
    # fit everything before writing anything
    surface = traj = None
    if want_surface:
        a, b = cfg.variables
        ma = _fit_variable(cfg, cohort, a)
        mb = _fit_variable(cfg, cohort, b)
        cc = crosscov_ff(_pick_sample(cohort, a), _pick_sample(cohort, b),
                         cfg.bw_cross, mean1=ma.moments.mean,
                         mean2=mb.moments.mean, grid_size=cfg.grid_size)
        surface = correlation_surface(cc, ma.fitted_variance(),
                                      mb.fitted_variance())
    if want_traj:
        model = _fit_variable(cfg, cohort, cfg.variable)
        zmap = _numeric_field_map(cohort, cfg.outcome_field)
        sample = _pick_sample(cohort, cfg.variable)
        cxz = crosscov_fs(sample, zmap, cfg.bw_cross,
                          mean=model.moments.mean,
                          grid=model.grid)
        plan = None
        if cfg.k_boot > 0:
            plan = FsBootstrapPlan(sample, zmap, k_boot=cfg.k_boot,
                                   seed=cfg.seed, bandwidth=cfg.bw_cross,
                                   threads=cfg.threads)
        traj = correlation_trajectory_fs(cxz, model.fitted_variance(),
                                         cxz.meta["scalar_variance"], plan)
    if surface is not None:
        a, b = cfg.variables
        rows: list[tuple] = [("s", "t", "correlation", "clamped")]
        rows += list(surface.csv_rows())
        ws.write_csv(f"corr_{_safe_name(a)}_{_safe_name(b)}.csv", rows)
    if traj is not None:
        _emit_trajectory(
            ws, traj,
            f"corr_traj_{_safe_name(cfg.variable)}_"
            f"{_safe_name(cfg.outcome_field)}.csv")
    return ws.finish()


def cmd_fcr(cfg: RunConfig) -> int:
    _require(cfg, "response_var")
    if not cfg.variables and not cfg.scalar_covariates:
        raise ConfigError("fcr needs at least one covariate "
                          "(--variables / --scalar-covariates)")
    ws = Workspace(cfg, "fcr")
    cohort = _load_cohort(cfg)
    spec = _build_fcr_spec(cfg, cohort)
    fit = solve_fcr(spec)
    if cfg.k_boot > 0:
        fit = fcr_bootstrap(spec, cfg.k_boot, cfg.seed,
                            threads=cfg.threads, fit=fit)
    ws.write_json("fcr.json", fit.to_json_dict())
    ws.write_csv("fcr.csv", fit.csv_rows())
    return ws.finish()


def _build_fcr_spec(cfg: RunConfig, cohort: Cohort) -> FcrSpec:
    functional = [_pick_sample(cohort, name) for name in cfg.variables]
    scalars = {name: _numeric_field_map(cohort, name)
               for name in cfg.scalar_covariates}
    resp_sample = None
    resp_scalar = None
    if cfg.response_var in cohort.samples:
        resp_sample = _pick_sample(cohort, cfg.response_var)
    else:
        resp_scalar = _numeric_field_map(cohort, cfg.response_var)
    return FcrSpec(
        functional=functional, scalars=scalars,
        response_sample=resp_sample, response_scalar=resp_scalar,
        response_name=cfg.response_var, grid_size=cfg.grid_size,
        bandwidth_mean=(1.0 if cfg.bw_mean == "cv" else float(cfg.bw_mean)),
        bandwidth_cov=(1.0 if cfg.bw_cov == "cv" else float(cfg.bw_cov)),
        bandwidth_cross=cfg.bw_cross, standardize=cfg.standardize,
    )


def cmd_residualize(cfg: RunConfig) -> int:
    _require(cfg, "outcome_field")
    ws = Workspace(cfg, "residualize")
    cohort = _load_cohort(cfg)
    fit = _residualize_cohort(cfg, cohort)
    ws.write_json("residualization.json", fit.to_json_dict())
    rows: list[tuple] = [("subject_id", "residual")]
    rows += sorted(fit.residuals.items())
    ws.write_csv("residuals.csv", rows)
    return ws.finish()


def _residualize_cohort(cfg: RunConfig, cohort: Cohort):
    if cohort.scalars is None:
        raise DataError("residualization needs the scalar covariate table")
    outcome = _numeric_field_map(cohort, cfg.outcome_field)
    covs = cohort.scalars
    design_covs = dataclasses.replace(
        covs,
        numeric_fields=[f for f in covs.numeric_fields
                        if f != cfg.outcome_field],
    )
    return residualize(outcome, design_covs)


def cmd_score_lm(cfg: RunConfig) -> int:
    _require(cfg, "scores", "response")
    ws = Workspace(cfg, "score-lm")
    response, columns = _load_scores_and_response(cfg)
    interactions = [tuple(p.split(":", 1)) for p in cfg.interactions]
    if cfg.k_boot > 0:
        fit = bootstrap_score_lm(response, columns, interactions,
                                 cfg.k_boot, cfg.seed, threads=cfg.threads)
    else:
        fit = fit_score_lm(response, columns, interactions)
    _emit_score_lm(ws, fit, "score_lm")
    return ws.finish()


def _load_scores_and_response(cfg: RunConfig
                              ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    sheader, srows = _read_table(cfg.scores)
    _, rrows = _read_table(cfg.response)
    if cfg.score_columns:
        cols = cfg.score_columns
        missing = [c for c in cols if c not in sheader]
        if missing:
            raise DataError(f"score columns not found: {missing}")
    else:
        cols = [c for c in sheader if c.endswith("_norm")]
        if not cols:
            raise DataError("no *_norm columns found; use --score-columns")
    rcol = cfg.response_column
    rmap: dict[str, float] = {}
    for row in rrows:
        if rcol not in row:
            raise DataError(f"response column {rcol!r} missing")
        rmap[row["subject_id"]] = float(row[rcol])
    ys: list[float] = []
    data: dict[str, list[float]] = {c: [] for c in cols}
    for row in srows:
        sid = row.get("subject_id")
        if sid not in rmap:
            continue
        vals = [float(row[c]) for c in cols]
        if not all(np.isfinite(v) for v in vals):
            continue
        for c, v in zip(cols, vals):
            data[c].append(v)
        ys.append(rmap[sid])
    if not ys:
        raise DataError("no subjects shared between scores and response")
    return np.array(ys), {c: np.array(v) for c, v in data.items()}


def cmd_bootstrap(cfg: RunConfig) -> int:
    _require(cfg, "scores", "response")
    if cfg.k_boot <= 0:
        raise ConfigError("bootstrap needs --k-boot > 0")
    ws = Workspace(cfg, "bootstrap")
    response, columns = _load_scores_and_response(cfg)
    rows: list[tuple] = [("column", "r", "lo50", "hi50", "lo95", "hi95",
                          "n", "k_boot")]
    for name, col in columns.items():
        res = pearson_scores_vs_outcome(col, response, cfg.k_boot, cfg.seed,
                                        threads=cfg.threads)
        lo50, hi50 = res.ci(50)
        lo95, hi95 = res.ci(95)
        rows.append((name, res.r, lo50, hi50, lo95, hi95, res.n, res.k_boot))
    ws.write_csv("correlations.csv", rows)
    return ws.finish()


def cmd_designplot(cfg: RunConfig) -> int:
    _require(cfg, "variable")
    ws = Workspace(cfg, "designplot")
    cohort = _load_cohort(cfg)
    _emit_design(ws, cfg, cohort, cfg.variable)
    return ws.finish()


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def cmd_pipeline(cfg: RunConfig) -> int:
    ws = Workspace(cfg, "pipeline")
    state: dict = {}

    def stage_data():
        if cfg.scenario:
            if cfg.seed is None:
                raise ConfigError("--seed is required with --scenario")
            spec = load_scenario(cfg.scenario)
            cohort, truth = simulate_cohort(spec, cfg.seed)
            comments = ws.meta_lines()
            write_long_csv(cohort, ws.root / "observations.csv", comments)
            ws.record_file("observations.csv")
            if cohort.scalars is not None:
                write_scalar_csv(cohort.scalars, ws.root / "subjects.csv",
                                 comments)
                ws.record_file("subjects.csv")
            write_schema_json(ingest_schema_for(spec),
                              ws.root / "schema.json")
            ws.record_file("schema.json")
            ws.write_json("truth.json", truth.to_json_dict())
            if cfg.outcome_field is None and spec.outcome is not None:
                cfg.outcome_field = spec.outcome.name
            state["cohort"] = qc_filter(cohort, _qc_policy(cfg))
        else:
            state["cohort"] = _load_cohort(cfg)
        rep = state["cohort"].qc_report
        if rep is not None:
            ws.write_json("qc_report.json",
                          {"excluded_by_rule": rep.to_json_dict(),
                           "tie_records_dropped": rep.tie_records_dropped})

    def stage_residualize():
        cohort = state["cohort"]
        if cfg.outcome_field is None:
            raise ConfigError("--outcome-field is required (or a scenario "
                              "with a declared outcome)")
        fit = _residualize_cohort(cfg, cohort)
        state["residuals"] = fit.residuals
        ws.write_json("residualization.json", fit.to_json_dict())
        rows: list[tuple] = [("subject_id", "residual")]
        rows += sorted(fit.residuals.items())
        ws.write_csv("residuals.csv", rows)

    def stage_fpca():
        cohort = state["cohort"]
        names = cfg.variables or cohort.variable_names
        models: dict[str, FpcaModel] = {}
        for name in names:
            model = _fit_variable(cfg, cohort, name)
            models[name] = model
            prefix = _safe_name(name)
            _emit_fpca(ws, model, prefix)
            _emit_design(ws, cfg, cohort, name)
        state["models"] = models

    def _norm_columns(models: dict[str, FpcaModel]
                      ) -> tuple[list[str], dict[str, dict[str, float]]]:
        cols: dict[str, dict[str, float]] = {}
        for vname, model in models.items():
            sds = model.score_sds()
            for k in range(model.eigen.n_components):
                cname = f"{vname}.pc{k + 1}"
                col: dict[str, float] = {}
                for i, sid in enumerate(model.scores.ids):
                    v = model.scores.scores[i, k]
                    if np.isfinite(v):
                        col[sid] = float(v / sds[k])
                cols[cname] = col
        return list(cols), cols

    def _aligned_rows(col_names, cols, residuals):
        ids = [sid for sid in residuals
               if all(sid in cols[c] for c in col_names)]
        ids.sort()
        if not ids:
            raise DataError("no subject has residual and all scores")
        y = np.array([residuals[sid] for sid in ids])
        mats = {c: np.array([cols[c][sid] for sid in ids])
                for c in col_names}
        return y, mats

    def stage_score_lm():
        models = state["models"]
        residuals = state["residuals"]
        _, cols = _norm_columns(models)
        k = cfg.k_boot or 0

        first = next(iter(models))
        singles = [c for c in cols if c.startswith(f"{first}.")][:2]
        inter = [(singles[0], singles[1])] if len(singles) == 2 else []
        y, mats = _aligned_rows(singles, cols, residuals)
        fit = (bootstrap_score_lm(y, mats, inter, k, cfg.seed,
                                  threads=cfg.threads)
               if k > 0 else fit_score_lm(y, mats, inter))
        _emit_score_lm(ws, fit, "score_lm_single")

        if len(models) > 1:
            joint_cols: list[str] = []
            joint_inter: list[tuple[str, str]] = []
            for vname, model in models.items():
                owned = [c for c in cols if c.startswith(f"{vname}.")][:2]
                joint_cols += owned
                if len(owned) == 2:
                    joint_inter.append((owned[0], owned[1]))
            y2, mats2 = _aligned_rows(joint_cols, cols, residuals)
            fit2 = (bootstrap_score_lm(y2, mats2, joint_inter, k, cfg.seed,
                                       threads=cfg.threads)
                    if k > 0 else fit_score_lm(y2, mats2, joint_inter))
            _emit_score_lm(ws, fit2, "score_lm_joint")

    def stage_correlations():
        models = state["models"]
        residuals = state["residuals"]
        cohort = state["cohort"]
        _, cols = _norm_columns(models)
        k = cfg.k_boot or 0

        rows: list[tuple] = [("column", "r", "lo50", "hi50", "lo95", "hi95",
                              "n", "k_boot")]
        for cname in cols:
            ids = sorted(sid for sid in cols[cname] if sid in residuals)
            if len(ids) < 3:
                continue
            x = np.array([cols[cname][sid] for sid in ids])
            y = np.array([residuals[sid] for sid in ids])
            res = pearson_scores_vs_outcome(x, y, max(k, 1), cfg.seed or 0,
                                            threads=cfg.threads)
            lo50, hi50 = res.ci(50)
            lo95, hi95 = res.ci(95)
            rows.append((cname, res.r, lo50, hi50, lo95, hi95, res.n,
                         res.k_boot))
        ws.write_csv("correlations.csv", rows)

        for vname, model in models.items():
            sample = cohort.samples[vname]
            zmap = {sid: residuals[sid] for sid in sample.subject_ids
                    if sid in residuals}
            if len(zmap) < 3:
                continue
            cxz = crosscov_fs(sample, zmap, cfg.bw_cross,
                              mean=model.moments.mean, grid=model.grid)
            plan = None
            if k > 0:
                plan = FsBootstrapPlan(sample, zmap, k_boot=k, seed=cfg.seed,
                                       bandwidth=cfg.bw_cross,
                                       threads=cfg.threads)
            traj = correlation_trajectory_fs(
                cxz, model.fitted_variance(), cxz.meta["scalar_variance"],
                plan)
            _emit_trajectory(ws, traj,
                             f"corr_traj_{_safe_name(vname)}.csv")

        names = list(models)
        if len(names) >= 2:
            a, b = names[0], names[1]
            cc = crosscov_ff(cohort.samples[a], cohort.samples[b],
                             cfg.bw_cross, mean1=models[a].moments.mean,
                             mean2=models[b].moments.mean,
                             grid_size=cfg.grid_size)
            cs = correlation_surface(cc, models[a].fitted_variance(),
                                     models[b].fitted_variance())
            rows2: list[tuple] = [("s", "t", "correlation", "clamped")]
            rows2 += list(cs.csv_rows())
            ws.write_csv(f"corr_{_safe_name(a)}_{_safe_name(b)}.csv", rows2)

    def stage_fcr():
        cohort = state["cohort"]
        residuals = state["residuals"]
        names = cfg.variables or cohort.variable_names
        spec = FcrSpec(
            functional=[cohort.samples[n] for n in names],
            scalars={},
            response_scalar=dict(residuals),
            response_name="residual",
            grid_size=cfg.grid_size,
            bandwidth_mean=(1.0 if cfg.bw_mean == "cv"
                            else float(cfg.bw_mean)),
            bandwidth_cov=(1.0 if cfg.bw_cov == "cv"
                           else float(cfg.bw_cov)),
            bandwidth_cross=cfg.bw_cross,
            standardize=cfg.standardize,
        )
        fit = solve_fcr(spec)
        if cfg.k_boot:
            fit = fcr_bootstrap(spec, cfg.k_boot, cfg.seed,
                                threads=cfg.threads, fit=fit)
        ws.write_json("fcr.json", fit.to_json_dict())
        ws.write_csv("fcr.csv", fit.csv_rows())

    ok = ws.run_stage("data", stage_data)
    if not ok:
        return ws.finish()
    have_resid = ws.run_stage("residualize", stage_residualize)
    have_fpca = ws.run_stage("fpca", stage_fpca)
    for name, fn in (("score_lm", stage_score_lm),
                     ("correlations", stage_correlations),
                     ("fcr", stage_fcr)):
        if have_resid and have_fpca:
            ws.run_stage(name, fn)
        else:
            ws.stages[name] = {"status": "skipped",
                               "error": "upstream stage failed"}
    return ws.finish()


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_io(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="long-format observations CSV")
    p.add_argument("--scalars", help="per-subject covariate CSV")
    p.add_argument("--schema", help="schema JSON sidecar")


def _add_qc(p: argparse.ArgumentParser) -> None:
    p.add_argument("--qc-schedule", type=_parse_floats, dest="qc_schedule",
                   help="nominal visit times, comma separated")
    p.add_argument("--qc-tolerance", type=float, dest="qc_tolerance")
    p.add_argument("--qc-max-missed", type=int, dest="qc_max_missed")
    p.add_argument("--qc-max-increment", action="append", default=None,
                   dest="qc_max_increment", metavar="VAR=RATE")
    p.add_argument("--qc-monotonic", action="store_const", const=True,
                   dest="qc_monotonic")
    p.add_argument("--keep-first-duplicates", action="store_const",
                   const=True, dest="keep_first_duplicates")


def _add_est(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid-size", type=int, dest="grid_size")
    p.add_argument("--bw-mean", type=_parse_bw, dest="bw_mean",
                   help="mean bandwidth (number or 'cv')")
    p.add_argument("--bw-cov", type=_parse_bw, dest="bw_cov",
                   help="covariance bandwidth (number or 'cv')")
    p.add_argument("--bw-cross", type=float, dest="bw_cross")
    p.add_argument("--bw-sigma2", type=float, dest="bw_sigma2")
    p.add_argument("--fve", type=float)
    p.add_argument("--max-k", type=int, dest="max_k")
    p.add_argument("--ridge", type=_parse_ridge)
    p.add_argument("--standardize", action="store_const", const=True)


def _add_boot(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k-boot", type=int, dest="k_boot")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="sparsefda",
        description="Sparse functional data analysis pipeline",
    )
    top.add_argument("--version", action="version",
                     version=f"sparsefda {__version__}")
    sub = top.add_subparsers(dest="command", required=True)

    def new(name: str, help_text: str, func) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML/JSON config file "
                                        "(flags override file values)")
        p.add_argument("--out", dest="out_dir", help="output directory")
        p.set_defaults(func=func)
        return p

    p = new("simulate", "draw a synthetic cohort from a scenario file",
            cmd_simulate)
    p.add_argument("--scenario")
    p.add_argument("--seed", type=int)

    p = new("ingest", "read, validate and normalize the input tables",
            cmd_ingest)
    _add_io(p)
    p.add_argument("--keep-first-duplicates", action="store_const",
                   const=True, dest="keep_first_duplicates")

    p = new("qc", "apply exclusion rules and write the cleaned cohort",
            cmd_qc)
    _add_io(p)
    _add_qc(p)

    p = new("fpca", "moments, eigenpairs and scores for one variable",
            cmd_fpca)
    _add_io(p)
    _add_qc(p)
    _add_est(p)
    p.add_argument("--variable")
    p.add_argument("--seed", type=int)
    p.add_argument("--bin-width", type=float, dest="bin_width")

    p = new("crosscov", "cross-covariance surface of two variables",
            cmd_crosscov)
    _add_io(p)
    _add_qc(p)
    _add_est(p)
    p.add_argument("--variables", type=_parse_list)

    p = new("corr", "correlation surface and/or trajectory", cmd_corr)
    _add_io(p)
    _add_qc(p)
    _add_est(p)
    _add_boot(p)
    p.add_argument("--variables", type=_parse_list)
    p.add_argument("--variable")
    p.add_argument("--outcome-field", dest="outcome_field")

    p = new("fcr", "functional concurrent regression", cmd_fcr)
    _add_io(p)
    _add_qc(p)
    _add_est(p)
    _add_boot(p)
    p.add_argument("--variables", type=_parse_list,
                   help="functional covariates")
    p.add_argument("--scalar-covariates", type=_parse_list,
                   dest="scalar_covariates")
    p.add_argument("--response", dest="response_var",
                   help="functional variable or numeric scalar field")

    p = new("residualize", "mixed-model residualization of the outcome",
            cmd_residualize)
    _add_io(p)
    _add_qc(p)
    p.add_argument("--outcome-field", dest="outcome_field")

    p = new("score-lm", "linear model of an outcome on component scores",
            cmd_score_lm)
    p.add_argument("--scores", help="scores CSV (from fpca)")
    p.add_argument("--response", help="response CSV (from residualize)")
    p.add_argument("--response-column", dest="response_column")
    p.add_argument("--score-columns", type=_parse_list,
                   dest="score_columns")
    p.add_argument("--interactions", type=_parse_list,
                   help="colon pairs, e.g. pc1_norm:pc2_norm")
    _add_boot(p)

    p = new("bootstrap", "bootstrap Pearson correlation table",
            cmd_bootstrap)
    p.add_argument("--scores")
    p.add_argument("--response")
    p.add_argument("--response-column", dest="response_column")
    p.add_argument("--score-columns", type=_parse_list,
                   dest="score_columns")
    _add_boot(p)

    p = new("designplot", "co-observation count matrix (plot-ready CSV)",
            cmd_designplot)
    _add_io(p)
    _add_qc(p)
    p.add_argument("--variable")
    p.add_argument("--bin-width", type=float, dest="bin_width")

    p = new("pipeline", "full study pipeline on real or simulated data",
            cmd_pipeline)
    _add_io(p)
    _add_qc(p)
    _add_est(p)
    _add_boot(p)
    p.add_argument("--scenario")
    p.add_argument("--variables", type=_parse_list)
    p.add_argument("--outcome-field", dest="outcome_field")

    return top


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
        return int(args.func(cfg))
    except SparseFdaError as exc:
        print(f"sparsefda: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except OSError as exc:
        print(f"sparsefda: i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
