"""Cohort data structures, CSV ingestion, and quality control.

Longitudinal measurements arrive as a long CSV (``subject_id, variable,
time, value``), scalar covariates as a wide CSV keyed by subject, and a
sidecar JSON schema declares the study window, which scalar columns are
numeric, the level set and baseline of every categorical column, and the
clustering column.  Ingestion never silently drops data: rows that cannot
be used are collected in a rejects list with a reason.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    AlignmentError,
    ConfigError,
    DataError,
    DegenerateVarianceError,
    DuplicateRecordError,
    SchemaError,
)
from .kernelsmooth import Curve

LONG_COLUMNS = ("subject_id", "variable", "time", "value")


@dataclass(frozen=True)
class Observation:
    """One longitudinal measurement of one variable on one subject."""

    subject_id: str
    time: float
    value: float


@dataclass(frozen=True)
class RejectedRow:
    """An input row that was set aside instead of silently dropped."""

    source: str        # "long" or "scalar"
    line_no: int
    row: tuple[str, ...]
    reason: str


@dataclass
class SparseFunctionalSample:
    """Sparse, irregular observations of one functional variable.

    ``data`` maps subject id to a pair of equal-length float arrays
    ``(times, values)`` kept in input order; after QC the times of every
    subject are strictly increasing.
    """

    variable_name: str
    window: tuple[float, float]
    data: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def n_subjects(self) -> int:
        return len(self.data)

    @property
    def subject_ids(self) -> list[str]:
        return list(self.data)

    @property
    def total_observations(self) -> int:
        return sum(t.size for t, _ in self.data.values())

    def counts(self) -> np.ndarray:
        return np.array([t.size for t, _ in self.data.values()], dtype=int)

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        """All observations concatenated as ``(times, values)``."""
        if not self.data:
            return np.empty(0), np.empty(0)
        t = np.concatenate([v[0] for v in self.data.values()])
        y = np.concatenate([v[1] for v in self.data.values()])
        return t, y

    def is_time_ordered(self) -> bool:
        return all(
            t.size < 2 or bool(np.all(np.diff(t) > 0))
            for t, _ in self.data.values()
        )

    def subset(self, ids: Iterable[str]) -> "SparseFunctionalSample":
        keep = [i for i in ids if i in self.data]
        return SparseFunctionalSample(
            self.variable_name, self.window, {i: self.data[i] for i in keep}
        )

    def resample(self, ids: Sequence[str]) -> "SparseFunctionalSample":
        """Bootstrap view: duplicated ids get distinct synthetic names."""
        out: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        seen: dict[str, int] = {}
        for sid in ids:
            k = seen.get(sid, 0)
            seen[sid] = k + 1
            new_id = sid if k == 0 else f"{sid}#{k}"
            out[new_id] = self.data[sid]
        return SparseFunctionalSample(self.variable_name, self.window, out)

    @classmethod
    def from_observations(cls, variable_name, window,
                          observations: Iterable[Observation]):
        groups: dict[str, tuple[list[float], list[float]]] = {}
        for ob in observations:
            ts, ys = groups.setdefault(ob.subject_id, ([], []))
            ts.append(ob.time)
            ys.append(ob.value)
        data = {
            sid: (np.asarray(ts, dtype=float), np.asarray(ys, dtype=float))
            for sid, (ts, ys) in groups.items()
        }
        return cls(variable_name, tuple(window), data)


@dataclass(frozen=True)
class CategoricalSpec:
    """Declared level set and baseline level of a categorical column."""

    levels: tuple[str, ...]
    baseline: str

    def __post_init__(self):
        if len(set(self.levels)) != len(self.levels):
            raise SchemaError(f"duplicate levels in {self.levels}")
        if self.baseline not in self.levels:
            raise SchemaError(
                f"baseline {self.baseline!r} not among levels {self.levels}"
            )


@dataclass
class ScalarCovariates:
    """Per-subject scalar covariates with declared column typing."""

    numeric_fields: list[str]
    categorical_fields: dict[str, CategoricalSpec]
    cluster_field: str | None
    records: dict[str, dict[str, object]] = field(default_factory=dict)

    @property
    def subject_ids(self) -> list[str]:
        return list(self.records)

    def fields(self) -> list[str]:
        out = list(self.numeric_fields) + list(self.categorical_fields)
        if self.cluster_field:
            out.append(self.cluster_field)
        return out

    def is_complete(self, sid: str) -> bool:
        rec = self.records.get(sid)
        if rec is None:
            return False
        return all(rec.get(f) is not None for f in self.fields())

    def numeric_array(self, name: str, ids: Sequence[str]) -> np.ndarray:
        if name not in self.numeric_fields:
            raise SchemaError(f"{name!r} is not a declared numeric field")
        return np.array([float(self.records[i][name]) for i in ids])

    def categorical_values(self, name: str, ids: Sequence[str]) -> list[str]:
        if name not in self.categorical_fields:
            raise SchemaError(f"{name!r} is not a declared categorical field")
        return [str(self.records[i][name]) for i in ids]

    def cluster_labels(self, ids: Sequence[str]) -> list[str]:
        if not self.cluster_field:
            raise SchemaError("no cluster field declared")
        return [str(self.records[i][self.cluster_field]) for i in ids]

    def subset(self, ids: Iterable[str]) -> "ScalarCovariates":
        keep = {i: self.records[i] for i in ids if i in self.records}
        return ScalarCovariates(list(self.numeric_fields),
                                dict(self.categorical_fields),
                                self.cluster_field, keep)

    def resample(self, ids: Sequence[str]) -> "ScalarCovariates":
        out: dict[str, dict[str, object]] = {}
        seen: dict[str, int] = {}
        for sid in ids:
            k = seen.get(sid, 0)
            seen[sid] = k + 1
            new_id = sid if k == 0 else f"{sid}#{k}"
            out[new_id] = self.records[sid]
        return ScalarCovariates(list(self.numeric_fields),
                                dict(self.categorical_fields),
                                self.cluster_field, out)


@dataclass
class QcReport:
    """Per-rule exclusion counts plus the excluded subject ids."""

    excluded_by_rule: dict[str, int] = field(default_factory=dict)
    excluded_subjects: dict[str, list[str]] = field(default_factory=dict)
    tie_records_dropped: int = 0

    def total_excluded(self) -> int:
        return sum(self.excluded_by_rule.values())

    def to_json_dict(self) -> dict[str, int]:
        return dict(self.excluded_by_rule)


@dataclass
class Cohort:
    """Functional samples plus scalar covariates for one study."""

    samples: dict[str, SparseFunctionalSample]
    scalars: ScalarCovariates | None = None
    window: tuple[float, float] | None = None
    qc_report: QcReport | None = None
    rejects: list[RejectedRow] = field(default_factory=list)

    def __post_init__(self):
        if self.window is None and self.samples:
            self.window = next(iter(self.samples.values())).window

    @property
    def variable_names(self) -> list[str]:
        return list(self.samples)

    def subject_union(self) -> list[str]:
        seen: dict[str, None] = {}
        for s in self.samples.values():
            for sid in s.data:
                seen.setdefault(sid)
        return list(seen)

    def aligned_subjects(self) -> list[str]:
        """Subjects present in every functional sample."""
        if not self.samples:
            return []
        ids = None
        for s in self.samples.values():
            cur = set(s.data)
            ids = cur if ids is None else ids & cur
        first = next(iter(self.samples.values()))
        return [sid for sid in first.data if sid in ids]

    def is_aligned(self) -> bool:
        sets = [set(s.data) for s in self.samples.values()]
        if sets and any(st != sets[0] for st in sets):
            return False
        if self.scalars is not None:
            return all(self.scalars.is_complete(sid) for sid in self.subject_union())
        return True


@dataclass(frozen=True)
class QcPolicy:
    """Exclusion rules applied jointly across a cohort's variables.

    ``schedule`` lists nominal visit times; a visit counts as attended when
    any variable has an observation within ``visit_tolerance`` of it, and a
    subject missing ``max_missed_visits`` or more visits is excluded.
    ``max_increment_per_month`` maps variable name to the largest plausible
    rate of change; a faster consecutive change excludes the subject.
    Value monotonicity is never required unless ``enforce_monotonic`` is
    explicitly switched on.
    """

    schedule: tuple[float, ...] | None = None
    visit_tolerance: float = 0.5
    max_missed_visits: int = 2
    max_increment_per_month: Mapping[str, float] = field(default_factory=dict)
    enforce_monotonic: bool = False

    def __post_init__(self):
        if self.visit_tolerance <= 0:
            raise ConfigError("visit_tolerance must be positive")
        if self.max_missed_visits < 1:
            raise ConfigError("max_missed_visits must be at least 1")
        for k, v in self.max_increment_per_month.items():
            if not v > 0:
                raise ConfigError(f"max increment for {k!r} must be positive")


# ---------------------------------------------------------------------------
# Schema sidecar
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IngestSchema:
    """Declared structure of the input tables."""

    window: tuple[float, float]
    numeric: tuple[str, ...] = ()
    categorical: Mapping[str, CategoricalSpec] = field(default_factory=dict)
    cluster: str | None = None
    variables: tuple[str, ...] | None = None

    def __post_init__(self):
        lo, hi = self.window
        if not hi > lo:
            raise SchemaError(f"degenerate window {self.window!r}")

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "IngestSchema":
        try:
            lo, hi = d["window"]
        except (KeyError, TypeError, ValueError):
            raise SchemaError("schema must declare 'window': [t_min, t_max]")
        if not float(hi) > float(lo):
            raise SchemaError(f"degenerate window {d['window']!r}")
        cats = {}
        for name, spec in dict(d.get("categorical", {})).items():
            cats[name] = CategoricalSpec(
                tuple(str(v) for v in spec["levels"]), str(spec["baseline"])
            )
        variables = d.get("variables")
        return cls(
            window=(float(lo), float(hi)),
            numeric=tuple(str(c) for c in d.get("numeric", ())),
            categorical=cats,
            cluster=d.get("cluster"),
            variables=tuple(variables) if variables is not None else None,
        )

    @classmethod
    def from_path(cls, path) -> "IngestSchema":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))

    def to_json_dict(self) -> dict:
        d: dict = {"window": [self.window[0], self.window[1]]}
        if self.numeric:
            d["numeric"] = list(self.numeric)
        if self.categorical:
            d["categorical"] = {
                k: {"levels": list(v.levels), "baseline": v.baseline}
                for k, v in self.categorical.items()
            }
        if self.cluster:
            d["cluster"] = self.cluster
        if self.variables is not None:
            d["variables"] = list(self.variables)
        return d


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def _open_rows(path_or_stream):
    if hasattr(path_or_stream, "read"):
        return csv.reader(path_or_stream), None
    fh = open(path_or_stream, "r", encoding="utf-8", newline="")
    return csv.reader(fh), fh


def _parse_float(text: str) -> float:
    v = float(text)
    if not math.isfinite(v):
        raise ValueError("non-finite")
    return v


def ingest_long_csv(long_path, schema: IngestSchema, scalar_path=None, *,
                    strict_duplicates: bool = True) -> Cohort:
    """Read a longitudinal long CSV (and optional scalar CSV) into a Cohort.

    The long table must have the header columns ``subject_id, variable,
    time, value``; comment lines starting with ``#`` are skipped.  Rows with
    unparseable or non-finite numerics, or times outside the declared
    window, go to ``cohort.rejects`` with a reason.  Exact duplicate
    ``(subject, variable, time)`` keys raise :class:`DuplicateRecordError`
    unless ``strict_duplicates=False``, in which case the first record wins
    and the rest are rejected.

    Parameters
    ----------
    long_path : path or readable
        Long-format measurements.
    schema : IngestSchema
        Declared window and scalar column typing.
    scalar_path : path or readable, optional
        Wide per-subject covariate table keyed by ``subject_id``.
    """
    lo, hi = schema.window
    rejects: list[RejectedRow] = []
    seen: set[tuple[str, str, float]] = set()
    dupes: list[tuple[str, str, float]] = []
    obs_by_var: dict[str, dict[str, tuple[list[float], list[float]]]] = {}

    reader, fh = _open_rows(long_path)
    try:
        header = None
        line_no = 0
        for row in reader:
            line_no += 1
            if row and row[0].startswith("#"):
                continue
            if header is None:
                header = [c.strip() for c in row]
                for col in LONG_COLUMNS:
                    if col not in header:
                        raise SchemaError(f"long table is missing column {col!r}")
                idx = {c: header.index(c) for c in LONG_COLUMNS}
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                rejects.append(RejectedRow("long", line_no, tuple(row),
                                           "wrong field count"))
                continue
            sid = row[idx["subject_id"]].strip()
            var = row[idx["variable"]].strip()
            if not sid or not var:
                rejects.append(RejectedRow("long", line_no, tuple(row),
                                           "empty subject or variable"))
                continue
            if schema.variables is not None and var not in schema.variables:
                rejects.append(RejectedRow("long", line_no, tuple(row),
                                           f"undeclared variable {var!r}"))
                continue
            try:
                t = _parse_float(row[idx["time"]])
            except ValueError:
                rejects.append(RejectedRow("long", line_no, tuple(row),
                                           "unparseable time"))
                continue
            try:
                y = _parse_float(row[idx["value"]])
            except ValueError:
                rejects.append(RejectedRow("long", line_no, tuple(row),
                                           "unparseable value"))
                continue
            if t < lo or t > hi:
                rejects.append(RejectedRow("long", line_no, tuple(row),
                                           "time outside declared window"))
                continue
            key = (sid, var, t)
            if key in seen:
                if strict_duplicates:
                    dupes.append(key)
                else:
                    rejects.append(RejectedRow("long", line_no, tuple(row),
                                               "duplicate record (first kept)"))
                continue
            seen.add(key)
            ts, ys = obs_by_var.setdefault(var, {}).setdefault(sid, ([], []))
            ts.append(t)
            ys.append(y)
        if header is None:
            raise SchemaError("long table is empty (no header row)")
    finally:
        if fh is not None:
            fh.close()
    if dupes:
        raise DuplicateRecordError(dupes)

    samples = {}
    for var, groups in obs_by_var.items():
        data = {
            sid: (np.asarray(ts, dtype=float), np.asarray(ys, dtype=float))
            for sid, (ts, ys) in groups.items()
        }
        samples[var] = SparseFunctionalSample(var, (lo, hi), data)

    scalars = None
    if scalar_path is not None:
        scalars = _ingest_scalar_csv(scalar_path, schema, rejects,
                                     strict_duplicates=strict_duplicates)

    return Cohort(samples=samples, scalars=scalars, window=(lo, hi),
                  rejects=rejects)


def _ingest_scalar_csv(path, schema: IngestSchema, rejects: list[RejectedRow],
                       *, strict_duplicates: bool) -> ScalarCovariates:
    reader, fh = _open_rows(path)
    declared = list(schema.numeric) + list(schema.categorical)
    if schema.cluster:
        declared.append(schema.cluster)
    records: dict[str, dict[str, object]] = {}
    dupes: list[tuple[str, str, float]] = []
    try:
        header = None
        line_no = 0
        for row in reader:
            line_no += 1
            if row and row[0].startswith("#"):
                continue
            if header is None:
                header = [c.strip() for c in row]
                if "subject_id" not in header:
                    raise SchemaError("scalar table is missing column 'subject_id'")
                for col in declared:
                    if col not in header:
                        raise SchemaError(f"scalar table is missing column {col!r}")
                idx = {c: header.index(c) for c in ["subject_id"] + declared}
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                rejects.append(RejectedRow("scalar", line_no, tuple(row),
                                           "wrong field count"))
                continue
            sid = row[idx["subject_id"]].strip()
            if not sid:
                rejects.append(RejectedRow("scalar", line_no, tuple(row),
                                           "empty subject id"))
                continue
            if sid in records:
                if strict_duplicates:
                    dupes.append((sid, "<scalar>", math.nan))
                else:
                    rejects.append(RejectedRow("scalar", line_no, tuple(row),
                                               "duplicate subject (first kept)"))
                continue
            rec: dict[str, object] = {}
            for col in schema.numeric:
                raw = row[idx[col]].strip()
                if not raw:
                    rec[col] = None
                    continue
                try:
                    rec[col] = _parse_float(raw)
                except ValueError:
                    rec[col] = None
                    rejects.append(RejectedRow("scalar", line_no, tuple(row),
                                               f"unparseable numeric {col!r}"))
            for col, spec in schema.categorical.items():
                raw = row[idx[col]].strip()
                if raw in spec.levels:
                    rec[col] = raw
                else:
                    rec[col] = None
                    if raw:
                        rejects.append(RejectedRow(
                            "scalar", line_no, tuple(row),
                            f"value {raw!r} outside levels of {col!r}"))
            if schema.cluster:
                raw = row[idx[schema.cluster]].strip()
                rec[schema.cluster] = raw if raw else None
            records[sid] = rec
        if header is None:
            raise SchemaError("scalar table is empty (no header row)")
    finally:
        if fh is not None:
            fh.close()
    if dupes:
        raise DuplicateRecordError(dupes)
    return ScalarCovariates(
        numeric_fields=list(schema.numeric),
        categorical_fields=dict(schema.categorical),
        cluster_field=schema.cluster,
        records=records,
    )


# ---------------------------------------------------------------------------
# Quality control
# ---------------------------------------------------------------------------

_QC_RULE_ORDER = ("missed_visits", "ordering", "increment", "monotonicity",
                  "missing_scalar", "missing_variable")


def qc_filter(cohort: Cohort, policy: QcPolicy) -> Cohort:
    """Apply exclusion rules jointly across variables; never mutates input.

    A subject violating any enabled rule is removed from every functional
    sample and from the scalar table; the returned cohort carries a
    :class:`QcReport` counting exclusions per rule (each subject counted
    once, under the first rule in a fixed evaluation order that it
    violates).  Exact duplicate times within a subject and variable are
    resolved first by keeping the first record.  The operation is
    idempotent: filtering a filtered cohort changes nothing.
    """
    report = QcReport(excluded_by_rule={}, excluded_subjects={})

    # Observation-level tie resolution (exact duplicate times keep-first).
    cleaned: dict[str, SparseFunctionalSample] = {}
    ties = 0
    for var, sample in cohort.samples.items():
        data: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for sid, (ts, ys) in sample.data.items():
            if ts.size >= 2:
                _, first_idx = np.unique(ts, return_index=True)
                if first_idx.size != ts.size:
                    keep = np.sort(first_idx)
                    ties += ts.size - first_idx.size
                    ts, ys = ts[keep], ys[keep]
            data[sid] = (ts, ys)
        cleaned[var] = SparseFunctionalSample(var, sample.window, data)
    report.tie_records_dropped = ties

    verdicts: dict[str, str] = {}

    def flag(sid: str, rule: str):
        cur = verdicts.get(sid)
        if cur is None or _QC_RULE_ORDER.index(rule) < _QC_RULE_ORDER.index(cur):
            verdicts[sid] = rule

    all_subjects = []
    seen_ids: set[str] = set()
    for sample in cleaned.values():
        for sid in sample.data:
            if sid not in seen_ids:
                seen_ids.add(sid)
                all_subjects.append(sid)

    # missed visits, judged on the union of times across variables
    if policy.schedule is not None:
        sched = np.asarray(policy.schedule, dtype=float)
        for sid in all_subjects:
            times = np.concatenate([
                s.data[sid][0] for s in cleaned.values() if sid in s.data
            ])
            missed = sum(
                1 for v in sched
                if not np.any(np.abs(times - v) <= policy.visit_tolerance)
            )
            if missed >= policy.max_missed_visits:
                flag(sid, "missed_visits")

    for var, sample in cleaned.items():
        limit = policy.max_increment_per_month.get(var)
        for sid, (ts, ys) in sample.data.items():
            if ts.size < 2:
                continue
            dt = np.diff(ts)
            dv = np.diff(ys)
            if np.any(dt <= 0):
                flag(sid, "ordering")
            if limit is not None:
                ok = dt > 0
                if np.any(np.abs(dv[ok]) / dt[ok] >= limit):
                    flag(sid, "increment")
            if policy.enforce_monotonic and np.any(dv[dt > 0] < 0):
                flag(sid, "monotonicity")

    if cohort.scalars is not None:
        for sid in all_subjects:
            if sid not in verdicts and not cohort.scalars.is_complete(sid):
                flag(sid, "missing_scalar")

    if len(cleaned) > 1:
        for sid in all_subjects:
            if sid not in verdicts and any(
                sid not in s.data for s in cleaned.values()
            ):
                flag(sid, "missing_variable")
    # scalar-only subjects (no functional record at all) are also dropped
    scalar_only: list[str] = []
    if cohort.scalars is not None:
        scalar_only = [sid for sid in cohort.scalars.records
                       if sid not in seen_ids]
        for sid in scalar_only:
            flag(sid, "missing_variable")

    for rule in _QC_RULE_ORDER:
        ids = sorted(s for s, r in verdicts.items() if r == rule)
        if ids:
            report.excluded_by_rule[rule] = len(ids)
            report.excluded_subjects[rule] = ids

    excluded = set(verdicts)
    samples = {
        var: SparseFunctionalSample(
            var, s.window,
            {sid: arrs for sid, arrs in s.data.items() if sid not in excluded},
        )
        for var, s in cleaned.items()
    }
    scalars = None
    if cohort.scalars is not None:
        keep = [sid for sid in cohort.scalars.records
                if sid not in excluded and sid in seen_ids]
        scalars = cohort.scalars.subset(keep)

    return Cohort(samples=samples, scalars=scalars, window=cohort.window,
                  qc_report=report, rejects=list(cohort.rejects))


# ---------------------------------------------------------------------------
# Design-count matrix
# ---------------------------------------------------------------------------


@dataclass
class DesignCountMatrix:
    """Co-observation counts over the pooled assessment-time grid.

    ``counts[j, k]`` is the number of subjects observed at both grid time
    ``j`` and grid time ``k``; each subject contributes a binary matrix, so
    repeated visits never inflate a cell.
    """

    grid: np.ndarray
    counts: np.ndarray
    n_subjects: int

    def csv_rows(self) -> Iterable[tuple[float, float, int]]:
        for j, s in enumerate(self.grid.tolist()):
            for k, t in enumerate(self.grid.tolist()):
                yield s, t, int(self.counts[j, k])


def design_count_matrix(sample: SparseFunctionalSample, *,
                        bin_width: float | None = None,
                        max_grid: int = 2000) -> DesignCountMatrix:
    """Count co-observed time pairs across subjects.

    With continuous visit times the pooled grid of unique times can be as
    large as the number of observations; pass ``bin_width`` to round times
    onto a coarser lattice first (counts then refer to bins).
    """
    pooled_t, _ = sample.pooled()
    if pooled_t.size == 0:
        raise DataError("cannot build a design-count matrix from an empty sample")

    def project(ts: np.ndarray) -> np.ndarray:
        if bin_width is None:
            return ts
        return np.round(ts / bin_width) * bin_width

    grid = np.unique(project(pooled_t))
    if grid.size > max_grid:
        raise ConfigError(
            f"pooled grid has {grid.size} unique times (max {max_grid}); "
            "pass bin_width to coarsen"
        )
    counts = np.zeros((grid.size, grid.size), dtype=np.int64)
    for ts, _ in sample.data.values():
        pos = np.unique(np.searchsorted(grid, project(ts)))
        counts[np.ix_(pos, pos)] += 1
    return DesignCountMatrix(grid=grid, counts=counts,
                             n_subjects=sample.n_subjects)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def normalize_sample(sample: SparseFunctionalSample, mean, variance=None
                     ) -> SparseFunctionalSample:
    """Center and scale observations by interpolated moment estimates.

    ``(y - mean(t)) / sqrt(var(t))`` with linear interpolation of both
    moment functions at the observation times.  Accepts either a fitted
    moments object (anything with ``mean`` and ``diag_curve()``) or an
    explicit pair of :class:`Curve` objects.

    Raises
    ------
    DegenerateVarianceError
        If the interpolated variance is not strictly positive at some
        observation time (the offending time is reported).
    """
    if variance is None:
        moments = mean
        mean_curve = moments.mean
        var_curve = moments.diag_curve()
    else:
        mean_curve, var_curve = mean, variance

    data: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for sid, (ts, ys) in sample.data.items():
        var_t = var_curve(ts)
        bad = ~(var_t > 0)
        if np.any(bad):
            t_bad = float(ts[np.argmax(bad)])
            raise DegenerateVarianceError(t_bad, float(var_t[np.argmax(bad)]))
        z = (ys - mean_curve(ts)) / np.sqrt(var_t)
        data[sid] = (ts.copy(), z)
    return SparseFunctionalSample(sample.variable_name, sample.window, data)


# ---------------------------------------------------------------------------
# Serialization back to the interchange CSV formats
# ---------------------------------------------------------------------------


def write_long_csv(cohort_or_samples, path, header_comments: Sequence[str] = ()):
    """Write functional samples in the long interchange format."""
    if isinstance(cohort_or_samples, Cohort):
        samples = cohort_or_samples.samples
    else:
        samples = dict(cohort_or_samples)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in header_comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(LONG_COLUMNS)
        for var, sample in samples.items():
            for sid, (ts, ys) in sample.data.items():
                for t, y in zip(ts.tolist(), ys.tolist()):
                    w.writerow([sid, var, repr(t), repr(y)])


def write_scalar_csv(scalars: ScalarCovariates, path,
                     header_comments: Sequence[str] = ()):
    """Write the wide per-subject covariate table."""
    cols = scalars.fields()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in header_comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["subject_id"] + cols)
        for sid, rec in scalars.records.items():
            row = [sid]
            for c in cols:
                v = rec.get(c)
                if v is None:
                    row.append("")
                elif isinstance(v, float):
                    row.append(repr(v))
                else:
                    row.append(str(v))
            w.writerow(row)


def write_schema_json(schema: IngestSchema, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
