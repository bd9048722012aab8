"""Scalar outcome models: residualization, score regressions, bootstraps.

The outcome is first residualized against baseline covariates with a
single cluster random intercept (restricted maximum likelihood, profiled
over the variance ratio), leaving per-subject residuals that downstream
score regressions treat as the response.  Score regressions are ordinary
least squares on normalized component scores with optional pairwise
interactions; inference comes from subject-resampling bootstrap
(percentile intervals, two-sided p-values, and a density curve per
coefficient).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg

from ._boot import (
    DEFAULT_LEVELS,
    percentile_bands,
    run_replicates,
    two_sided_pvalue,
)
from .datamodel import ScalarCovariates
from .errors import (
    ConfigError,
    DataError,
    DegenerateScalarError,
    RankDeficiencyError,
)
from .kernelsmooth import Curve, kde_1d

LAMBDA_RANGE = (1e-6, 1e3)
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


# ---------------------------------------------------------------------------
# Design matrices
# ---------------------------------------------------------------------------


@dataclass
class DesignMatrix:
    """Numeric fixed-effect design with named columns (intercept first)."""

    names: list[str]
    matrix: np.ndarray
    ids: list[str]

    @property
    def n(self) -> int:
        return int(self.matrix.shape[0])

    def column(self, name: str) -> np.ndarray:
        return self.matrix[:, self.names.index(name)]


def build_design(covariates: ScalarCovariates, ids: Sequence[str]
                 ) -> DesignMatrix:
    """Dummy-coded design from declared covariates for the given subjects.

    Numeric fields enter as-is; each categorical field contributes one
    indicator per non-baseline level, in declared level order.  Subjects
    with any missing field are refused.
    """
    ids = list(ids)
    for sid in ids:
        if sid not in covariates.records:
            raise DataError(f"subject {sid!r} has no scalar record")
        rec = covariates.records[sid]
        for f in covariates.numeric_fields:
            if rec.get(f) is None:
                raise DataError(f"subject {sid!r} missing numeric {f!r}")
        for f in covariates.categorical_fields:
            if rec.get(f) is None:
                raise DataError(f"subject {sid!r} missing categorical {f!r}")

    cols = [np.ones(len(ids))]
    names = ["intercept"]
    for f in covariates.numeric_fields:
        cols.append(covariates.numeric_array(f, ids))
        names.append(f)
    for f, spec in covariates.categorical_fields.items():
        vals = covariates.categorical_values(f, ids)
        for level in spec.levels:
            if level == spec.baseline:
                continue
            cols.append(np.array([1.0 if v == level else 0.0 for v in vals]))
            names.append(f"{f}={level}")
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate design column names: {names}")
    return DesignMatrix(names, np.column_stack(cols), ids)


def _check_full_rank(X: np.ndarray, names: Sequence[str]) -> None:
    """Pivoted-QR rank check; names the trailing (collinear) columns."""
    if X.shape[0] < X.shape[1]:
        raise RankDeficiencyError(list(names))
    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diagonal(R))
    tol = max(X.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.count_nonzero(diag > max(tol, 1e-12)))
    if rank < X.shape[1]:
        raise RankDeficiencyError([names[j] for j in piv[rank:]])


# ---------------------------------------------------------------------------
# Residualization: one cluster random intercept, profiled REML
# ---------------------------------------------------------------------------


@dataclass
class ResidualizationFit:
    """Mixed-model residualization of a scalar outcome.

    ``residuals`` are conditional: outcome minus fixed effects minus the
    predicted (shrunken) cluster effect, so cluster structure is removed
    before any downstream analysis.  ``omega2`` is the conditional
    explained-variation metric (1 - SSE_model / SSE_null, both models
    carrying the random intercept).
    """

    names: list[str]
    coefficients: np.ndarray
    se: np.ndarray
    sigma_gamma: float | None
    sigma_eps: float
    lambda_ratio: float
    residuals: dict[str, float]
    cluster_effects: dict[str, float]
    omega2: float
    n: int
    n_clusters: int

    def coefficient(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def residual_array(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.residuals[i] for i in ids])

    def to_json_dict(self) -> dict:
        return {
            "coefficients": {n: float(c) for n, c in
                             zip(self.names, self.coefficients)},
            "se": {n: float(s) for n, s in zip(self.names, self.se)},
            "sigma_gamma": self.sigma_gamma,
            "sigma_eps": self.sigma_eps,
            "lambda_ratio": self.lambda_ratio,
            "omega2": self.omega2,
            "n": self.n,
            "n_clusters": self.n_clusters,
            "cluster_effects": {k: float(v) for k, v in
                                sorted(self.cluster_effects.items())},
            "residuals": {k: float(v) for k, v in
                          sorted(self.residuals.items())},
        }

    def table_rows(self):
        yield ("term", "estimate", "se")
        for nm, c, s in zip(self.names, self.coefficients, self.se):
            yield (nm, float(c), float(s))


def _reml_pieces(X, y, codes, sizes, lam):
    """GLS pieces under V = I + lam * (block ones): beta, r'V^-1 r, logdets."""
    w = lam / (1.0 + lam * sizes)
    SX = np.zeros((sizes.size, X.shape[1]))
    np.add.at(SX, codes, X)
    Sy = np.bincount(codes, weights=y, minlength=sizes.size)
    XtViX = X.T @ X - SX.T @ (w[:, None] * SX)
    XtViy = X.T @ y - SX.T @ (w * Sy)
    beta = np.linalg.solve(XtViX, XtViy)
    r = y - X @ beta
    Sr = np.bincount(codes, weights=r, minlength=sizes.size)
    rvr = float(r @ r - (w * Sr * Sr).sum())
    return beta, r, Sr, rvr, XtViX


def _reml_criterion(X, y, codes, sizes, lam):
    n, p = X.shape
    beta, _, _, rvr, XtViX = _reml_pieces(X, y, codes, sizes, lam)
    if rvr <= 0:
        return -np.inf if rvr == 0 else np.inf
    logdet_v = float(np.log1p(lam * sizes).sum())
    sign, logdet_x = np.linalg.slogdet(XtViX)
    if sign <= 0:
        return np.inf
    return logdet_v + logdet_x + (n - p) * math.log(rvr)


def _profile_lambda(X, y, codes, sizes, grid_points: int = 61) -> float:
    """Minimize the profiled REML criterion over the variance ratio.

    Coarse log-spaced scan (with an exact-zero candidate) followed by
    golden-section refinement of the bracketing interval.
    """
    lo, hi = LAMBDA_RANGE
    grid = np.concatenate([[0.0], np.geomspace(lo, hi, grid_points)])
    crits = [_reml_criterion(X, y, codes, sizes, g) for g in grid]
    i = int(np.nanargmin(crits))
    if i == 0:
        return 0.0
    left = math.log(grid[max(i - 1, 1)])
    right = math.log(grid[min(i + 1, grid.size - 1)])
    if right <= left:
        return float(grid[i])

    def f(u):
        return _reml_criterion(X, y, codes, sizes, math.exp(u))

    a, b = left, right
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(80):
        if b - a < 1e-10:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    lam = math.exp((a + b) / 2.0)
    if _reml_criterion(X, y, codes, sizes, 0.0) <= f(math.log(lam)):
        return 0.0
    return float(lam)


def fit_residualization(outcome, design: DesignMatrix,
                        clusters: Sequence[str]) -> ResidualizationFit:
    """Fit outcome ~ design + (1 | cluster) and residualize.

    ``outcome`` is a per-subject mapping or an array aligned with
    ``design.ids``; ``clusters`` is the per-subject cluster label in the
    same order.  A single cluster degenerates to ordinary least squares
    (with a warning) and leaves the random-intercept SD undefined.
    """
    ids = design.ids
    if isinstance(outcome, Mapping):
        y = np.array([float(outcome[i]) for i in ids])
    else:
        y = np.asarray(outcome, dtype=float).ravel()
        if y.size != len(ids):
            raise DataError(
                f"outcome length {y.size} != design rows {len(ids)}"
            )
    labels = [str(c) for c in clusters]
    if len(labels) != len(ids):
        raise DataError("cluster labels must align with design rows")
    X = design.matrix
    n, p = X.shape
    if n <= p:
        raise DataError(f"need more subjects ({n}) than columns ({p})")
    _check_full_rank(X, design.names)

    uniq, codes = np.unique(labels, return_inverse=True)
    sizes = np.bincount(codes)
    single = uniq.size < 2
    if single:
        warnings.warn("single cluster: falling back to ordinary least "
                      "squares, random-intercept SD undefined", stacklevel=2)
        lam = 0.0
    else:
        lam = _profile_lambda(X, y, codes, sizes)

    beta, r, Sr, rvr, XtViX = _reml_pieces(X, y, codes, sizes, lam)
    sigma_eps2 = rvr / (n - p)
    sigma_eps = math.sqrt(max(sigma_eps2, 0.0))
    sigma_gamma = None if single else math.sqrt(lam * sigma_eps2)
    se = np.sqrt(np.diagonal(sigma_eps2 * np.linalg.inv(XtViX)))

    gamma = lam * Sr / (1.0 + lam * sizes)
    cluster_effects = ({} if single
                       else {str(u): float(g) for u, g in zip(uniq, gamma)})
    e = r - gamma[codes]
    residuals = {sid: float(v) for sid, v in zip(ids, e)}

    null_design = DesignMatrix(["intercept"], np.ones((n, 1)), list(ids))
    if p == 1 and design.names == ["intercept"]:
        sse0 = float(e @ e)
    else:
        null_fit = fit_residualization_null(y, null_design, codes, sizes,
                                            uniq, single)
        sse0 = float(null_fit @ null_fit)
    sse = float(e @ e)
    omega2 = float("nan") if sse0 <= 0 else 1.0 - sse / sse0

    return ResidualizationFit(
        names=list(design.names), coefficients=beta, se=se,
        sigma_gamma=sigma_gamma, sigma_eps=sigma_eps, lambda_ratio=float(lam),
        residuals=residuals, cluster_effects=cluster_effects, omega2=omega2,
        n=n, n_clusters=int(uniq.size),
    )


def fit_residualization_null(y, null_design: DesignMatrix, codes, sizes,
                             uniq, single: bool) -> np.ndarray:
    """Conditional residuals of the intercept-only mixed model."""
    X = null_design.matrix
    lam = 0.0 if single else _profile_lambda(X, y, codes, sizes)
    _, r, Sr, _, _ = _reml_pieces(X, y, codes, sizes, lam)
    gamma = lam * Sr / (1.0 + lam * sizes)
    return r - gamma[codes]


def residualize(outcome: Mapping[str, float], covariates: ScalarCovariates,
                ids: Sequence[str] | None = None) -> ResidualizationFit:
    """Build the design from declared covariates and fit the mixed model.

    Subjects default to those with an outcome value and a complete
    covariate record (including a cluster label when one is declared).
    """
    if ids is None:
        ids = [i for i in outcome
               if i in covariates.records and covariates.is_complete(i)]
        ids.sort()
    design = build_design(covariates, ids)
    if covariates.cluster_field:
        clusters = covariates.cluster_labels(ids)
    else:
        clusters = ["_all"] * len(ids)
    return fit_residualization(outcome, design, clusters)


# ---------------------------------------------------------------------------
# Score regressions
# ---------------------------------------------------------------------------


@dataclass
class LinearFit:
    """OLS fit with optional bootstrap inference attached."""

    names: list[str]
    estimates: np.ndarray
    residuals: np.ndarray
    n: int
    replicates: np.ndarray | None = None      # (R, d)
    cis: dict[str, dict[int, tuple[float, float]]] = field(default_factory=dict)
    pvalues: dict[str, float] = field(default_factory=dict)
    kdes: dict[str, Curve | None] = field(default_factory=dict)
    k_boot: int = 0
    seed: int | None = None

    def estimate(self, name: str) -> float:
        return float(self.estimates[self.names.index(name)])

    def to_json_dict(self) -> dict:
        d = {
            "coefficients": {n: float(v) for n, v in
                             zip(self.names, self.estimates)},
            "n": self.n,
            "k_boot": self.k_boot,
        }
        if self.seed is not None:
            d["seed"] = self.seed
        if self.cis:
            d["ci"] = {
                name: {str(lv): [float(lo), float(hi)]
                       for lv, (lo, hi) in sorted(levels.items())}
                for name, levels in sorted(self.cis.items())
            }
        if self.pvalues:
            d["p"] = {n: float(p) for n, p in sorted(self.pvalues.items())}
        return d

    def table_rows(self, level: int = 95):
        """Rows shaped like a coefficient table: estimate, CI, p-value."""
        yield ("term", "estimate", f"lo{level}", f"hi{level}", "p")
        for i, name in enumerate(self.names):
            lo, hi = self.cis.get(name, {}).get(level, (float("nan"),) * 2)
            p = self.pvalues.get(name, float("nan"))
            yield (name, float(self.estimates[i]), float(lo), float(hi),
                   float(p))


def _score_design(scores: Mapping[str, np.ndarray],
                  interactions: Sequence[tuple[str, str]]
                  ) -> tuple[list[str], np.ndarray]:
    if not scores:
        raise ConfigError("at least one score column is required")
    base_names = list(scores)
    n = np.asarray(next(iter(scores.values()))).size
    cols = [np.ones(n)]
    names = ["intercept"]
    for name in base_names:
        col = np.asarray(scores[name], dtype=float).ravel()
        if col.size != n:
            raise DataError(f"score column {name!r} has length {col.size}, "
                            f"expected {n}")
        cols.append(col)
        names.append(name)
    for a, b in interactions:
        if a not in scores or b not in scores:
            raise ConfigError(f"interaction ({a!r}, {b!r}) references an "
                              "unknown score column")
        cols.append(np.asarray(scores[a], dtype=float)
                    * np.asarray(scores[b], dtype=float))
        names.append(f"{a}:{b}")
    return names, np.column_stack(cols)


def fit_score_lm(response, scores: Mapping[str, np.ndarray],
                 interactions: Sequence[tuple[str, str]] = ()) -> LinearFit:
    """OLS of a response on named score columns plus pairwise interactions.

    Callers pass scores already normalized to unit variance; interaction
    columns are elementwise products of the named columns and are named
    ``a:b``.
    """
    names, X = _score_design(scores, interactions)
    y = np.asarray(response, dtype=float).ravel()
    if y.size != X.shape[0]:
        raise DataError(f"response length {y.size} != rows {X.shape[0]}")
    _check_full_rank(X, names)
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    return LinearFit(names=names, estimates=beta, residuals=y - X @ beta,
                     n=y.size)


# ---------------------------------------------------------------------------
# Bootstrap inference
# ---------------------------------------------------------------------------


def bootstrap_coefficients(fit_rows: Callable[[np.ndarray], np.ndarray],
                           n_rows: int, point: np.ndarray,
                           names: Sequence[str], k_boot: int = 1000,
                           seed: int = 0, *,
                           levels: Sequence[int] = DEFAULT_LEVELS,
                           threads: int = 1, with_kde: bool = True):
    """Generic subject-resampling bootstrap of a coefficient vector.

    ``fit_rows(idx)`` refits the model on the given row indices and
    returns the coefficient vector.  Returns ``(replicates, cis, pvalues,
    kdes)``: percentile intervals per level (widened to bracket the point
    estimate), two-sided p-values, and a density curve per coefficient
    (None for degenerate distributions).
    """
    point = np.asarray(point, dtype=float).ravel()

    def replicate(_r: int, rng: np.random.Generator) -> np.ndarray:
        return fit_rows(rng.integers(0, n_rows, size=n_rows))

    reps = run_replicates(replicate, k_boot, seed, threads=threads)
    bands = percentile_bands(reps, levels)
    cis: dict[str, dict[int, tuple[float, float]]] = {}
    pvalues: dict[str, float] = {}
    kdes: dict[str, Curve | None] = {}
    for j, name in enumerate(names):
        cis[name] = {}
        for lv in levels:
            lo = min(float(bands[f"lo{lv}"][j]), float(point[j]))
            hi = max(float(bands[f"hi{lv}"][j]), float(point[j]))
            cis[name][lv] = (lo, hi)
        pvalues[name] = two_sided_pvalue(reps[:, j])
        if with_kde:
            col = reps[:, j]
            col = col[np.isfinite(col)]
            kdes[name] = (kde_1d(col) if col.size >= 2 and np.ptp(col) > 0
                          else None)
    return reps, cis, pvalues, kdes


def bootstrap_score_lm(response, scores: Mapping[str, np.ndarray],
                       interactions: Sequence[tuple[str, str]] = (),
                       k_boot: int = 1000, seed: int = 0, *,
                       levels: Sequence[int] = DEFAULT_LEVELS,
                       threads: int = 1, with_kde: bool = True) -> LinearFit:
    """Score regression with subject-bootstrap CIs, p-values, and KDEs."""
    fit = fit_score_lm(response, scores, interactions)
    y = np.asarray(response, dtype=float).ravel()
    mats = {k: np.asarray(v, dtype=float).ravel() for k, v in scores.items()}

    def fit_rows(idx: np.ndarray) -> np.ndarray:
        sub = {k: v[idx] for k, v in mats.items()}
        return fit_score_lm(y[idx], sub, interactions).estimates

    reps, cis, pvalues, kdes = bootstrap_coefficients(
        fit_rows, y.size, fit.estimates, fit.names, k_boot, seed,
        levels=levels, threads=threads, with_kde=with_kde)
    fit.replicates = reps
    fit.cis = cis
    fit.pvalues = pvalues
    fit.kdes = kdes
    fit.k_boot = k_boot
    fit.seed = seed
    return fit


@dataclass
class PearsonResult:
    """Sample Pearson correlation with a bootstrap percentile CI."""

    r: float
    cis: dict[int, tuple[float, float]]
    k_boot: int
    seed: int
    n: int

    def ci(self, level: int = 95) -> tuple[float, float]:
        return self.cis[level]

    def to_json_dict(self) -> dict:
        return {
            "r": self.r,
            "ci": {str(lv): [lo, hi] for lv, (lo, hi) in sorted(self.cis.items())},
            "k_boot": self.k_boot,
            "seed": self.seed,
            "n": self.n,
        }


def pearson_scores_vs_outcome(x, y, k_boot: int = 1000, seed: int = 0, *,
                              levels: Sequence[int] = DEFAULT_LEVELS,
                              threads: int = 1) -> PearsonResult:
    """Pearson correlation of two per-subject columns, bootstrap CI."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise DataError(f"column lengths differ: {x.size} vs {y.size}")
    if x.size < 3:
        raise DataError("need at least three subjects")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateScalarError("a column has zero variance")
    r = float(np.corrcoef(x, y)[0, 1])

    def replicate(_r: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(0, x.size, size=x.size)
        xs, ys = x[idx], y[idx]
        if np.ptp(xs) == 0 or np.ptp(ys) == 0:
            raise DegenerateScalarError("degenerate resample")
        return np.array([np.corrcoef(xs, ys)[0, 1]])

    reps = run_replicates(replicate, k_boot, seed, threads=threads)
    bands = percentile_bands(reps, levels)
    cis = {lv: (min(float(bands[f"lo{lv}"][0]), r),
                max(float(bands[f"hi{lv}"][0]), r)) for lv in levels}
    return PearsonResult(r=r, cis=cis, k_boot=k_boot, seed=seed, n=x.size)
