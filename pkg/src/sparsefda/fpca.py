"""Functional principal component analysis for sparse longitudinal data.

The mean curve is a pooled local linear smooth; the covariance surface is a
local plane smooth of off-diagonal raw covariance products (the diagonal is
excluded because measurement error inflates it); the measurement-error
variance is the average gap between a locally quadratic fit of the diagonal
raw variances and the fitted surface diagonal over the central half of the
window.  Eigenanalysis runs on the trapezoid-weighted grid so that the
eigenfunctions are orthonormal in L2, and per-subject scores are best
linear predictors given the sparse observations (conditional expectation
under Gaussianity), which shrink toward zero as information decreases.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .datamodel import SparseFunctionalSample
from .errors import (
    ConfigError,
    DataError,
    DegenerateCovarianceError,
    ExtrapolationError,
    GridMismatchError,
    InsufficientPairsError,
)
from .kernelsmooth import (
    DEFAULT_KERNEL,
    BandwidthSpec,
    Curve,
    KernelSpec,
    Sigma2Estimate,
    Surface,
    cv_bandwidth,
    default_grid,
    estimate_sigma2,
    local_bilinear_2d,
    local_linear_1d,
    trapezoid_weights,
)


@dataclass
class SmoothedMoments:
    """Smoothed mean, covariance surface, and error variance of one variable."""

    mean: Curve
    autocov: Surface
    sigma2: float
    sigma2_clamped: bool = False
    sigma2_detail: Sigma2Estimate | None = field(default=None, repr=False)
    bandwidths: dict = field(default_factory=dict)

    @property
    def grid(self) -> np.ndarray:
        return self.mean.grid

    def diag_values(self) -> np.ndarray:
        return np.diagonal(self.autocov.values).copy()

    def diag_curve(self) -> Curve:
        return Curve(self.grid, self.diag_values())


def raw_covariance_pairs(sample: SparseFunctionalSample, mean_curve: Curve,
                         include_diagonal: bool = False):
    """Pooled raw covariance products of residuals, as (s, t, c) arrays.

    All ordered within-subject pairs are returned; the diagonal (same
    observation against itself) is excluded by default because measurement
    error does not cancel there.
    """
    ss, tt, cc = [], [], []
    for ts, ys in sample.data.values():
        n = ts.size
        if n < 2 and not include_diagonal:
            continue
        r = ys - mean_curve(ts)
        J, L = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        if not include_diagonal:
            keep = J != L
            J, L = J[keep], L[keep]
        else:
            J, L = J.ravel(), L.ravel()
        ss.append(ts[J])
        tt.append(ts[L])
        cc.append(r[J] * r[L])
    if not ss:
        raise InsufficientPairsError(
            "no subject has two observations; cannot smooth a covariance surface"
        )
    return np.concatenate(ss), np.concatenate(tt), np.concatenate(cc)


def default_bandwidth_candidates(width: float, num: int = 6) -> list[float]:
    """Geometric candidate ladder between width/40 and width/4."""
    return [float(h) for h in np.geomspace(width / 40.0, width / 4.0, num)]


def fit_moments(sample: SparseFunctionalSample, bw_mean=None, bw_cov=None, *,
                grid_size: int = 51, sigma2_bandwidth: float | None = None,
                kernel: KernelSpec = DEFAULT_KERNEL, cv_folds: int = 10,
                cv_seed: int = 0) -> SmoothedMoments:
    """Estimate mean curve, covariance surface and error variance.

    Bandwidths left as ``None`` are chosen by subject-partitioned k-fold
    cross validation with the one-standard-error rule.  The fitted surface
    is symmetrized; its raw input excludes same-observation products.

    Parameters
    ----------
    sample : SparseFunctionalSample
    bw_mean : float, optional
        Mean-curve bandwidth (CV-selected when omitted).
    bw_cov : float or (float, float), optional
        Covariance-surface bandwidths (CV-selected when omitted).
    grid_size : int
        Number of equispaced grid points spanning the window.
    sigma2_bandwidth : float, optional
        Bandwidth of the diagonal variance smoother (defaults to the first
        covariance bandwidth).
    """
    lo, hi = sample.window
    grid = default_grid(lo, hi, grid_size)
    bws: dict = {}

    if bw_mean is None:
        sel = cv_bandwidth(sample.data,
                           default_bandwidth_candidates(hi - lo),
                           folds=cv_folds, seed=cv_seed, kernel=kernel)
        bw_mean = sel.value
        bws["mean_cv"] = {
            "candidates": list(sel.selection.candidates),
            "mean_errors": list(sel.selection.mean_errors),
        }
    bws["mean"] = float(bw_mean)

    pooled_t, pooled_y = sample.pooled()
    mean_curve = local_linear_1d(pooled_t, pooled_y, bw_mean, grid, kernel=kernel)

    s, t, c = raw_covariance_pairs(sample, mean_curve)

    if bw_cov is None:
        groups = {}
        for sid, (ts, ys) in sample.data.items():
            n = ts.size
            if n < 2:
                continue
            r = ys - mean_curve(ts)
            J, L = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
            keep = J != L
            coords = np.column_stack([ts[J[keep]], ts[L[keep]]])
            groups[sid] = (coords, r[J[keep]] * r[L[keep]])
        sel = cv_bandwidth(groups, default_bandwidth_candidates(hi - lo),
                           folds=cv_folds, seed=cv_seed, kernel=kernel)
        bw_cov = sel.values
        bws["cov_cv"] = {
            "candidates": list(sel.selection.candidates),
            "mean_errors": list(sel.selection.mean_errors),
        }
    if np.isscalar(bw_cov):
        bw_cov = (float(bw_cov), float(bw_cov))
    else:
        bw_cov = tuple(float(v) for v in bw_cov)
        if len(bw_cov) == 1:
            bw_cov = (bw_cov[0], bw_cov[0])
    bws["cov"] = [bw_cov[0], bw_cov[1]]

    surf = local_bilinear_2d(s, t, c, bw_cov, grid, grid, kernel=kernel)
    surf.values = (surf.values + surf.values.T) / 2.0

    h_sig = float(sigma2_bandwidth) if sigma2_bandwidth is not None else bw_cov[0]
    bws["sigma2"] = h_sig
    sig = estimate_sigma2(sample.data, mean_curve, surf, h_sig, kernel=kernel)

    return SmoothedMoments(
        mean=mean_curve,
        autocov=surf,
        sigma2=sig.value,
        sigma2_clamped=sig.clamped,
        sigma2_detail=sig,
        bandwidths=bws,
    )


# ---------------------------------------------------------------------------
# Eigenanalysis on the quadrature-weighted grid
# ---------------------------------------------------------------------------


@dataclass
class EigenSystem:
    """Retained eigenpairs of the smoothed covariance surface.

    ``eigenvalues``/``eigenfunctions`` hold the retained leading components;
    ``eigenvalues_all`` keeps the full positive spectrum so that fraction-
    of-variance-explained (``fve``, cumulative) tables and truncation error
    bounds can be reported beyond the retained rank.
    """

    grid: np.ndarray
    eigenvalues: np.ndarray            # (K,)
    eigenfunctions: np.ndarray         # (K, m), unit L2 norm on the grid
    fve: np.ndarray                    # cumulative, over the positive spectrum
    eigenvalues_all: np.ndarray
    fve_threshold: float
    capped: bool = False

    @property
    def n_components(self) -> int:
        return int(self.eigenvalues.size)

    def eigenfunction(self, k: int) -> Curve:
        return Curve(self.grid, self.eigenfunctions[k])


def eigendecompose(moments: SmoothedMoments, fve_threshold: float = 0.95,
                   max_components: int | None = None) -> EigenSystem:
    """Eigenpairs of the covariance surface under trapezoid quadrature.

    Solves the symmetric eigenproblem of ``W^(1/2) C W^(1/2)``, drops
    nonpositive eigenvalues, and keeps the smallest rank whose cumulative
    fraction of variance explained reaches ``fve_threshold`` (capped at
    ``max_components`` with a warning when the cap binds).  Eigenfunction
    signs are canonical: nonnegative integral, and a positive value at the
    left end when the integral vanishes.
    """
    if not (0 < fve_threshold <= 1):
        raise ConfigError("fve_threshold must be in (0, 1]")
    grid = moments.grid
    w = trapezoid_weights(grid)
    sw = np.sqrt(w)
    A = sw[:, None] * moments.autocov.values * sw[None, :]
    A = (A + A.T) / 2.0
    vals, vecs = np.linalg.eigh(A)
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order]

    # positive up to numerical rank tolerance, so an (anti)definite
    # surface cannot sneak eigenvalue dust into the retained spectrum
    tol = np.max(np.abs(vals)) * 1e-12 if vals.size else 0.0
    pos = vals > tol
    if not np.any(pos):
        raise DegenerateCovarianceError(
            "covariance surface has no positive eigenvalue"
        )
    lam_all = vals[pos]
    vecs = vecs[:, pos]
    fve = np.cumsum(lam_all) / lam_all.sum()

    k_needed = int(np.searchsorted(fve, fve_threshold - 1e-12) + 1)
    k_needed = min(k_needed, lam_all.size)
    capped = False
    if max_components is not None and k_needed > max_components:
        warnings.warn(
            f"FVE threshold {fve_threshold} wants {k_needed} components; "
            f"capping at {max_components}", stacklevel=2)
        k_needed = max_components
        capped = True

    phi = (vecs[:, :k_needed] / sw[:, None]).T
    integrals = phi @ w
    for k in range(k_needed):
        s = integrals[k]
        if abs(s) < 1e-8:
            lead = phi[k][np.nonzero(phi[k])[0]]
            s = lead[0] if lead.size else 1.0
        if s < 0:
            phi[k] = -phi[k]

    return EigenSystem(
        grid=grid,
        eigenvalues=lam_all[:k_needed].copy(),
        eigenfunctions=phi,
        fve=fve,
        eigenvalues_all=lam_all.copy(),
        fve_threshold=float(fve_threshold),
        capped=capped,
    )


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------


@dataclass
class ScoreSet:
    """Per-subject component scores with conditional covariances."""

    ids: list[str]
    scores: np.ndarray                 # (n, K); NaN rows for failures
    score_cov: np.ndarray              # (n, K, K)
    failed_ids: list[str] = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return int(self.scores.shape[1])

    def ok_mask(self) -> np.ndarray:
        return ~np.isnan(self.scores[:, 0])


def _interp_phi(eigen: EigenSystem, times: np.ndarray) -> np.ndarray:
    return np.column_stack([
        np.interp(times, eigen.grid, eigen.eigenfunctions[k])
        for k in range(eigen.n_components)
    ])


def pace_scores(sample: SparseFunctionalSample, moments: SmoothedMoments,
                eigen: EigenSystem, ridge: float | str = "auto",
                cond_limit: float = 1e12) -> ScoreSet:
    """Conditional-expectation scores from sparse noisy observations.

    For subject i with observation times T_i, the score vector is
    ``Lambda Phi_i' Sigma_i^{-1} (Y_i - mu_i)`` with
    ``Sigma_i = C(T_i, T_i) + sigma2 I``.  When the error variance is zero
    a relative ridge of ``1e-8 trace(Sigma_i)/N_i`` keeps the solve stable
    (pass ``ridge=0`` to disable, or a float to force a value).  Subjects
    whose system stays worse conditioned than ``cond_limit`` are flagged
    and get NaN scores rather than being dropped.
    """
    lam = eigen.eigenvalues
    K = lam.size
    ids = sample.subject_ids
    n = len(ids)
    scores = np.full((n, K), np.nan)
    score_cov = np.full((n, K, K), np.nan)
    failed: list[str] = []
    Lam = np.diag(lam)

    for i, sid in enumerate(ids):
        ts, ys = sample.data[sid]
        resid = ys - moments.mean(ts)
        Phi = _interp_phi(eigen, ts)
        S, T = np.meshgrid(ts, ts, indexing="ij")
        Sigma = moments.autocov(S.ravel(), T.ravel()).reshape(ts.size, ts.size)
        Sigma = (Sigma + Sigma.T) / 2.0 + moments.sigma2 * np.eye(ts.size)
        if ridge == "auto":
            eps = 0.0
            if moments.sigma2 == 0.0:
                eps = 1e-8 * np.trace(Sigma) / ts.size
        else:
            eps = float(ridge)
        if eps:
            Sigma = Sigma + eps * np.eye(ts.size)
        try:
            cond = np.linalg.cond(Sigma)
        except np.linalg.LinAlgError:
            cond = np.inf
        if not np.isfinite(cond) or cond > cond_limit:
            failed.append(sid)
            continue
        try:
            sol = np.linalg.solve(Sigma, np.column_stack([resid, Phi * lam]))
        except np.linalg.LinAlgError:
            failed.append(sid)
            continue
        scores[i] = lam * (Phi.T @ sol[:, 0])
        score_cov[i] = Lam - (Phi * lam).T @ sol[:, 1:]

    return ScoreSet(ids=ids, scores=scores, score_cov=score_cov,
                    failed_ids=failed)


def dense_scores(values, moments: SmoothedMoments, eigen: EigenSystem
                 ) -> np.ndarray:
    """Quadrature scores for a trajectory observed on the model grid.

    ``values`` must be sampled exactly on the model grid (a Curve on a
    different grid raises :class:`GridMismatchError`; resample first).
    """
    if isinstance(values, Curve):
        if values.grid.size != eigen.grid.size or not np.allclose(
            values.grid, eigen.grid, atol=1e-12, rtol=0.0
        ):
            raise GridMismatchError(
                "trajectory grid differs from the model grid; resample first"
            )
        x = values.values
    else:
        x = np.asarray(values, dtype=float).ravel()
        if x.size != eigen.grid.size:
            raise GridMismatchError(
                f"expected {eigen.grid.size} grid values, got {x.size}; "
                "resample onto the model grid first"
            )
    w = trapezoid_weights(eigen.grid)
    resid = x - moments.mean.values
    return eigen.eigenfunctions @ (w * resid)


def reconstruct(moments: SmoothedMoments, eigen: EigenSystem, scores,
                eval_times) -> Curve:
    """Mean plus truncated component expansion at ``eval_times``.

    Refuses to extrapolate outside the fitted window.
    """
    t = np.asarray(eval_times, dtype=float).ravel()
    lo, hi = eigen.grid[0], eigen.grid[-1]
    if t.size and (t.min() < lo - 1e-12 or t.max() > hi + 1e-12):
        raise ExtrapolationError(
            f"evaluation times outside the fitted window [{lo}, {hi}]"
        )
    xi = np.asarray(scores, dtype=float).ravel()
    if xi.size != eigen.n_components:
        raise ConfigError(
            f"expected {eigen.n_components} scores, got {xi.size}"
        )
    vals = moments.mean(t) + xi @ _interp_phi(eigen, t).T
    return Curve(t, vals)


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OutlierFlag:
    subject_id: str
    component: int          # 1-based
    direction: str          # "low" or "high"
    z: float
    label: str


@dataclass
class FpcaModel:
    """Fitted FPCA for one variable: moments, eigenpairs, subject scores."""

    variable_name: str
    moments: SmoothedMoments
    eigen: EigenSystem
    scores: ScoreSet

    @property
    def grid(self) -> np.ndarray:
        return self.eigen.grid

    def score_sds(self) -> np.ndarray:
        """Sample standard deviation (ddof=1) of each score column."""
        ok = self.scores.ok_mask()
        return np.std(self.scores.scores[ok], axis=0, ddof=1)

    def normalized_scores(self) -> tuple[list[str], np.ndarray]:
        """Scores divided by their sample standard deviation."""
        sds = self.score_sds()
        if np.any(sds == 0):
            raise DataError("a score column has zero sample variance")
        return self.scores.ids, self.scores.scores / sds

    def fitted_variance(self) -> Curve:
        """Model-implied variance path: the retained-spectrum diagonal.

        Nonnegative by construction, unlike the raw smoothed diagonal,
        which can dip below zero near the window edges in small samples;
        the standardization of choice for reported correlations.
        """
        e = self.eigen
        diag = (e.eigenvalues[:, None] * e.eigenfunctions ** 2).sum(axis=0)
        return Curve(e.grid, diag, meta={"variable": self.variable_name})

    def reconstruct_subject(self, sid: str, eval_times) -> Curve:
        i = self.scores.ids.index(sid)
        return reconstruct(self.moments, self.eigen, self.scores.scores[i],
                           eval_times)

    def fve_rows(self, max_rows: int | None = None) -> list[dict]:
        lam = self.eigen.eigenvalues_all
        fve = self.eigen.fve
        total = lam.sum()
        n = lam.size if max_rows is None else min(max_rows, lam.size)
        return [
            {
                "variable": self.variable_name,
                "component": k + 1,
                "eigenvalue": float(lam[k]),
                "fve": float(lam[k] / total),
                "cumulative_fve": float(fve[k]),
                "retained": bool(k < self.eigen.n_components),
            }
            for k in range(n)
        ]

    def to_json_dict(self) -> dict:
        m = self.moments
        e = self.eigen
        s = self.scores
        return {
            "variable": self.variable_name,
            "grid": e.grid.tolist(),
            "mean": m.mean.values.tolist(),
            "covariance": m.autocov.values.tolist(),
            "sigma2": float(m.sigma2),
            "sigma2_clamped": bool(m.sigma2_clamped),
            "bandwidths": m.bandwidths,
            "eigenvalues": e.eigenvalues.tolist(),
            "eigenvalues_all": e.eigenvalues_all.tolist(),
            "fve": e.fve.tolist(),
            "fve_threshold": e.fve_threshold,
            "capped": bool(e.capped),
            "eigenfunctions": e.eigenfunctions.tolist(),
            "scores": {
                "ids": list(s.ids),
                "values": s.scores.tolist(),
                "cov": s.score_cov.tolist(),
                "failed": list(s.failed_ids),
            },
        }

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "FpcaModel":
        grid = np.asarray(d["grid"], dtype=float)
        moments = SmoothedMoments(
            mean=Curve(grid, np.asarray(d["mean"], dtype=float)),
            autocov=Surface(grid, grid, np.asarray(d["covariance"], dtype=float)),
            sigma2=float(d["sigma2"]),
            sigma2_clamped=bool(d.get("sigma2_clamped", False)),
            bandwidths=dict(d.get("bandwidths", {})),
        )
        eigen = EigenSystem(
            grid=grid,
            eigenvalues=np.asarray(d["eigenvalues"], dtype=float),
            eigenfunctions=np.asarray(d["eigenfunctions"], dtype=float),
            fve=np.asarray(d["fve"], dtype=float),
            eigenvalues_all=np.asarray(d["eigenvalues_all"], dtype=float),
            fve_threshold=float(d.get("fve_threshold", 0.95)),
            capped=bool(d.get("capped", False)),
        )
        sc = d["scores"]
        scores = ScoreSet(
            ids=list(sc["ids"]),
            scores=np.asarray(sc["values"], dtype=float),
            score_cov=np.asarray(sc["cov"], dtype=float),
            failed_ids=list(sc.get("failed", [])),
        )
        return cls(d["variable"], moments, eigen, scores)

    def save_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load_json(cls, path) -> "FpcaModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def fit_fpca(sample: SparseFunctionalSample, bw_mean=None, bw_cov=None, *,
             grid_size: int = 51, fve_threshold: float = 0.95,
             max_components: int | None = None,
             sigma2_bandwidth: float | None = None,
             ridge: float | str = "auto",
             kernel: KernelSpec = DEFAULT_KERNEL,
             cv_folds: int = 10, cv_seed: int = 0) -> FpcaModel:
    """Moments -> eigenpairs -> conditional scores, as one fitted model."""
    moments = fit_moments(sample, bw_mean, bw_cov, grid_size=grid_size,
                          sigma2_bandwidth=sigma2_bandwidth, kernel=kernel,
                          cv_folds=cv_folds, cv_seed=cv_seed)
    eigen = eigendecompose(moments, fve_threshold, max_components)
    scores = pace_scores(sample, moments, eigen, ridge=ridge)
    return FpcaModel(sample.variable_name, moments, eigen, scores)


def score_outlier_flags(model: FpcaModel, threshold: float = 2.5
                        ) -> list[OutlierFlag]:
    """Flag subjects with standardized scores beyond ``threshold`` SDs.

    Scores are standardized by the square root of the fitted eigenvalues.
    Low first-component scores are labeled "stunting-like" (persistently
    low level) and low second-component scores "faltering-like"
    (decelerating shape); other flags carry a generic component label.
    """
    if not threshold > 0:
        raise ConfigError("threshold must be positive")
    lam = model.eigen.eigenvalues
    flags: list[OutlierFlag] = []
    for i, sid in enumerate(model.scores.ids):
        row = model.scores.scores[i]
        if np.any(np.isnan(row)):
            continue
        z = row / np.sqrt(lam)
        for k in range(lam.size):
            if abs(z[k]) <= threshold:
                continue
            direction = "low" if z[k] < 0 else "high"
            if k == 0 and direction == "low":
                label = "stunting-like"
            elif k == 1 and direction == "low":
                label = "faltering-like"
            else:
                label = f"{direction}-pc{k + 1}"
            flags.append(OutlierFlag(sid, k + 1, direction, float(z[k]), label))
    return flags
