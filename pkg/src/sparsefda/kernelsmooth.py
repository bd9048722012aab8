"""Local polynomial kernel smoothing on scattered 1-D and 2-D data.

The smoothers here are the numerical backbone for mean curves, covariance
surfaces and measurement-error variance of sparsely observed longitudinal
variables.  All of them use a Gaussian kernel truncated at a configurable
number of bandwidths, weighted least squares fitted independently at every
evaluation point, and a rank-deficiency fallback ladder (local linear ->
local constant in 1-D, local plane -> local mean in 2-D) recorded per
evaluation point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegenerateScalarError,
    LocalRankError,
    NoValidBandwidthError,
)

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Relative eigenvalue threshold below which a local design is treated as
# rank deficient and the fit degrades one rung down the fallback ladder.
_RANK_RTOL = 1e-11


def gaussian_kernel(u):
    """Standard Gaussian kernel ``(2*pi)**-0.5 * exp(-u**2 / 2)``.

    Parameters
    ----------
    u : array_like
        Scaled distances ``(t - t0) / h``.

    Returns
    -------
    ndarray or float
        Kernel values, same shape as ``u``.
    """
    u = np.asarray(u, dtype=float)
    out = _INV_SQRT_2PI * np.exp(-0.5 * u * u)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel with a hard truncation radius in bandwidth units.

    Points farther than ``cutoff`` bandwidths from the evaluation point get
    exactly zero weight.  The cutoff must be at least 4 so that truncation
    error stays negligible relative to the kernel mass.
    """

    cutoff: float = 5.0

    def __post_init__(self):
        if not self.cutoff >= 4.0:
            raise ConfigError(f"kernel cutoff must be >= 4, got {self.cutoff}")

    def weights(self, u: np.ndarray) -> np.ndarray:
        """Truncated kernel weights for scaled distances ``u``."""
        u = np.asarray(u, dtype=float)
        w = _INV_SQRT_2PI * np.exp(-0.5 * u * u)
        w[np.abs(u) > self.cutoff] = 0.0
        return w


DEFAULT_KERNEL = KernelSpec()


@dataclass(frozen=True)
class CvSelection:
    """Diagnostics from cross-validated bandwidth selection."""

    candidates: tuple[float, ...]
    mean_errors: tuple[float, ...]
    std_errors: tuple[float, ...]
    folds: int
    seed: int


@dataclass(frozen=True)
class BandwidthSpec:
    """One bandwidth per smoothing dimension, in time units.

    ``values`` has one entry for curve smoothing and two (row, column) for
    surface smoothing.  Bandwidths must be positive and no wider than the
    data range they are applied to; the range check happens at fit time
    because this object does not know the data.
    """

    values: tuple[float, ...]
    selection: CvSelection | None = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.values) not in (1, 2):
            raise ConfigError(
                f"bandwidth must have 1 or 2 components, got {len(self.values)}"
            )
        if any(not (v > 0) for v in self.values):
            raise ConfigError(f"bandwidths must be positive, got {self.values}")

    @property
    def value(self) -> float:
        return self.values[0]


def _as_bandwidth(bw, ndim: int) -> tuple[float, ...]:
    """Normalize float / tuple / BandwidthSpec input to a tuple of floats."""
    if isinstance(bw, BandwidthSpec):
        vals = bw.values
    elif np.isscalar(bw):
        vals = (float(bw),) * ndim
    else:
        vals = tuple(float(v) for v in bw)
    if len(vals) == 1 and ndim == 2:
        vals = (vals[0], vals[0])
    if len(vals) != ndim:
        raise ConfigError(f"expected {ndim} bandwidth component(s), got {vals}")
    if any(not (v > 0) for v in vals):
        raise ConfigError(f"bandwidths must be positive, got {vals}")
    return vals


# ---------------------------------------------------------------------------
# Curve / Surface containers
# ---------------------------------------------------------------------------


@dataclass
class Curve:
    """A function sampled on a strictly increasing grid."""

    grid: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.grid.ndim != 1 or self.grid.shape != self.values.shape:
            raise ConfigError("curve grid and values must be 1-D and equal length")
        if self.grid.size >= 2 and not np.all(np.diff(self.grid) > 0):
            raise ConfigError("curve grid must be strictly increasing")

    def __call__(self, t) -> np.ndarray:
        """Linear interpolation at ``t`` (clamped at the grid ends)."""
        return np.interp(np.asarray(t, dtype=float), self.grid, self.values)

    def to_json_dict(self) -> dict:
        d = {"grid": self.grid.tolist(), "values": self.values.tolist()}
        if self.meta:
            d["meta"] = _jsonable(self.meta)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "Curve":
        return cls(np.asarray(d["grid"], dtype=float),
                   np.asarray(d["values"], dtype=float),
                   dict(d.get("meta", {})))

    def csv_rows(self) -> Iterable[tuple[float, float]]:
        return zip(self.grid.tolist(), self.values.tolist())


@dataclass
class Surface:
    """A bivariate function sampled on the product of two grids."""

    grid_s: np.ndarray
    grid_t: np.ndarray
    values: np.ndarray  # shape (len(grid_s), len(grid_t))
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid_s = np.asarray(self.grid_s, dtype=float)
        self.grid_t = np.asarray(self.grid_t, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid_s.size, self.grid_t.size):
            raise ConfigError("surface values shape must match the two grids")
        for g in (self.grid_s, self.grid_t):
            if g.size >= 2 and not np.all(np.diff(g) > 0):
                raise ConfigError("surface grids must be strictly increasing")

    def __call__(self, s, t) -> np.ndarray:
        """Bilinear interpolation at paired coordinates ``(s, t)``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        gs, gt, z = self.grid_s, self.grid_t, self.values
        i = np.clip(np.searchsorted(gs, s, side="right") - 1, 0, gs.size - 2)
        j = np.clip(np.searchsorted(gt, t, side="right") - 1, 0, gt.size - 2)
        fs = np.clip((s - gs[i]) / (gs[i + 1] - gs[i]), 0.0, 1.0)
        ft = np.clip((t - gt[j]) / (gt[j + 1] - gt[j]), 0.0, 1.0)
        v = (z[i, j] * (1 - fs) * (1 - ft)
             + z[i + 1, j] * fs * (1 - ft)
             + z[i, j + 1] * (1 - fs) * ft
             + z[i + 1, j + 1] * fs * ft)
        return v

    def diagonal(self) -> np.ndarray:
        """Values on the diagonal (requires equal grids)."""
        if self.grid_s.size != self.grid_t.size or not np.array_equal(
            self.grid_s, self.grid_t
        ):
            raise ConfigError("diagonal requires identical grids")
        return np.diagonal(self.values).copy()

    def to_json_dict(self) -> dict:
        d = {
            "grid_s": self.grid_s.tolist(),
            "grid_t": self.grid_t.tolist(),
            "values": self.values.tolist(),
        }
        if self.meta:
            d["meta"] = _jsonable(self.meta)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "Surface":
        return cls(np.asarray(d["grid_s"], dtype=float),
                   np.asarray(d["grid_t"], dtype=float),
                   np.asarray(d["values"], dtype=float),
                   dict(d.get("meta", {})))

    def csv_rows(self) -> Iterable[tuple[float, float, float]]:
        for i, s in enumerate(self.grid_s.tolist()):
            for j, t in enumerate(self.grid_t.tolist()):
                yield s, t, float(self.values[i, j])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def default_grid(t_min: float, t_max: float, size: int = 51) -> np.ndarray:
    """Equispaced evaluation grid spanning the observed window."""
    if not t_max > t_min:
        raise ConfigError(f"degenerate window [{t_min}, {t_max}]")
    if size < 2:
        raise ConfigError("grid needs at least 2 points")
    return np.linspace(t_min, t_max, size)


def trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    """Trapezoid quadrature weights for a strictly increasing grid."""
    grid = np.asarray(grid, dtype=float)
    w = np.empty_like(grid)
    w[1:-1] = (grid[2:] - grid[:-2]) / 2.0
    w[0] = (grid[1] - grid[0]) / 2.0
    w[-1] = (grid[-1] - grid[-2]) / 2.0
    return w


# ---------------------------------------------------------------------------
# 1-D local polynomial fits
# ---------------------------------------------------------------------------


def _polyfit_1d(t, y, w, bandwidth, eval_points, kernel, degree, block=64):
    """Local polynomial WLS, one fit per evaluation point.

    Returns ``(values, fallbacks)`` where ``fallbacks`` maps the index of an
    evaluation point to the degree actually used whenever the requested
    degree was rank deficient there.
    """
    t = np.asarray(t, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if t.size != y.size:
        raise ConfigError("t and y must have equal length")
    if t.size == 0:
        raise LocalRankError(float(np.asarray(eval_points).ravel()[0] if np.size(eval_points) else np.nan),
                             "no input points")
    if w is None:
        w = np.ones_like(y)
    else:
        w = np.asarray(w, dtype=float).ravel()
        if w.size != y.size:
            raise ConfigError("weights must match the number of points")
        if np.any(w < 0):
            raise ConfigError("weights must be nonnegative")
    (h,) = _as_bandwidth(bandwidth, 1)
    x = np.asarray(eval_points, dtype=float).ravel()
    cutoff = kernel.cutoff

    values = np.empty(x.size)
    fallbacks: dict[int, int] = {}

    for start in range(0, x.size, block):
        xs = x[start:start + block]
        u = (t[None, :] - xs[:, None]) / h
        k = _INV_SQRT_2PI * np.exp(-0.5 * u * u) * w[None, :]
        k[np.abs(u) > cutoff] = 0.0
        s0 = k.sum(axis=1)
        dead = ~(s0 > 0)
        if np.any(dead):
            bad = xs[np.argmax(dead)]
            raise LocalRankError(float(bad), "no points inside the kernel window")
        k /= s0[:, None]  # normalize so moment matrices are O(1)

        # weighted moments of u up to order 2*degree and of u^p * y
        pows = [np.ones_like(u)]
        for _ in range(2 * degree):
            pows.append(pows[-1] * u)
        S = np.stack([(k * p).sum(axis=1) for p in pows], axis=1)
        T = np.stack([(k * pows[p] * y[None, :]).sum(axis=1)
                      for p in range(degree + 1)], axis=1)

        vals, fb = _solve_ladder(S, T, degree)
        values[start:start + block] = vals
        for i, d in fb.items():
            fallbacks[start + i] = d
    return values, fallbacks


def _solve_ladder(S, T, degree):
    """Solve batched normal equations, degrading degree where rank deficient."""
    m = S.shape[0]
    values = np.empty(m)
    resolved = np.zeros(m, dtype=bool)
    fallbacks: dict[int, int] = {}
    idx_all = np.arange(m)

    deg = degree
    pending = idx_all
    while pending.size:
        if deg == 0:
            # local constant: plain weighted mean (moments are normalized)
            values[pending] = T[pending, 0]
            for i in pending:
                if degree > 0:
                    fallbacks[int(i)] = 0
            break
        p = deg + 1
        M = np.empty((pending.size, p, p))
        for a in range(p):
            for b in range(p):
                M[:, a, b] = S[pending, a + b]
        rhs = T[pending, :p]
        eigs = np.linalg.eigvalsh(M)
        ok = eigs[:, 0] > _RANK_RTOL * np.maximum(eigs[:, -1], 1e-300)
        if np.any(ok):
            sol = np.linalg.solve(M[ok], rhs[ok][..., None])[:, 0, 0]
            sel = pending[ok]
            values[sel] = sol
            if deg < degree:
                for i in sel:
                    fallbacks[int(i)] = deg
            resolved[sel] = True
        pending = pending[~ok]
        deg -= 1
    return values, fallbacks


def local_linear_1d(t, y, bandwidth, eval_points, weights=None,
                    kernel: KernelSpec = DEFAULT_KERNEL) -> Curve:
    """Local linear smoother evaluated on ``eval_points``.

    At every evaluation point a weighted least squares line is fitted to the
    points within ``kernel.cutoff`` bandwidths and its intercept is the
    smoothed value.  Where fewer than two distinct abscissae fall inside the
    window the fit falls back to a locally constant (Nadaraya-Watson) value;
    evaluation points with no in-window data raise :class:`LocalRankError`.

    Parameters
    ----------
    t, y : array_like
        Scattered observations.
    bandwidth : float or BandwidthSpec
        Kernel bandwidth in the units of ``t``.
    eval_points : array_like
        Strictly increasing evaluation grid.
    weights : array_like, optional
        Nonnegative per-point weights; rescaling them leaves the fit
        unchanged.

    Returns
    -------
    Curve
        Fitted values; ``meta["fallbacks"]`` lists the evaluation points
        (with the degree used) where the fallback ladder engaged.
    """
    grid = np.asarray(eval_points, dtype=float).ravel()
    vals, fb = _polyfit_1d(t, y, weights, bandwidth, grid, kernel, degree=1)
    meta = {}
    if fb:
        meta["fallbacks"] = [
            {"point": float(grid[i]), "degree": d} for i, d in sorted(fb.items())
        ]
    return Curve(grid, vals, meta)


def local_quadratic_1d(t, y, bandwidth, eval_points, weights=None,
                       kernel: KernelSpec = DEFAULT_KERNEL) -> Curve:
    """Local quadratic smoother (used for diagonal variance estimation).

    Same contract as :func:`local_linear_1d` but with a quadratic local
    model and the fallback ladder quadratic -> linear -> constant.
    """
    grid = np.asarray(eval_points, dtype=float).ravel()
    vals, fb = _polyfit_1d(t, y, weights, bandwidth, grid, kernel, degree=2)
    meta = {}
    if fb:
        meta["fallbacks"] = [
            {"point": float(grid[i]), "degree": d} for i, d in sorted(fb.items())
        ]
    return Curve(grid, vals, meta)


def local_linear_at(t, y, bandwidth, points, weights=None,
                    kernel: KernelSpec = DEFAULT_KERNEL) -> np.ndarray:
    """Local linear fit at arbitrary (not necessarily sorted) points."""
    pts = np.asarray(points, dtype=float).ravel()
    vals, _ = _polyfit_1d(t, y, weights, bandwidth, pts, kernel, degree=1)
    return vals


# ---------------------------------------------------------------------------
# 2-D local plane fits
# ---------------------------------------------------------------------------


def _planefit_at(s, t, c, w, h1, h2, eval_pairs, kernel):
    """Local plane WLS at arbitrary (s0, t0) pairs.

    The input points are sorted by ``s`` once; evaluation pairs sharing the
    same ``s0`` reuse the row subset.  Returns ``(values, fallbacks)`` with
    ``fallbacks`` mapping pair index -> 0 where the plane degraded to a
    weighted mean.
    """
    order = np.argsort(s, kind="stable")
    s = s[order]
    t = t[order]
    c = c[order]
    w = w[order]
    cutoff = kernel.cutoff
    half1 = cutoff * h1
    half2 = cutoff * h2

    values = np.empty(len(eval_pairs))
    fallbacks: dict[int, int] = {}
    cur_s = None
    ts = cs = ws = us = ks = None

    for i, (s0, t0) in enumerate(eval_pairs):
        if cur_s is None or s0 != cur_s:
            lo = np.searchsorted(s, s0 - half1, side="left")
            hi = np.searchsorted(s, s0 + half1, side="right")
            us = (s[lo:hi] - s0) / h1
            ks = _INV_SQRT_2PI * np.exp(-0.5 * us * us) * w[lo:hi]
            ts, cs = t[lo:hi], c[lo:hi]
            cur_s = s0
        m = np.abs(ts - t0) <= half2
        if not np.any(m):
            raise LocalRankError((float(s0), float(t0)),
                                 "no points inside the kernel window")
        v = (ts[m] - t0) / h2
        k = ks[m] * (_INV_SQRT_2PI * np.exp(-0.5 * v * v))
        s0w = k.sum()
        if not s0w > 0:
            raise LocalRankError((float(s0), float(t0)), "zero total weight")
        k = k / s0w
        u = us[m]
        z = cs[m]
        ku = k * u
        kv = k * v
        mu_u = ku.sum()
        mu_v = kv.sum()
        suu = (ku * u).sum()
        svv = (kv * v).sum()
        suv = (ku * v).sum()
        # centered second-moment matrix decides plane vs mean fallback
        a = suu - mu_u * mu_u
        b = suv - mu_u * mu_v
        d = svv - mu_v * mu_v
        tr = a + d
        disc = math.sqrt(max((a - d) ** 2 / 4.0 + b * b, 0.0))
        lam_min = tr / 2.0 - disc
        lam_max = tr / 2.0 + disc
        t0w = (k * z).sum()
        if lam_min <= _RANK_RTOL * max(lam_max, 1e-300):
            values[i] = t0w
            fallbacks[i] = 0
            continue
        t1 = (ku * z).sum()
        t2 = (kv * z).sum()
        M = np.array([[1.0, mu_u, mu_v],
                      [mu_u, suu, suv],
                      [mu_v, suv, svv]])
        rhs = np.array([t0w, t1, t2])
        try:
            beta = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError:
            values[i] = t0w
            fallbacks[i] = 0
            continue
        values[i] = beta[0]
    return values, fallbacks


def local_bilinear_2d(s, t, c, bandwidths, eval_grid_s, eval_grid_t=None,
                      weights=None,
                      kernel: KernelSpec = DEFAULT_KERNEL) -> Surface:
    """Local plane smoother for scattered surface data.

    Fits ``c ~ intercept + slope_s * (s - s0) + slope_t * (t - t0)`` by
    weighted least squares with a product Gaussian kernel at every node of
    ``eval_grid_s x eval_grid_t``; the intercept is the surface value.
    Rank-deficient nodes degrade to a locally weighted mean and are listed
    in ``meta["fallbacks"]``.

    Parameters
    ----------
    s, t, c : array_like
        Coordinates and values of the scattered points.
    bandwidths : float or (float, float) or BandwidthSpec
        Bandwidth per axis; a scalar is shared by both axes.
    eval_grid_s, eval_grid_t : array_like
        Evaluation grids (``eval_grid_t`` defaults to ``eval_grid_s``).
    """
    s = np.asarray(s, dtype=float).ravel()
    t = np.asarray(t, dtype=float).ravel()
    c = np.asarray(c, dtype=float).ravel()
    if not (s.size == t.size == c.size):
        raise ConfigError("s, t and c must have equal length")
    if weights is None:
        w = np.ones_like(c)
    else:
        w = np.asarray(weights, dtype=float).ravel()
        if w.size != c.size:
            raise ConfigError("weights must match the number of points")
        if np.any(w < 0):
            raise ConfigError("weights must be nonnegative")
    h1, h2 = _as_bandwidth(bandwidths, 2)
    gs = np.asarray(eval_grid_s, dtype=float).ravel()
    gt = gs if eval_grid_t is None else np.asarray(eval_grid_t, dtype=float).ravel()

    pairs = [(s0, t0) for s0 in gs for t0 in gt]
    vals, fb = _planefit_at(s, t, c, w, h1, h2, pairs, kernel)
    meta = {}
    if fb:
        meta["fallbacks"] = [
            {"point": [float(pairs[i][0]), float(pairs[i][1])], "degree": d}
            for i, d in sorted(fb.items())
        ]
    return Surface(gs, gt, vals.reshape(gs.size, gt.size), meta)


def local_plane_at(s, t, c, bandwidths, points, weights=None,
                   kernel: KernelSpec = DEFAULT_KERNEL) -> np.ndarray:
    """Local plane fit at arbitrary (s0, t0) pairs (used on diagonals)."""
    s = np.asarray(s, dtype=float).ravel()
    t = np.asarray(t, dtype=float).ravel()
    c = np.asarray(c, dtype=float).ravel()
    if weights is None:
        w = np.ones_like(c)
    else:
        w = np.asarray(weights, dtype=float).ravel()
    h1, h2 = _as_bandwidth(bandwidths, 2)
    pairs = [(float(p[0]), float(p[1])) for p in np.asarray(points, dtype=float)]
    vals, _ = _planefit_at(s, t, c, w, h1, h2, pairs, kernel)
    return vals


# ---------------------------------------------------------------------------
# Measurement-error variance from the smoothed diagonal
# ---------------------------------------------------------------------------


@dataclass
class Sigma2Estimate:
    """Measurement-error variance estimate with clamp diagnostics.

    ``raw_value`` keeps the pre-floor average; ``clamped`` is True when the
    average was negative and floored at zero.  ``variance_curve`` is the
    locally quadratic fit of squared residuals (process + error variance).
    """

    value: float
    clamped: bool
    raw_value: float
    variance_curve: Curve
    interval: tuple[float, float]

    def __float__(self) -> float:
        return self.value


def estimate_sigma2(points_by_subject, mean_curve: Curve, cov_surface: Surface,
                    bandwidth, kernel: KernelSpec = DEFAULT_KERNEL,
                    center_fraction: float = 0.5) -> Sigma2Estimate:
    """Measurement-error variance from diagonal raw variances.

    Squared residuals ``(y - mean(t))**2`` estimate process variance plus
    error variance; a local quadratic fit of them gives ``V(t)``, and the
    average of ``V(t) - C(t, t)`` over the central ``center_fraction`` of
    the window, floored at zero, estimates the error variance.

    Parameters
    ----------
    points_by_subject : mapping or (t, y) arrays
        Either ``{subject: (times, values)}`` or already pooled arrays.
    mean_curve : Curve
        Smoothed mean function.
    cov_surface : Surface
        Smoothed covariance surface (diagonal excluded from its raw input).
    bandwidth : float
        Bandwidth for the diagonal local quadratic fit.
    """
    if isinstance(points_by_subject, Mapping):
        ts = np.concatenate([np.asarray(v[0], dtype=float)
                             for v in points_by_subject.values()])
        ys = np.concatenate([np.asarray(v[1], dtype=float)
                             for v in points_by_subject.values()])
    else:
        ts, ys = (np.asarray(a, dtype=float).ravel() for a in points_by_subject)
    resid2 = (ys - mean_curve(ts)) ** 2

    grid = cov_surface.grid_s
    var_curve = local_quadratic_1d(ts, resid2, bandwidth, grid, kernel=kernel)

    lo, hi = grid[0], grid[-1]
    margin = (1.0 - center_fraction) / 2.0
    a = lo + margin * (hi - lo)
    b = hi - margin * (hi - lo)
    central = (grid >= a - 1e-12) & (grid <= b + 1e-12)
    if not np.any(central):
        raise ConfigError("no grid points in the central averaging window")
    diff = var_curve.values[central] - np.diagonal(cov_surface.values)[central]
    raw = float(diff.mean())
    clamped = raw < 0.0
    return Sigma2Estimate(
        value=0.0 if clamped else raw,
        clamped=clamped,
        raw_value=raw,
        variance_curve=var_curve,
        interval=(float(a), float(b)),
    )


# ---------------------------------------------------------------------------
# Cross-validated bandwidth selection (subjects partitioned, one-SE rule)
# ---------------------------------------------------------------------------


def cv_bandwidth(points_by_subject: Mapping, candidates: Sequence[float], *,
                 folds: int = 10, seed: int = 0,
                 kernel: KernelSpec = DEFAULT_KERNEL) -> BandwidthSpec:
    """Pick a bandwidth by k-fold cross validation over subjects.

    Subjects (never individual observations) are partitioned into ``folds``
    groups; for each candidate the held-out squared prediction error is
    averaged per fold.  Selection follows the one-standard-error rule: among
    candidates whose mean error is within one standard error (of the
    minimizing candidate's fold errors) of the minimum, the largest --
    smoothest -- bandwidth wins.

    Parameters
    ----------
    points_by_subject : mapping
        ``{subject: (t, y)}`` for curve smoothing, or
        ``{subject: (coords, c)}`` with ``coords`` of shape (m, 2) for
        surface smoothing (the candidate is then used on both axes).
    candidates : sequence of float
        Bandwidths to try; order does not matter.

    Returns
    -------
    BandwidthSpec
        Selected bandwidth with the CV table attached as ``selection``.
    """
    subjects = sorted(points_by_subject)
    if len(subjects) < folds:
        raise ConfigError(
            f"need at least {folds} subjects for {folds}-fold CV, "
            f"got {len(subjects)}"
        )
    cands = sorted(float(h) for h in candidates)
    if not cands:
        raise ConfigError("no candidate bandwidths")

    first = points_by_subject[subjects[0]]
    coords0 = np.asarray(first[0], dtype=float)
    two_d = coords0.ndim == 2

    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(subjects))
    fold_of = np.empty(len(subjects), dtype=int)
    for f, chunk in enumerate(np.array_split(perm, folds)):
        fold_of[chunk] = f

    packed = []
    for sid in subjects:
        xy = points_by_subject[sid]
        packed.append((np.asarray(xy[0], dtype=float), np.asarray(xy[1], dtype=float)))

    fold_errors = np.full((len(cands), folds), np.nan)
    for f in range(folds):
        tr = [packed[i] for i in range(len(subjects)) if fold_of[i] != f]
        te = [packed[i] for i in range(len(subjects)) if fold_of[i] == f]
        if not te or not tr:
            continue
        tr_x = np.concatenate([p[0] for p in tr])
        tr_y = np.concatenate([p[1] for p in tr])
        te_x = np.concatenate([p[0] for p in te])
        te_y = np.concatenate([p[1] for p in te])
        for ci, h in enumerate(cands):
            try:
                if two_d:
                    pred = local_plane_at(tr_x[:, 0], tr_x[:, 1], tr_y,
                                          (h, h), te_x, kernel=kernel)
                else:
                    pred = local_linear_at(tr_x, tr_y, h, te_x, kernel=kernel)
            except LocalRankError:
                continue
            fold_errors[ci, f] = float(np.mean((pred - te_y) ** 2))

    valid = ~np.any(np.isnan(fold_errors), axis=1)
    if not np.any(valid):
        raise NoValidBandwidthError(
            "every candidate bandwidth failed in at least one CV fold"
        )
    means = np.where(valid, np.nanmean(fold_errors, axis=1), np.inf)
    stds = np.where(
        valid,
        np.nanstd(fold_errors, axis=1, ddof=1) / math.sqrt(folds),
        np.inf,
    )
    i_min = int(np.argmin(means))
    # small absolute guard keeps the rule stable when all errors are ~0
    thr = means[i_min] + stds[i_min] + 1e-12 * (1.0 + abs(means[i_min]))
    chosen = max(h for ci, h in enumerate(cands) if valid[ci] and means[ci] <= thr)

    sel = CvSelection(
        candidates=tuple(cands),
        mean_errors=tuple(float(m) for m in means),
        std_errors=tuple(float(sd) for sd in stds),
        folds=folds,
        seed=seed,
    )
    vals = (chosen, chosen) if two_d else (chosen,)
    return BandwidthSpec(vals, selection=sel)


# ---------------------------------------------------------------------------
# Kernel density estimation
# ---------------------------------------------------------------------------


def kde_1d(values, bandwidth="silverman", grid_size: int = 512,
           span_bandwidths: float = 4.0) -> Curve:
    """Gaussian kernel density estimate on an automatic grid.

    The grid spans the data range extended by ``span_bandwidths`` bandwidths
    on each side so that the trapezoid integral of the density is 1 within
    1e-3 without renormalization.

    Parameters
    ----------
    values : array_like
        Sample values (at least 2, nondegenerate).
    bandwidth : float or {"silverman", "scott"}
        Fixed bandwidth or an automatic rule.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 2:
        raise DegenerateScalarError("kde needs at least 2 values")
    sd = float(np.std(v, ddof=1))
    if sd == 0.0:
        raise DegenerateScalarError(
            "kde input has zero variance; report a point mass instead"
        )
    if isinstance(bandwidth, str):
        n = v.size
        if bandwidth == "silverman":
            iqr = float(np.subtract(*np.percentile(v, [75, 25])))
            scale = min(sd, iqr / 1.34) if iqr > 0 else sd
            h = 0.9 * scale * n ** (-0.2)
        elif bandwidth == "scott":
            h = 1.06 * sd * n ** (-0.2)
        else:
            raise ConfigError(f"unknown bandwidth rule {bandwidth!r}")
    else:
        h = float(bandwidth)
        if not h > 0:
            raise ConfigError("kde bandwidth must be positive")

    lo = v.min() - span_bandwidths * h
    hi = v.max() + span_bandwidths * h
    grid = np.linspace(lo, hi, grid_size)
    u = (grid[:, None] - v[None, :]) / h
    dens = (_INV_SQRT_2PI * np.exp(-0.5 * u * u)).mean(axis=1) / h
    return Curve(grid, dens, {"bandwidth": float(h), "n": int(v.size)})
