"""Cross-covariances and correlations for functional and scalar variables.

Function-to-function cross-covariance smooths raw residual products over
all within-subject time pairs — unlike the autocovariance there is no
diagonal exclusion, because measurement errors are independent across
variables.  Function-to-scalar cross-covariance smooths products of
functional residuals with the centered scalar.  Correlation surfaces and
trajectories standardize by the fitted diagonal variances, clamping to
[-1, 1] with flags (smoothing noise routinely overshoots near the
boundary) rather than erroring.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._boot import (
    DEFAULT_LEVELS,
    bracket_bands,
    drawn_with_names,
    percentile_bands,
    run_replicates,
)
from .datamodel import SparseFunctionalSample
from .errors import (
    AlignmentError,
    ConfigError,
    DegenerateScalarError,
    DegenerateVarianceError,
)
from .kernelsmooth import (
    DEFAULT_KERNEL,
    Curve,
    KernelSpec,
    Surface,
    default_grid,
    local_bilinear_2d,
    local_linear_1d,
)

DEFAULT_CROSS_BANDWIDTH = 2.0


def _norm_bandwidths(bandwidths) -> tuple[float, float]:
    if np.isscalar(bandwidths):
        h = float(bandwidths)
        return (h, h)
    vals = tuple(float(v) for v in bandwidths)
    if len(vals) == 1:
        return (vals[0], vals[0])
    if len(vals) != 2:
        raise ConfigError("bandwidths must be a scalar or a pair")
    return vals


def _variance_curve(moments) -> Curve:
    """Accept SmoothedMoments (duck-typed via diag_curve) or a Curve."""
    if hasattr(moments, "diag_curve"):
        return moments.diag_curve()
    if isinstance(moments, Curve):
        return moments
    raise ConfigError(
        "expected smoothed moments or a variance curve, got "
        f"{type(moments).__name__}"
    )


def _positive_diag(curve: Curve, grid: np.ndarray, axis_name: str) -> np.ndarray:
    v = curve(grid)
    bad = np.nonzero(v <= 0)[0]
    if bad.size:
        i = int(bad[0])
        raise DegenerateVarianceError(f"{axis_name}={grid[i]!r}", float(v[i]))
    return v


def scalar_variance(values) -> float:
    """Unbiased sample variance of a scalar covariate."""
    z = np.asarray(list(values.values()) if isinstance(values, Mapping)
                   else values, dtype=float)
    if z.size < 2:
        raise DegenerateScalarError("scalar needs at least two subjects")
    v = float(np.var(z, ddof=1))
    if v <= 0:
        raise DegenerateScalarError("scalar has zero sample variance")
    return v


# ---------------------------------------------------------------------------
# Function-to-function
# ---------------------------------------------------------------------------


@dataclass
class CrossCovSurface:
    """Smoothed cross-covariance of two functional variables.

    Generally asymmetric: the value at (s, t) couples the first variable
    at time s with the second at time t.
    """

    surface: Surface
    name_s: str
    name_t: str
    bandwidths: tuple[float, float]
    include_diagonal: bool = True
    n_pairs: int = 0

    def __call__(self, s, t):
        return self.surface(s, t)

    @property
    def grid_s(self) -> np.ndarray:
        return self.surface.grid_s

    @property
    def grid_t(self) -> np.ndarray:
        return self.surface.grid_t

    def to_json_dict(self) -> dict:
        d = self.surface.to_json_dict()
        d.update(variable_s=self.name_s, variable_t=self.name_t,
                 bandwidths=list(self.bandwidths),
                 include_diagonal=self.include_diagonal,
                 n_pairs=self.n_pairs)
        return d

    def csv_rows(self) -> Iterable[tuple[float, float, float]]:
        return self.surface.csv_rows()


def crosscov_ff(sample1: SparseFunctionalSample,
                sample2: SparseFunctionalSample,
                bandwidths=DEFAULT_CROSS_BANDWIDTH, *,
                mean1: Curve | None = None, mean2: Curve | None = None,
                mean_bandwidth: float | None = None,
                grid_size: int = 51, include_diagonal: bool = True,
                kernel: KernelSpec = DEFAULT_KERNEL) -> CrossCovSurface:
    """Smoothed cross-covariance surface of two sparse functional samples.

    Raw products (Y1_ij - mean1(T_ij)) (Y2_il - mean2(T_il)) are pooled over
    every within-subject pair (j, l) of subjects observed in both samples.
    Same-time pairs are kept by default; ``include_diagonal=False`` drops
    them, the stricter variant appropriate when the two variables share
    measurement error.  Mean curves default to pooled local linear fits on
    each full sample.
    """
    h1, h2 = _norm_bandwidths(bandwidths)
    shared = [i for i in sample1.subject_ids if i in sample2.data]
    if not shared:
        raise AlignmentError(
            f"no subject observed in both {sample1.variable_name!r} and "
            f"{sample2.variable_name!r}"
        )
    hm = mean_bandwidth if mean_bandwidth is not None else h1
    grid_s = default_grid(*sample1.window, grid_size)
    grid_t = default_grid(*sample2.window, grid_size)
    if mean1 is None:
        mean1 = local_linear_1d(*sample1.pooled(), hm, grid_s, kernel=kernel)
    if mean2 is None:
        mean2 = local_linear_1d(*sample2.pooled(), hm, grid_t, kernel=kernel)

    ss, tt, cc = [], [], []
    for sid in shared:
        t1, y1 = sample1.data[sid]
        t2, y2 = sample2.data[sid]
        r1 = y1 - mean1(t1)
        r2 = y2 - mean2(t2)
        S = np.repeat(t1, t2.size)
        T = np.tile(t2, t1.size)
        C = np.repeat(r1, t2.size) * np.tile(r2, t1.size)
        if not include_diagonal:
            keep = S != T
            S, T, C = S[keep], T[keep], C[keep]
        ss.append(S)
        tt.append(T)
        cc.append(C)
    s = np.concatenate(ss)
    t = np.concatenate(tt)
    c = np.concatenate(cc)
    if s.size == 0:
        raise AlignmentError("shared subjects contribute no cross pairs")

    surf = local_bilinear_2d(s, t, c, (h1, h2), grid_s, grid_t, kernel=kernel)
    surf.meta.update(variable_s=sample1.variable_name,
                     variable_t=sample2.variable_name)
    return CrossCovSurface(surf, sample1.variable_name, sample2.variable_name,
                           (h1, h2), include_diagonal, int(s.size))


# ---------------------------------------------------------------------------
# Function-to-scalar
# ---------------------------------------------------------------------------


def crosscov_fs(sample: SparseFunctionalSample, scalar_values: Mapping[str, float],
                bandwidth: float = DEFAULT_CROSS_BANDWIDTH, *,
                mean: Curve | None = None, mean_bandwidth: float | None = None,
                grid_size: int = 51, grid: np.ndarray | None = None,
                kernel: KernelSpec = DEFAULT_KERNEL) -> Curve:
    """Smoothed cross-covariance of a functional variable with a scalar.

    Products (Y_ij - mean(T_ij)) (Z_i - Zbar) are pooled over all subjects
    that carry both and smoothed by a local linear fit.  The returned
    curve's meta records the scalar's sample mean and variance so that
    correlation trajectories can be standardized without recomputation.
    """
    ids = [i for i in sample.subject_ids if i in scalar_values]
    if not ids:
        raise AlignmentError("no subject carries both the functional "
                             "variable and the scalar")
    z = np.array([float(scalar_values[i]) for i in ids])
    var_z = scalar_variance(z)
    zbar = float(z.mean())

    if grid is None:
        grid = default_grid(*sample.window, grid_size)
    hm = mean_bandwidth if mean_bandwidth is not None else bandwidth
    if mean is None:
        sub = sample.subset(ids)
        mean = local_linear_1d(*sub.pooled(), hm, grid, kernel=kernel)

    ts, cs = [], []
    for sid, zi in zip(ids, z):
        t, y = sample.data[sid]
        ts.append(t)
        cs.append((y - mean(t)) * (zi - zbar))
    curve = local_linear_1d(np.concatenate(ts), np.concatenate(cs),
                            float(bandwidth), grid, kernel=kernel)
    curve.meta.update(variable=sample.variable_name, bandwidth=float(bandwidth),
                      scalar_mean=zbar, scalar_variance=var_z,
                      n_subjects=len(ids))
    return curve


# ---------------------------------------------------------------------------
# Correlations
# ---------------------------------------------------------------------------


@dataclass
class CorrelationSurface:
    """Pointwise correlation surface with clamp flags."""

    surface: Surface
    clamped: np.ndarray           # boolean matrix, same shape as values
    name_s: str = ""
    name_t: str = ""

    def __call__(self, s, t):
        return self.surface(s, t)

    @property
    def values(self) -> np.ndarray:
        return self.surface.values

    def to_json_dict(self) -> dict:
        d = self.surface.to_json_dict()
        d.update(variable_s=self.name_s, variable_t=self.name_t,
                 clamped=self.clamped.astype(int).tolist())
        return d

    def csv_rows(self):
        for i, s in enumerate(self.surface.grid_s.tolist()):
            for j, t in enumerate(self.surface.grid_t.tolist()):
                yield (s, t, float(self.surface.values[i, j]),
                       int(self.clamped[i, j]))


def correlation_surface(crosscov, moments1, moments2) -> CorrelationSurface:
    """Standardize a cross-covariance by the two diagonal variances.

    R(s, t) = C12(s, t) / sqrt(C1(s, s) C2(t, t)), clamped to [-1, 1] with
    per-cell flags.  A nonpositive variance at any grid point is an error
    naming the point.
    """
    if isinstance(crosscov, CrossCovSurface):
        surf = crosscov.surface
        names = (crosscov.name_s, crosscov.name_t)
    elif isinstance(crosscov, Surface):
        surf = crosscov
        names = (str(surf.meta.get("variable_s", "")),
                 str(surf.meta.get("variable_t", "")))
    else:
        raise ConfigError("crosscov must be a CrossCovSurface or Surface")

    v1 = _positive_diag(_variance_curve(moments1), surf.grid_s, "s")
    v2 = _positive_diag(_variance_curve(moments2), surf.grid_t, "t")
    denom = np.sqrt(np.outer(v1, v2))
    raw = surf.values / denom
    clamped = np.abs(raw) > 1.0
    vals = np.clip(raw, -1.0, 1.0)
    out = Surface(surf.grid_s, surf.grid_t, vals,
                  meta={"clamp_count": int(clamped.sum())})
    return CorrelationSurface(out, clamped, *names)


@dataclass
class FsBootstrapPlan:
    """How to bootstrap a function-to-scalar correlation trajectory.

    Replicates resample subjects with replacement and re-estimate the mean
    curve, the cross-covariance curve, and the scalar variance; the
    functional variance diagonal is held at its full-sample estimate (it
    is the most expensive piece and the most stable).
    """

    sample: SparseFunctionalSample
    scalar_values: Mapping[str, float]
    k_boot: int = 200
    seed: int = 0
    bandwidth: float = DEFAULT_CROSS_BANDWIDTH
    mean_bandwidth: float | None = None
    levels: Sequence[int] = DEFAULT_LEVELS
    threads: int = 1
    kernel: KernelSpec = DEFAULT_KERNEL


@dataclass
class CorrelationTrajectory:
    """Correlation of a functional variable with a scalar, over time."""

    estimate: Curve
    clamped: np.ndarray
    bands: dict[str, np.ndarray] = field(default_factory=dict)
    k_boot: int = 0
    seed: int | None = None

    @property
    def grid(self) -> np.ndarray:
        return self.estimate.grid

    def band(self, key: str) -> np.ndarray:
        return self.bands[key]

    def to_json_dict(self) -> dict:
        d = self.estimate.to_json_dict()
        d["clamped"] = self.clamped.astype(int).tolist()
        d["bands"] = {k: v.tolist() for k, v in sorted(self.bands.items())}
        d["k_boot"] = self.k_boot
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    def csv_rows(self):
        cols = [self.grid, self.estimate.values]
        names = ["time", "correlation"]
        for key in ("lo95", "lo50", "hi50", "hi95"):
            if key in self.bands:
                cols.append(self.bands[key])
                names.append(key)
        cols.append(self.clamped.astype(int))
        names.append("clamped")
        yield tuple(names)
        for row in zip(*[np.asarray(c).tolist() for c in cols]):
            yield row


def _clamped_ratio(cross_values: np.ndarray, var_diag: np.ndarray,
                   var_z: float) -> tuple[np.ndarray, np.ndarray]:
    raw = cross_values / np.sqrt(var_diag * var_z)
    return np.clip(raw, -1.0, 1.0), np.abs(raw) > 1.0


def correlation_trajectory_fs(crosscov_curve: Curve, moments,
                              scalar_var: float,
                              plan: FsBootstrapPlan | None = None
                              ) -> CorrelationTrajectory:
    """Correlation trajectory rho(t) = C_xz(t) / sqrt(C(t,t) Var(Z)).

    With a bootstrap plan, pointwise percentile bands at the plan's levels
    are attached; bands are widened where needed so they bracket the point
    estimate.
    """
    if not scalar_var > 0:
        raise DegenerateScalarError("scalar variance must be positive")
    grid = crosscov_curve.grid
    var_diag = _positive_diag(_variance_curve(moments), grid, "t")
    rho, clamped = _clamped_ratio(crosscov_curve.values, var_diag,
                                  float(scalar_var))
    est = Curve(grid, rho, meta=dict(crosscov_curve.meta))
    traj = CorrelationTrajectory(est, clamped)

    if plan is None:
        return traj

    sample = plan.sample
    ids = [i for i in sample.subject_ids if i in plan.scalar_values]
    if not ids:
        raise AlignmentError("bootstrap plan has no usable subjects")
    zmap = {i: float(plan.scalar_values[i]) for i in ids}

    def replicate(_r: int, rng: np.random.Generator) -> np.ndarray:
        data = {}
        zstar = {}
        for nid, sid in drawn_with_names(ids, rng):
            data[nid] = sample.data[sid]
            zstar[nid] = zmap[sid]
        fsample = SparseFunctionalSample(sample.variable_name, sample.window,
                                         data)
        c_star = crosscov_fs(fsample, zstar, plan.bandwidth,
                             mean_bandwidth=plan.mean_bandwidth,
                             grid=grid, kernel=plan.kernel)
        rho_star, _ = _clamped_ratio(c_star.values, var_diag,
                                     c_star.meta["scalar_variance"])
        return rho_star

    reps = run_replicates(replicate, plan.k_boot, plan.seed,
                          threads=plan.threads)
    bands = bracket_bands(percentile_bands(reps, plan.levels), rho,
                          plan.levels)
    traj.bands = bands
    traj.k_boot = plan.k_boot
    traj.seed = plan.seed
    return traj
