"""Functional concurrent regression with varying coefficients.

At every grid time t the coefficient vector solves a small linear system
whose matrix holds the covariances among the covariates evaluated
concurrently — functional auto- and cross-covariances on their diagonal
(s = t), function-to-scalar cross-covariance curves, and plain
scalar-to-scalar covariances — and whose right side holds the covariances
of the response with each covariate.  Ill-conditioned systems get a small
relative ridge; systems that stay singular leave NaN coefficients at that
t and the fit continues.  Bootstrap bands re-estimate everything (means,
covariances, solves) on each subject resample.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ._boot import (
    DEFAULT_LEVELS,
    bracket_bands,
    drawn_with_names,
    percentile_bands,
    run_replicates,
)
from .crosscorr import crosscov_fs
from .datamodel import SparseFunctionalSample
from .errors import (
    AlignmentError,
    AssemblyError,
    ConfigError,
    DegenerateScalarError,
    DegenerateVarianceError,
    GridMismatchError,
)
from .fpca import raw_covariance_pairs
from .kernelsmooth import (
    DEFAULT_KERNEL,
    Curve,
    KernelSpec,
    default_grid,
    local_linear_1d,
    local_plane_at,
)

DEFAULT_COND_LIMIT = 1e10
RIDGE_SCALE = 1e-8


@dataclass
class FcrSpec:
    """Data and estimation settings for one concurrent regression.

    Exactly one of ``response_sample`` (functional response) or
    ``response_scalar`` (per-subject scalar treated as a constant-in-time
    function) must be given.  Functional covariates must share one
    observation window; subjects enter the fit only when they carry the
    response and every covariate (complete cases).
    """

    functional: Sequence[SparseFunctionalSample] = ()
    scalars: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    response_sample: SparseFunctionalSample | None = None
    response_scalar: Mapping[str, float] | None = None
    response_name: str = "response"
    grid: np.ndarray | None = None
    grid_size: int = 51
    bandwidth_mean: float = 2.0
    bandwidth_cov: float = 2.0
    bandwidth_cross: float = 2.0
    ridge: float = 0.0
    cond_limit: float = DEFAULT_COND_LIMIT
    standardize: bool = False
    kernel: KernelSpec = field(default_factory=lambda: DEFAULT_KERNEL)

    def __post_init__(self):
        if (self.response_sample is None) == (self.response_scalar is None):
            raise ConfigError(
                "exactly one of response_sample/response_scalar is required"
            )
        if len(self.functional) + len(self.scalars) < 1:
            raise ConfigError("at least one covariate is required")
        if self.ridge < 0:
            raise ConfigError("ridge must be nonnegative")
        names = [s.variable_name for s in self.functional]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate functional covariate names: {names}")
        clash = set(names) & set(self.scalars)
        if clash:
            raise ConfigError(f"names used both ways: {sorted(clash)}")
        windows = {s.window for s in self.functional}
        if self.response_sample is not None:
            windows.add(self.response_sample.window)
            self.response_name = self.response_sample.variable_name
        if len(windows) > 1:
            raise ConfigError(
                f"concurrent model needs one common window, got {sorted(windows)}"
            )
        if self.grid is None:
            if not windows:
                raise ConfigError(
                    "a grid is required when all covariates are scalar"
                )
            lo, hi = next(iter(windows))
            self.grid = default_grid(lo, hi, self.grid_size)
        else:
            self.grid = np.asarray(self.grid, dtype=float)

    @property
    def functional_names(self) -> list[str]:
        return [s.variable_name for s in self.functional]

    @property
    def scalar_names(self) -> list[str]:
        return list(self.scalars)

    def aligned_ids(self) -> list[str]:
        """Subjects carrying the response and every covariate."""
        if self.response_sample is not None:
            ids = list(self.response_sample.subject_ids)
        else:
            ids = sorted(self.response_scalar)
        for s in self.functional:
            ids = [i for i in ids if i in s.data]
        for vals in self.scalars.values():
            ids = [i for i in ids if i in vals]
        if not ids:
            raise AlignmentError(
                "no subject carries the response and every covariate"
            )
        return ids


def _cross_pairs(sample1, mean1: Curve, sample2, mean2: Curve):
    """Raw cross products over all within-subject time pairs (shared ids)."""
    ss, tt, cc = [], [], []
    for sid, (t1, y1) in sample1.data.items():
        if sid not in sample2.data:
            continue
        t2, y2 = sample2.data[sid]
        r1 = y1 - mean1(t1)
        r2 = y2 - mean2(t2)
        ss.append(np.repeat(t1, t2.size))
        tt.append(np.tile(t2, t1.size))
        cc.append(np.repeat(r1, t2.size) * np.tile(r2, t1.size))
    if not ss:
        return None
    return np.concatenate(ss), np.concatenate(tt), np.concatenate(cc)


@dataclass
class FcrComponents:
    """Covariance pieces of the pointwise system, evaluated on the grid.

    Functional entries are diagonal evaluations C(t, t); scalar-scalar
    entries are plain covariances.  Any entry may be absent (estimation
    failed or never attempted); assembling a system that needs it raises
    :class:`AssemblyError` naming the pair.
    """

    grid: np.ndarray
    f_names: list[str]
    s_names: list[str]
    response_name: str
    mean_y: np.ndarray                       # (m,) original scale
    means_f: dict[str, np.ndarray]           # (m,) each
    means_s: dict[str, float]
    cxx: dict[tuple[str, str], np.ndarray]   # diagonal C_{Xr,Xs}(t,t)
    cxz: dict[tuple[str, str], np.ndarray]   # C_{Xr,Zg}(t)
    czz: dict[tuple[str, str], float]
    bx: dict[str, np.ndarray]                # C_{Y,Xr}(t,t)
    bz: dict[str, np.ndarray]                # C_{Y,Zg}(t)

    def _lookup(self, table, a: str, b: str):
        hit = table.get((a, b), table.get((b, a)))
        if hit is None:
            raise AssemblyError((a, b))
        return hit

    def cov_ff(self, r: str, s: str) -> np.ndarray:
        return self._lookup(self.cxx, r, s)

    def cov_fs(self, r: str, g: str) -> np.ndarray:
        return self._lookup(self.cxz, r, g)

    def cov_ss(self, g: str, h: str) -> float:
        return self._lookup(self.czz, g, h)

    def response_cov(self, name: str) -> np.ndarray:
        table = self.bx if name in self.f_names else self.bz
        hit = table.get(name)
        if hit is None:
            raise AssemblyError((self.response_name, name))
        return hit

    def scale_f(self, r: str) -> np.ndarray:
        diag = self.cov_ff(r, r)
        bad = np.nonzero(diag <= 0)[0]
        if bad.size:
            i = int(bad[0])
            raise DegenerateVarianceError(f"{r} at t={self.grid[i]!r}",
                                          float(diag[i]))
        return np.sqrt(diag)

    def sd_s(self, g: str) -> float:
        v = self.cov_ss(g, g)
        if v <= 0:
            raise DegenerateVarianceError(g, float(v))
        return float(np.sqrt(v))

    def matrix_paths(self, standardize: bool
                     ) -> tuple[np.ndarray, np.ndarray]:
        """Stacked A(t) and b(t) for all t: shapes (m, d, d) and (m, d)."""
        f, s = self.f_names, self.s_names
        d = len(f) + len(s)
        m = self.grid.size
        ones = np.ones(m)
        if standardize:
            scales = [self.scale_f(r) for r in f] + [self.sd_s(g) * ones
                                                     for g in s]
        else:
            scales = [ones] * d

        A = np.empty((m, d, d))
        b = np.empty((m, d))
        names = f + s
        for i, a_name in enumerate(names):
            for j in range(i, d):
                b_name = names[j]
                if i < len(f) and j < len(f):
                    entry = self.cov_ff(a_name, b_name)
                elif i < len(f) <= j:
                    entry = self.cov_fs(a_name, b_name)
                else:
                    entry = self.cov_ss(a_name, b_name) * ones
                entry = entry / (scales[i] * scales[j])
                A[:, i, j] = entry
                A[:, j, i] = entry
            b[:, i] = self.response_cov(a_name) / scales[i]
        return A, b


def fcr_components(spec: FcrSpec, ids: Sequence[str] | None = None
                   ) -> FcrComponents:
    """Estimate every covariance piece the pointwise systems will need."""
    if ids is None:
        ids = spec.aligned_ids()
    grid = spec.grid
    m = grid.size
    diag_pts = np.column_stack([grid, grid])
    kern = spec.kernel
    h_cov = (spec.bandwidth_cov, spec.bandwidth_cov)

    subs = {s.variable_name: s.subset(ids) for s in spec.functional}
    means_f = {
        name: local_linear_1d(*sub.pooled(), spec.bandwidth_mean, grid,
                              kernel=kern)
        for name, sub in subs.items()
    }
    zvals = {g: {i: float(vals[i]) for i in ids}
             for g, vals in spec.scalars.items()}
    means_s = {g: float(np.mean([zv[i] for i in ids]))
               for g, zv in zvals.items()}

    cxx: dict[tuple[str, str], np.ndarray] = {}
    for name, sub in subs.items():
        s_, t_, c_ = raw_covariance_pairs(sub, means_f[name])
        cxx[(name, name)] = local_plane_at(s_, t_, c_, h_cov, diag_pts,
                                           kernel=kern)
    f_names = spec.functional_names
    for i, r in enumerate(f_names):
        for s in f_names[i + 1:]:
            pairs = _cross_pairs(subs[r], means_f[r], subs[s], means_f[s])
            if pairs is None:
                continue
            cxx[(r, s)] = local_plane_at(*pairs, h_cov, diag_pts, kernel=kern)

    cxz: dict[tuple[str, str], np.ndarray] = {}
    for r in f_names:
        for g, zv in zvals.items():
            cxz[(r, g)] = crosscov_fs(subs[r], zv, spec.bandwidth_cross,
                                      mean=means_f[r], grid=grid,
                                      kernel=kern).values

    s_names = spec.scalar_names
    czz: dict[tuple[str, str], float] = {}
    for i, g in enumerate(s_names):
        zg = np.array([zvals[g][k] for k in ids])
        for h in s_names[i:]:
            zh = np.array([zvals[h][k] for k in ids])
            czz[(g, h)] = float(np.cov(zg, zh, ddof=1)[0, 1])
        if czz[(g, g)] <= 0:
            raise DegenerateScalarError(
                f"scalar covariate {g!r} has zero variance"
            )

    bx: dict[str, np.ndarray] = {}
    bz: dict[str, np.ndarray] = {}
    if spec.response_sample is not None:
        sub_y = spec.response_sample.subset(ids)
        mean_y_curve = local_linear_1d(*sub_y.pooled(), spec.bandwidth_mean,
                                       grid, kernel=kern)
        mean_y = mean_y_curve.values
        for r in f_names:
            pairs = _cross_pairs(sub_y, mean_y_curve, subs[r], means_f[r])
            if pairs is not None:
                bx[r] = local_plane_at(*pairs, h_cov, diag_pts, kernel=kern)
        for g, zv in zvals.items():
            bz[g] = crosscov_fs(sub_y, zv, spec.bandwidth_cross,
                                mean=mean_y_curve, grid=grid,
                                kernel=kern).values
    else:
        y = np.array([float(spec.response_scalar[i]) for i in ids])
        mean_y = np.full(m, float(y.mean()))
        ymap = {i: float(spec.response_scalar[i]) for i in ids}
        for r in f_names:
            bx[r] = crosscov_fs(subs[r], ymap, spec.bandwidth_cross,
                                mean=means_f[r], grid=grid,
                                kernel=kern).values
        for g in s_names:
            zg = np.array([zvals[g][k] for k in ids])
            bz[g] = np.full(m, float(np.cov(y, zg, ddof=1)[0, 1]))

    return FcrComponents(
        grid=grid, f_names=f_names, s_names=s_names,
        response_name=spec.response_name, mean_y=mean_y,
        means_f={k: v.values for k, v in means_f.items()},
        means_s=means_s, cxx=cxx, cxz=cxz, czz=czz, bx=bx, bz=bz,
    )


def assemble_system(components, t: float, standardize: bool = False
                    ) -> tuple[np.ndarray, np.ndarray]:
    """The pointwise system (A(t), b(t)) at one grid time.

    ``components`` may be an :class:`FcrSpec` (estimated on the fly) or a
    prebuilt :class:`FcrComponents`.  ``t`` must lie on the grid.
    """
    if isinstance(components, FcrSpec):
        components = fcr_components(components)
    grid = components.grid
    idx = int(np.argmin(np.abs(grid - t)))
    if abs(grid[idx] - t) > 1e-9 * max(1.0, abs(t)):
        raise GridMismatchError(f"t={t!r} is not a grid point")
    A, b = components.matrix_paths(standardize)
    return A[idx], b[idx]


@dataclass
class FcrFit:
    """Pointwise-solved coefficient paths with solve diagnostics."""

    grid: np.ndarray
    f_names: list[str]
    s_names: list[str]
    response_name: str
    coef_orig: dict[str, np.ndarray]
    coef_std: dict[str, np.ndarray]
    intercept: np.ndarray
    cond: np.ndarray
    ridge_used: np.ndarray
    singular: np.ndarray
    standardize: bool
    bands: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    k_boot: int = 0
    seed: int | None = None

    @property
    def names(self) -> list[str]:
        return self.f_names + self.s_names

    def coefficient(self, name: str, scale: str = "original") -> Curve:
        table = self.coef_orig if scale == "original" else self.coef_std
        if name == "intercept":
            return Curve(self.grid, self.intercept)
        return Curve(self.grid, table[name])

    def to_json_dict(self) -> dict:
        return {
            "grid": self.grid.tolist(),
            "response": self.response_name,
            "functional": list(self.f_names),
            "scalar": list(self.s_names),
            "intercept": self.intercept.tolist(),
            "coefficients": {k: v.tolist() for k, v in
                             sorted(self.coef_orig.items())},
            "coefficients_standardized": {k: v.tolist() for k, v in
                                          sorted(self.coef_std.items())},
            "cond": self.cond.tolist(),
            "ridge_used": self.ridge_used.astype(int).tolist(),
            "singular": self.singular.astype(int).tolist(),
            "standardize": self.standardize,
            "bands": {name: {k: v.tolist() for k, v in sorted(bb.items())}
                      for name, bb in sorted(self.bands.items())},
            "k_boot": self.k_boot,
            "seed": self.seed,
        }

    def csv_rows(self):
        """Long-format rows, one per (time, coefficient)."""
        header = ["time", "coefficient", "estimate", "std_estimate",
                  "cond", "ridge_used", "singular",
                  "lo95", "lo50", "hi50", "hi95"]
        yield tuple(header)
        names = ["intercept"] + self.names
        for it, t in enumerate(self.grid.tolist()):
            for name in names:
                est = (self.intercept[it] if name == "intercept"
                       else self.coef_orig[name][it])
                std = ("" if name == "intercept"
                       else float(self.coef_std[name][it]))
                bb = self.bands.get(name, {})
                row = [t, name, float(est), std, float(self.cond[it]),
                       int(self.ridge_used[it]), int(self.singular[it])]
                for key in ("lo95", "lo50", "hi50", "hi95"):
                    row.append(float(bb[key][it]) if key in bb else "")
                yield tuple(row)


def _solve_paths(components: FcrComponents, spec: FcrSpec
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Solve every pointwise system; returns (coef, cond, ridge_used, singular).

    ``coef`` is on the scale the system was assembled on.
    """
    A, b = components.matrix_paths(spec.standardize)
    m, d, _ = A.shape
    coef = np.full((m, d), np.nan)
    cond = np.full(m, np.nan)
    ridge_used = np.zeros(m, dtype=bool)
    singular = np.zeros(m, dtype=bool)
    eye = np.eye(d)
    for it in range(m):
        Ai = A[it]
        if not np.all(np.isfinite(Ai)) or not np.all(np.isfinite(b[it])):
            singular[it] = True
            continue
        try:
            c = np.linalg.cond(Ai)
        except np.linalg.LinAlgError:
            c = np.inf
        cond[it] = c
        eps = spec.ridge
        if not np.isfinite(c) or c > spec.cond_limit:
            eps += RIDGE_SCALE * np.trace(Ai) / d
            ridge_used[it] = True
        try:
            x = np.linalg.solve(Ai + eps * eye, b[it])
        except np.linalg.LinAlgError:
            singular[it] = True
            continue
        if not np.all(np.isfinite(x)):
            singular[it] = True
            continue
        coef[it] = x
    return coef, cond, ridge_used, singular


def solve_fcr(spec: FcrSpec, components: FcrComponents | None = None
              ) -> FcrFit:
    """Fit the concurrent regression on ``spec.grid``.

    Coefficients are reported on the original scale and, when the
    covariate's variance path allows it, on the standardized scale
    (per-SD effects).  The intercept path is recovered on the original
    scale from the fitted means.
    """
    if components is None:
        components = fcr_components(spec)
    coef, cond, ridge_used, singular = _solve_paths(components, spec)
    f, s = components.f_names, components.s_names
    names = f + s
    m = components.grid.size

    def scale_or_nan(name: str, i: int) -> np.ndarray:
        if i < len(f):
            diag = components.cov_ff(name, name)
            with np.errstate(invalid="ignore"):
                out = np.where(diag > 0, np.sqrt(np.maximum(diag, 0)), np.nan)
            return out
        return np.full(m, components.sd_s(name))

    coef_orig: dict[str, np.ndarray] = {}
    coef_std: dict[str, np.ndarray] = {}
    for i, name in enumerate(names):
        path = coef[:, i]
        if spec.standardize:
            sc = (components.scale_f(name) if i < len(f)
                  else np.full(m, components.sd_s(name)))
            coef_std[name] = path
            coef_orig[name] = path / sc
        else:
            coef_orig[name] = path
            with np.errstate(invalid="ignore"):
                coef_std[name] = path * scale_or_nan(name, i)

    intercept = components.mean_y.copy()
    for name in f:
        intercept = intercept - coef_orig[name] * components.means_f[name]
    for name in s:
        intercept = intercept - coef_orig[name] * components.means_s[name]

    return FcrFit(
        grid=components.grid, f_names=list(f), s_names=list(s),
        response_name=components.response_name,
        coef_orig=coef_orig, coef_std=coef_std, intercept=intercept,
        cond=cond, ridge_used=ridge_used, singular=singular,
        standardize=spec.standardize,
    )


def _resample_spec(spec: FcrSpec, ids: Sequence[str],
                   rng: np.random.Generator) -> FcrSpec:
    pairs = drawn_with_names(ids, rng)

    def remap_sample(sample: SparseFunctionalSample) -> SparseFunctionalSample:
        return SparseFunctionalSample(
            sample.variable_name, sample.window,
            {nid: sample.data[sid] for nid, sid in pairs},
        )

    def remap_values(vals: Mapping[str, float]) -> dict[str, float]:
        return {nid: float(vals[sid]) for nid, sid in pairs}

    return dataclasses.replace(
        spec,
        functional=[remap_sample(s) for s in spec.functional],
        scalars={g: remap_values(v) for g, v in spec.scalars.items()},
        response_sample=(None if spec.response_sample is None
                         else remap_sample(spec.response_sample)),
        response_scalar=(None if spec.response_scalar is None
                         else remap_values(spec.response_scalar)),
    )


def fcr_bootstrap(spec: FcrSpec, k_boot: int = 1000, seed: int = 0, *,
                  threads: int = 1, levels: Sequence[int] = DEFAULT_LEVELS,
                  fit: FcrFit | None = None) -> FcrFit:
    """Attach subject-resampled percentile bands to a concurrent fit.

    Every replicate re-estimates the full chain (means, covariance
    components, pointwise solves) on a with-replacement subject resample.
    Bands are percentile intervals on the original coefficient scale,
    widened where needed to bracket the point estimate.
    """
    if fit is None:
        fit = solve_fcr(spec)
    ids = spec.aligned_ids()
    names = ["intercept"] + fit.names
    m = fit.grid.size

    def replicate(_r: int, rng: np.random.Generator) -> np.ndarray:
        rspec = _resample_spec(spec, ids, rng)
        rfit = solve_fcr(rspec, fcr_components(rspec, rspec.aligned_ids()))
        cols = [rfit.intercept] + [rfit.coef_orig[n] for n in fit.names]
        return np.concatenate(cols)

    reps = run_replicates(replicate, k_boot, seed, threads=threads)
    bands: dict[str, dict[str, np.ndarray]] = {}
    for j, name in enumerate(names):
        block = reps[:, j * m:(j + 1) * m]
        est = fit.intercept if name == "intercept" else fit.coef_orig[name]
        bands[name] = bracket_bands(percentile_bands(block, levels), est,
                                    levels)
    fit.bands = bands
    fit.k_boot = k_boot
    fit.seed = seed
    return fit
