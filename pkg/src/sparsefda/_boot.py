"""Shared machinery for subject-resampling bootstraps.

Every bootstrap in the package follows the same shape: spawn one RNG
stream per replicate from a master seed (so results are independent of
thread count and execution order), resample subject ids with replacement,
refit, and summarize the replicate matrix with percentile bands.  Failed
replicates are tolerated up to a fraction of the total, after which a
:class:`BootstrapInstabilityError` is raised.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

from .errors import BootstrapInstabilityError, SparseFdaError

DEFAULT_LEVELS = (50, 95)
MAX_FAILURE_FRACTION = 0.05


def spawn_generators(seed: int, n: int) -> list[np.random.Generator]:
    """One independent generator per replicate, derived from ``seed``."""
    return [np.random.Generator(np.random.PCG64(s))
            for s in np.random.SeedSequence(seed).spawn(n)]


def run_replicates(fn: Callable[[int, np.random.Generator], np.ndarray],
                   k_boot: int, seed: int, threads: int = 1,
                   max_failure_fraction: float = MAX_FAILURE_FRACTION,
                   ) -> np.ndarray:
    """Evaluate ``fn(r, rng)`` for r in [0, k_boot) and stack the results.

    ``fn`` may raise package errors, ``np.linalg.LinAlgError``, or
    ``FloatingPointError``; such replicates are dropped.  If more than
    ``max_failure_fraction`` of replicates fail, the whole bootstrap is
    declared unstable.  Results are ordered by replicate index regardless
    of thread count.
    """
    rngs = spawn_generators(seed, k_boot)
    tolerated = (SparseFdaError, np.linalg.LinAlgError, FloatingPointError,
                 ZeroDivisionError)

    def one(r: int):
        try:
            return np.asarray(fn(r, rngs[r]), dtype=float)
        except tolerated as exc:  # noqa: PERF203 - per-replicate isolation
            return exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(k_boot)))
    else:
        results = [one(r) for r in range(k_boot)]

    rows = [r for r in results if not isinstance(r, Exception)]
    failures = [r for r in results if isinstance(r, Exception)]
    if len(failures) > max_failure_fraction * k_boot:
        raise BootstrapInstabilityError(len(failures), k_boot,
                                        last_error=str(failures[-1]))
    return np.vstack(rows)


def percentile_bands(replicates: np.ndarray,
                     levels: Sequence[int] = DEFAULT_LEVELS,
                     ) -> dict[str, np.ndarray]:
    """Pointwise percentile bands, keyed ``lo<level>``/``hi<level>``.

    ``replicates`` is (R, m); columns with any NaN (e.g. grid points where
    a replicate's solve was singular) use only their finite entries.
    """
    out: dict[str, np.ndarray] = {}
    for lv in levels:
        half = (100 - lv) / 2.0
        with np.errstate(invalid="ignore"):
            out[f"lo{lv}"] = np.nanpercentile(replicates, half, axis=0)
            out[f"hi{lv}"] = np.nanpercentile(replicates, 100 - half, axis=0)
    return out


def bracket_bands(bands: dict[str, np.ndarray], estimate: np.ndarray,
                  levels: Sequence[int] = DEFAULT_LEVELS) -> dict[str, np.ndarray]:
    """Widen percentile bands so each interval contains the point estimate."""
    out = dict(bands)
    for lv in levels:
        out[f"lo{lv}"] = np.fmin(bands[f"lo{lv}"], estimate)
        out[f"hi{lv}"] = np.fmax(bands[f"hi{lv}"], estimate)
    return out


def two_sided_pvalue(replicates: np.ndarray) -> float:
    """Two-sided bootstrap p-value for H0: parameter = 0.

    Continuity-corrected tail counts: ``2 * min((#{b <= 0}+1)/(B+1),
    (#{b >= 0}+1)/(B+1))``, capped at 1.
    """
    b = np.asarray(replicates, dtype=float).ravel()
    b = b[np.isfinite(b)]
    n = b.size
    if n == 0:
        return float("nan")
    lo = (np.count_nonzero(b <= 0) + 1) / (n + 1)
    hi = (np.count_nonzero(b >= 0) + 1) / (n + 1)
    return float(min(1.0, 2.0 * min(lo, hi)))


def drawn_with_names(ids: Sequence[str], rng: np.random.Generator
                     ) -> list[tuple[str, str]]:
    """Resample ids with replacement as (new_id, source_id) pairs.

    Duplicated draws get distinct ``#k`` suffixes so that resampled
    samples and scalar maps built from the same draw stay aligned.
    """
    idx = rng.integers(0, len(ids), size=len(ids))
    seen: dict[str, int] = {}
    out: list[tuple[str, str]] = []
    for i in idx:
        sid = ids[i]
        k = seen.get(sid, 0)
        seen[sid] = k + 1
        out.append((sid if k == 0 else f"{sid}#{k}", sid))
    return out
