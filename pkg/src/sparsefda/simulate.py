"""Synthetic sparse longitudinal cohorts with known ground truth.

Trajectories follow a truncated Karhunen-Loeve expansion: a named mean
function plus Gaussian scores on analytically orthonormal basis functions,
observed at sparse random times with iid Gaussian measurement noise.
Everything is regenerable bit-for-bit from ``(scenario, seed)``: each
subject draws from its own seed-derived stream in a fixed order, so
generation order and parallelism cannot change the data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.integrate import simpson
from scipy.special import eval_legendre

from .datamodel import (
    CategoricalSpec,
    Cohort,
    IngestSchema,
    ScalarCovariates,
    SparseFunctionalSample,
)
from .errors import ConfigError

_ORTHO_TOL = 1e-8


# ---------------------------------------------------------------------------
# Basis functions and mean forms
# ---------------------------------------------------------------------------


def basis_function(family: str, index: int, window: tuple[float, float]
                   ) -> Callable[[np.ndarray], np.ndarray]:
    """Orthonormal basis member on the window (unit L2 norm).

    Families: "sin" (half-period sine series), "cos" (cosine series, index 0
    is the constant), "fourier" (full-period sine/cosine pairs), "legendre"
    (shifted Legendre polynomials, index 0 is the constant).
    """
    lo, hi = window
    T = hi - lo
    if T <= 0:
        raise ConfigError(f"degenerate window {window!r}")
    if family == "sin":
        if index < 1:
            raise ConfigError("sin basis index starts at 1")
        w = index * math.pi / T
        return lambda t: math.sqrt(2.0 / T) * np.sin(w * (np.asarray(t, float) - lo))
    if family == "cos":
        if index < 0:
            raise ConfigError("cos basis index starts at 0")
        if index == 0:
            return lambda t: np.full_like(np.asarray(t, float), 1.0 / math.sqrt(T))
        w = index * math.pi / T
        return lambda t: math.sqrt(2.0 / T) * np.cos(w * (np.asarray(t, float) - lo))
    if family == "fourier":
        if index < 1:
            raise ConfigError("fourier basis index starts at 1")
        freq = (index + 1) // 2
        w = 2.0 * math.pi * freq / T
        if index % 2 == 1:
            return lambda t: math.sqrt(2.0 / T) * np.sin(w * (np.asarray(t, float) - lo))
        return lambda t: math.sqrt(2.0 / T) * np.cos(w * (np.asarray(t, float) - lo))
    if family == "legendre":
        if index < 0:
            raise ConfigError("legendre basis index starts at 0")
        norm = math.sqrt((2 * index + 1) / T)

        def phi(t, _k=index, _norm=norm):
            x = 2.0 * (np.asarray(t, float) - lo) / T - 1.0
            return _norm * eval_legendre(_k, x)

        return phi
    raise ConfigError(f"unknown basis family {family!r}")


@dataclass(frozen=True)
class MeanSpec:
    """Named analytic mean form (serializable to the scenario file)."""

    kind: str = "constant"
    params: tuple[float, ...] = (0.0,)

    def build(self, window) -> Callable[[np.ndarray], np.ndarray]:
        lo, _ = window
        p = self.params
        if self.kind == "constant":
            return lambda t: np.full_like(np.asarray(t, float), p[0])
        if self.kind == "affine":
            return lambda t: p[0] + p[1] * np.asarray(t, float)
        if self.kind == "saturating":
            # p = (base, gain, rate): base + gain * (1 - exp(-rate * (t - lo)))
            return lambda t: p[0] + p[1] * (
                1.0 - np.exp(-p[2] * (np.asarray(t, float) - lo))
            )
        raise ConfigError(f"unknown mean kind {self.kind!r}")

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "MeanSpec":
        kind = d.get("kind", "constant")
        if kind == "constant":
            return cls("constant", (float(d.get("value", 0.0)),))
        if kind == "affine":
            return cls("affine", (float(d["intercept"]), float(d["slope"])))
        if kind == "saturating":
            return cls("saturating",
                       (float(d["base"]), float(d["gain"]), float(d["rate"])))
        raise ConfigError(f"unknown mean kind {kind!r}")

    def to_json_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.params[0]}
        if self.kind == "affine":
            return {"kind": "affine", "intercept": self.params[0],
                    "slope": self.params[1]}
        return {"kind": "saturating", "base": self.params[0],
                "gain": self.params[1], "rate": self.params[2]}


@dataclass(frozen=True)
class KlComponent:
    eigenvalue: float
    basis: str
    index: int

    def __post_init__(self):
        if not self.eigenvalue > 0:
            raise ConfigError(f"eigenvalue must be positive, got {self.eigenvalue}")


@dataclass(frozen=True)
class VariableSpec:
    """One functional variable: mean form, eigenpairs, noise level."""

    name: str
    mean: MeanSpec
    components: tuple[KlComponent, ...]
    noise_sd: float = 0.0

    def __post_init__(self):
        if not self.components:
            raise ConfigError(f"variable {self.name!r} needs >= 1 component")
        lams = [c.eigenvalue for c in self.components]
        if any(a < b for a, b in zip(lams, lams[1:])):
            raise ConfigError(
                f"eigenvalues of {self.name!r} must be non-increasing: {lams}"
            )
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be nonnegative")

    def basis_callables(self, window) -> list[Callable]:
        return [basis_function(c.basis, c.index, window) for c in self.components]

    def eigenvalues(self) -> np.ndarray:
        return np.array([c.eigenvalue for c in self.components])


@dataclass(frozen=True)
class TimeDesign:
    """Visit-time law: iid uniform times or a jittered nominal schedule."""

    kind: str = "uniform"
    min_obs: int = 2
    max_obs: int = 8
    visits: tuple[float, ...] = ()
    jitter_sd: float = 0.0
    miss_prob: float = 0.0

    def __post_init__(self):
        if self.kind == "uniform":
            if not (1 <= self.min_obs <= self.max_obs):
                raise ConfigError("need 1 <= min_obs <= max_obs")
        elif self.kind == "schedule":
            if not self.visits:
                raise ConfigError("schedule design needs visit times")
            if not (0.0 <= self.miss_prob < 1.0):
                raise ConfigError("miss_prob must be in [0, 1)")
            if self.jitter_sd < 0:
                raise ConfigError("jitter_sd must be nonnegative")
        else:
            raise ConfigError(f"unknown time design {self.kind!r}")

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "TimeDesign":
        kind = d.get("kind", "uniform")
        if kind == "uniform":
            return cls("uniform", int(d.get("min_obs", 2)), int(d.get("max_obs", 8)))
        return cls("schedule", visits=tuple(float(v) for v in d["visits"]),
                   jitter_sd=float(d.get("jitter_sd", 0.0)),
                   miss_prob=float(d.get("miss_prob", 0.0)))

    def to_json_dict(self) -> dict:
        if self.kind == "uniform":
            return {"kind": "uniform", "min_obs": self.min_obs,
                    "max_obs": self.max_obs}
        return {"kind": "schedule", "visits": list(self.visits),
                "jitter_sd": self.jitter_sd, "miss_prob": self.miss_prob}


@dataclass(frozen=True)
class ScalarFieldSpec:
    """Generative law for one scalar covariate column."""

    name: str
    kind: str  # "numeric" or "categorical"
    mean: float = 0.0
    sd: float = 1.0
    levels: tuple[str, ...] = ()
    probs: tuple[float, ...] = ()
    baseline: str | None = None

    def __post_init__(self):
        if self.kind == "numeric":
            if self.sd < 0:
                raise ConfigError("numeric field sd must be nonnegative")
        elif self.kind == "categorical":
            if len(self.levels) < 2:
                raise ConfigError("categorical field needs >= 2 levels")
            if len(self.probs) != len(self.levels):
                raise ConfigError("probs must match levels")
            if abs(sum(self.probs) - 1.0) > 1e-9:
                raise ConfigError("probs must sum to 1")
            if self.baseline is not None and self.baseline not in self.levels:
                raise ConfigError("baseline must be one of the levels")
        else:
            raise ConfigError(f"unknown scalar field kind {self.kind!r}")

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "ScalarFieldSpec":
        if d["kind"] == "numeric":
            return cls(d["name"], "numeric", mean=float(d.get("mean", 0.0)),
                       sd=float(d.get("sd", 1.0)))
        return cls(d["name"], "categorical",
                   levels=tuple(str(v) for v in d["levels"]),
                   probs=tuple(float(v) for v in d["probs"]),
                   baseline=str(d.get("baseline", d["levels"][0])))

    def to_json_dict(self) -> dict:
        if self.kind == "numeric":
            return {"name": self.name, "kind": "numeric",
                    "mean": self.mean, "sd": self.sd}
        return {"name": self.name, "kind": "categorical",
                "levels": list(self.levels), "probs": list(self.probs),
                "baseline": self.baseline}


@dataclass(frozen=True)
class OutcomeTerm:
    """One additive term of the declared outcome model."""

    kind: str  # "score", "numeric", "level"
    coef: float
    variable: str = ""
    component: int = 0
    normalized: bool = True
    field_name: str = ""
    level: str = ""

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "OutcomeTerm":
        kind = d["kind"]
        if kind == "score":
            return cls("score", float(d["coef"]), variable=d["variable"],
                       component=int(d["component"]),
                       normalized=bool(d.get("normalized", True)))
        if kind == "numeric":
            return cls("numeric", float(d["coef"]), field_name=d["field"])
        if kind == "level":
            return cls("level", float(d["coef"]), field_name=d["field"],
                       level=str(d["level"]))
        raise ConfigError(f"unknown outcome term kind {kind!r}")

    def to_json_dict(self) -> dict:
        if self.kind == "score":
            return {"kind": "score", "variable": self.variable,
                    "component": self.component, "coef": self.coef,
                    "normalized": self.normalized}
        if self.kind == "numeric":
            return {"kind": "numeric", "field": self.field_name, "coef": self.coef}
        return {"kind": "level", "field": self.field_name, "level": self.level,
                "coef": self.coef}


@dataclass(frozen=True)
class OutcomeSpec:
    name: str
    intercept: float = 0.0
    terms: tuple[OutcomeTerm, ...] = ()
    noise_sd: float = 1.0

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "OutcomeSpec":
        return cls(d["name"], float(d.get("intercept", 0.0)),
                   tuple(OutcomeTerm.from_json_dict(t) for t in d.get("terms", [])),
                   float(d.get("noise_sd", 1.0)))

    def to_json_dict(self) -> dict:
        return {"name": self.name, "intercept": self.intercept,
                "terms": [t.to_json_dict() for t in self.terms],
                "noise_sd": self.noise_sd}


@dataclass(frozen=True)
class ClusterSpec:
    field_name: str = "site"
    count: int = 10
    effect_sd: float = 0.0

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("cluster count must be >= 1")
        if self.effect_sd < 0:
            raise ConfigError("cluster effect_sd must be nonnegative")


@dataclass(frozen=True)
class KlSpec:
    """Full generative scenario for a synthetic cohort.

    Basis functions of every variable are checked for orthonormality (to
    1e-8 by quadrature) at construction; the cross-variable score
    correlation matrix, if given, must be symmetric positive semidefinite
    with a unit diagonal.
    """

    window: tuple[float, float]
    n_subjects: int
    variables: tuple[VariableSpec, ...]
    time_design: TimeDesign = TimeDesign("uniform", 2, 8)
    score_correlation: tuple[tuple[float, ...], ...] | None = None
    scalar_fields: tuple[ScalarFieldSpec, ...] = ()
    outcome: OutcomeSpec | None = None
    cluster: ClusterSpec | None = None

    def __post_init__(self):
        lo, hi = self.window
        if not hi > lo:
            raise ConfigError(f"degenerate window {self.window!r}")
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be >= 1")
        if not self.variables:
            raise ConfigError("scenario needs >= 1 functional variable")
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate variable names {names}")
        for v in self.variables:
            _check_orthonormal(v, self.window)
        k_total = sum(len(v.components) for v in self.variables)
        if self.score_correlation is not None:
            R = np.asarray(self.score_correlation, dtype=float)
            if R.shape != (k_total, k_total):
                raise ConfigError(
                    f"score correlation must be {k_total}x{k_total}, got {R.shape}"
                )
            if not np.allclose(R, R.T, atol=1e-12):
                raise ConfigError("score correlation must be symmetric")
            if not np.allclose(np.diag(R), 1.0, atol=1e-12):
                raise ConfigError("score correlation needs a unit diagonal")
            if np.linalg.eigvalsh(R)[0] < -1e-10:
                raise ConfigError("score correlation is not positive semidefinite")
        if self.outcome is not None:
            declared = {f.name for f in self.scalar_fields}
            for term in self.outcome.terms:
                if term.kind == "score":
                    if term.variable not in names:
                        raise ConfigError(
                            f"outcome term references unknown variable "
                            f"{term.variable!r}")
                    kvar = len(self.variables[names.index(term.variable)].components)
                    if not (1 <= term.component <= kvar):
                        raise ConfigError(
                            f"outcome term component {term.component} out of "
                            f"range for {term.variable!r}")
                elif term.field_name not in declared:
                    raise ConfigError(
                        f"outcome term references unknown field "
                        f"{term.field_name!r}")

    # -- serialization ------------------------------------------------------

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "KlSpec":
        variables = tuple(
            VariableSpec(
                name=v["name"],
                mean=MeanSpec.from_json_dict(v.get("mean", {"kind": "constant"})),
                components=tuple(
                    KlComponent(float(c["eigenvalue"]), c["basis"], int(c["index"]))
                    for c in v["components"]
                ),
                noise_sd=float(v.get("noise_sd", 0.0)),
            )
            for v in d["variables"]
        )
        corr = d.get("score_correlation")
        cluster = None
        if "cluster" in d and d["cluster"] is not None:
            c = d["cluster"]
            cluster = ClusterSpec(c.get("field", "site"), int(c.get("count", 10)),
                                  float(c.get("effect_sd", 0.0)))
        return cls(
            window=(float(d["window"][0]), float(d["window"][1])),
            n_subjects=int(d["n_subjects"]),
            variables=variables,
            time_design=TimeDesign.from_json_dict(d.get("time_design",
                                                        {"kind": "uniform"})),
            score_correlation=tuple(tuple(float(x) for x in row) for row in corr)
            if corr is not None else None,
            scalar_fields=tuple(ScalarFieldSpec.from_json_dict(f)
                                for f in d.get("scalar_fields", [])),
            outcome=OutcomeSpec.from_json_dict(d["outcome"])
            if d.get("outcome") else None,
            cluster=cluster,
        )

    def to_json_dict(self) -> dict:
        d: dict = {
            "window": [self.window[0], self.window[1]],
            "n_subjects": self.n_subjects,
            "time_design": self.time_design.to_json_dict(),
            "variables": [
                {
                    "name": v.name,
                    "mean": v.mean.to_json_dict(),
                    "noise_sd": v.noise_sd,
                    "components": [
                        {"eigenvalue": c.eigenvalue, "basis": c.basis,
                         "index": c.index}
                        for c in v.components
                    ],
                }
                for v in self.variables
            ],
        }
        if self.score_correlation is not None:
            d["score_correlation"] = [list(r) for r in self.score_correlation]
        if self.scalar_fields:
            d["scalar_fields"] = [f.to_json_dict() for f in self.scalar_fields]
        if self.outcome is not None:
            d["outcome"] = self.outcome.to_json_dict()
        if self.cluster is not None:
            d["cluster"] = {"field": self.cluster.field_name,
                            "count": self.cluster.count,
                            "effect_sd": self.cluster.effect_sd}
        return d


def _check_orthonormal(var: VariableSpec, window):
    lo, hi = window
    t = np.linspace(lo, hi, 4097)
    phis = [f(t) for f in var.basis_callables(window)]
    for i in range(len(phis)):
        for j in range(i, len(phis)):
            val = float(simpson(phis[i] * phis[j], x=t))
            want = 1.0 if i == j else 0.0
            if abs(val - want) > _ORTHO_TOL:
                raise ConfigError(
                    f"basis of {var.name!r} not orthonormal: "
                    f"<phi_{i + 1}, phi_{j + 1}> = {val:.3e}"
                )


def load_scenario(path) -> KlSpec:
    """Read a scenario from JSON or TOML (by file extension)."""
    text = open(path, "r", encoding="utf-8").read()
    if str(path).endswith(".toml"):
        try:
            import tomllib  # py311+
        except ModuleNotFoundError:
            import tomli as tomllib
        d = tomllib.loads(text)
    else:
        d = json.loads(text)
    return KlSpec.from_json_dict(d)


# ---------------------------------------------------------------------------
# Ground truth and generation
# ---------------------------------------------------------------------------


@dataclass
class GroundTruth:
    """Latent state of a simulated cohort, regenerable from (spec, seed)."""

    spec: KlSpec
    seed: int
    subject_ids: list[str]
    scores: dict[str, np.ndarray]          # variable -> (n, K)
    cluster_labels: list[str] | None
    cluster_effects: dict[str, float]
    outcome_noise_sd: float | None = None

    def variable(self, name: str) -> VariableSpec:
        for v in self.spec.variables:
            if v.name == name:
                return v
        raise ConfigError(f"unknown variable {name!r}")

    def true_mean(self, name: str, t) -> np.ndarray:
        return self.variable(name).mean.build(self.spec.window)(t)

    def true_cov(self, name: str, s, t) -> np.ndarray:
        var = self.variable(name)
        phis = var.basis_callables(self.spec.window)
        lam = var.eigenvalues()
        s = np.asarray(s, float)
        t = np.asarray(t, float)
        out = np.zeros(np.broadcast(s, t).shape)
        for lk, f in zip(lam, phis):
            out = out + lk * f(s) * f(t)
        return out

    def true_curve(self, name: str, sid: str, t) -> np.ndarray:
        var = self.variable(name)
        i = self.subject_ids.index(sid)
        xi = self.scores[name][i]
        vals = self.true_mean(name, t)
        for k, f in enumerate(var.basis_callables(self.spec.window)):
            vals = vals + xi[k] * f(t)
        return vals

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "scenario": self.spec.to_json_dict(),
            "subject_ids": list(self.subject_ids),
            "scores": {k: v.tolist() for k, v in self.scores.items()},
            "cluster_labels": self.cluster_labels,
            "cluster_effects": dict(self.cluster_effects),
        }


def simulate_cohort(spec: KlSpec, seed: int) -> tuple[Cohort, GroundTruth]:
    """Draw a cohort from the scenario; bit-identical given (spec, seed).

    Per subject, one derived RNG stream draws (in fixed order) the latent
    scores, then per variable the visit times and measurement noise, then
    the scalar covariates, cluster assignment, and outcome noise.
    """
    lo, hi = spec.window
    root = np.random.SeedSequence(seed)
    subject_seeds = root.spawn(spec.n_subjects)
    shared = np.random.default_rng(root.spawn(1)[0])

    cluster_labels_all: list[str] | None = None
    cluster_effects: dict[str, float] = {}
    if spec.cluster is not None:
        labels = [f"c{k:03d}" for k in range(spec.cluster.count)]
        effects = shared.normal(0.0, spec.cluster.effect_sd, spec.cluster.count)
        cluster_effects = {lab: float(e) for lab, e in zip(labels, effects)}
        cluster_labels_all = labels

    lam_all = np.concatenate([v.eigenvalues() for v in spec.variables])
    scale = np.sqrt(lam_all)
    if spec.score_correlation is not None:
        R = np.asarray(spec.score_correlation, dtype=float)
        # tiny jitter keeps the factorization of a PSD-but-singular matrix alive
        L = np.linalg.cholesky(R + 1e-12 * np.eye(R.shape[0]))
    else:
        L = np.eye(lam_all.size)
    offsets = np.cumsum([0] + [len(v.components) for v in spec.variables])

    ids = [f"s{i + 1:05d}" for i in range(spec.n_subjects)]
    scores = {v.name: np.empty((spec.n_subjects, len(v.components)))
              for v in spec.variables}
    phis = {v.name: v.basis_callables(spec.window) for v in spec.variables}
    means = {v.name: v.mean.build(spec.window) for v in spec.variables}

    func_data: dict[str, dict[str, tuple[np.ndarray, np.ndarray]]] = {
        v.name: {} for v in spec.variables
    }
    records: dict[str, dict[str, object]] = {}

    for i, (sid, ss) in enumerate(zip(ids, subject_seeds)):
        rng = np.random.default_rng(ss)
        z = rng.standard_normal(lam_all.size)
        xi_all = scale * (L @ z)
        for vi, v in enumerate(spec.variables):
            scores[v.name][i] = xi_all[offsets[vi]:offsets[vi + 1]]

        for v in spec.variables:
            td = spec.time_design
            if td.kind == "uniform":
                m = int(rng.integers(td.min_obs, td.max_obs + 1))
                t = np.sort(rng.uniform(lo, hi, m))
            else:
                base = np.asarray(td.visits, dtype=float)
                while True:
                    jit = rng.normal(0.0, td.jitter_sd, base.size) \
                        if td.jitter_sd > 0 else np.zeros(base.size)
                    keep = rng.uniform(size=base.size) >= td.miss_prob \
                        if td.miss_prob > 0 else np.ones(base.size, dtype=bool)
                    if np.any(keep):
                        break
                t = np.clip(base[keep] + jit[keep], lo, hi)
                t = np.unique(t)
            xi = scores[v.name][i]
            y = means[v.name](t).copy()
            for k, f in enumerate(phis[v.name]):
                y += xi[k] * f(t)
            if v.noise_sd > 0:
                y = y + rng.standard_normal(t.size) * v.noise_sd
            func_data[v.name][sid] = (t, y)

        rec: dict[str, object] = {}
        for f in spec.scalar_fields:
            if f.kind == "numeric":
                rec[f.name] = float(rng.normal(f.mean, f.sd))
            else:
                u = rng.uniform()
                cum = np.cumsum(f.probs)
                rec[f.name] = f.levels[int(np.searchsorted(cum, u, side="right"))]
        if spec.cluster is not None:
            k = int(rng.integers(0, spec.cluster.count))
            rec[spec.cluster.field_name] = cluster_labels_all[k]
        if spec.outcome is not None:
            out = spec.outcome
            val = out.intercept
            for term in out.terms:
                if term.kind == "score":
                    vi = [v.name for v in spec.variables].index(term.variable)
                    xi = scores[term.variable][i][term.component - 1]
                    lam = spec.variables[vi].components[term.component - 1].eigenvalue
                    feat = xi / math.sqrt(lam) if term.normalized else xi
                elif term.kind == "numeric":
                    feat = float(rec[term.field_name])
                else:
                    feat = 1.0 if rec[term.field_name] == term.level else 0.0
                val += term.coef * feat
            if spec.cluster is not None and spec.cluster.effect_sd > 0:
                val += cluster_effects[rec[spec.cluster.field_name]]
            if out.noise_sd > 0:
                val += float(rng.standard_normal()) * out.noise_sd
            rec[out.name] = float(val)
        records[sid] = rec

    samples = {
        name: SparseFunctionalSample(name, (lo, hi), data)
        for name, data in func_data.items()
    }

    scalars = None
    numeric_fields = [f.name for f in spec.scalar_fields if f.kind == "numeric"]
    cat_fields = {
        f.name: CategoricalSpec(f.levels, f.baseline or f.levels[0])
        for f in spec.scalar_fields if f.kind == "categorical"
    }
    if spec.outcome is not None:
        numeric_fields.append(spec.outcome.name)
    if numeric_fields or cat_fields or spec.cluster is not None:
        scalars = ScalarCovariates(
            numeric_fields=numeric_fields,
            categorical_fields=cat_fields,
            cluster_field=spec.cluster.field_name if spec.cluster else None,
            records=records,
        )

    cohort = Cohort(samples=samples, scalars=scalars, window=(lo, hi))
    truth = GroundTruth(
        spec=spec, seed=seed, subject_ids=ids, scores=scores,
        cluster_labels=cluster_labels_all, cluster_effects=cluster_effects,
        outcome_noise_sd=spec.outcome.noise_sd if spec.outcome else None,
    )
    return cohort, truth


def ingest_schema_for(spec: KlSpec) -> IngestSchema:
    """Sidecar schema matching the cohort a scenario generates."""
    numeric = [f.name for f in spec.scalar_fields if f.kind == "numeric"]
    if spec.outcome is not None:
        numeric.append(spec.outcome.name)
    cats = {
        f.name: CategoricalSpec(f.levels, f.baseline or f.levels[0])
        for f in spec.scalar_fields if f.kind == "categorical"
    }
    return IngestSchema(
        window=spec.window,
        numeric=tuple(numeric),
        categorical=cats,
        cluster=spec.cluster.field_name if spec.cluster else None,
        variables=tuple(v.name for v in spec.variables),
    )


# ---------------------------------------------------------------------------
# Exact conditional-score oracle (true moments)
# ---------------------------------------------------------------------------


def oracle_conditional_scores(var: VariableSpec, window, times, values
                              ) -> np.ndarray:
    """Best linear conditional scores using the *true* moments.

    For observations ``Y`` at ``times``, returns
    ``Lambda Phi' (Phi Lambda Phi' + sigma^2 I)^{-1} (Y - mu)``.  With zero
    noise the central matrix can be singular; the pseudoinverse then yields
    the least-squares interpolation scores.
    """
    t = np.asarray(times, dtype=float).ravel()
    y = np.asarray(values, dtype=float).ravel()
    if t.size != y.size or t.size == 0:
        raise ConfigError("times and values must be equal-length, nonempty")
    mu = var.mean.build(window)(t)
    lam = var.eigenvalues()
    Phi = np.column_stack([f(t) for f in var.basis_callables(window)])
    Sigma = (Phi * lam) @ Phi.T
    resid = y - mu
    if var.noise_sd > 0:
        Sigma = Sigma + var.noise_sd ** 2 * np.eye(t.size)
        sol = np.linalg.solve(Sigma, resid)
    else:
        sol = np.linalg.pinv(Sigma, rcond=1e-12) @ resid
    return lam * (Phi.T @ sol)


def oracle_scores_for_sample(var: VariableSpec, window,
                             sample: SparseFunctionalSample
                             ) -> tuple[list[str], np.ndarray]:
    """Oracle conditional scores for every subject of a sample."""
    ids = sample.subject_ids
    out = np.empty((len(ids), len(var.components)))
    for i, sid in enumerate(ids):
        t, y = sample.data[sid]
        out[i] = oracle_conditional_scores(var, window, t, y)
    return ids, out
