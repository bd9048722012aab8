"""Sparse functional data analysis for irregular longitudinal cohorts.

The package estimates smooth mean and covariance structure from sparse,
noisy, irregularly timed repeated measurements, extracts principal
component trajectories and per-subject scores by conditional expectation,
relates pairs of functional variables and scalar outcomes through
cross-covariance and correlation estimates with bootstrap bands, fits
pointwise functional concurrent regressions, and residualizes scalar
outcomes against covariates with a cluster random intercept.  A CLI
(`sparsefda`) chains the pieces into a reproducible pipeline.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    AlignmentError,
    AssemblyError,
    BootstrapInstabilityError,
    ConfigError,
    DataError,
    DegenerateCovarianceError,
    DegenerateScalarError,
    DegenerateVarianceError,
    DuplicateRecordError,
    ExtrapolationError,
    GridMismatchError,
    InsufficientPairsError,
    LocalRankError,
    NoValidBandwidthError,
    NumericError,
    RankDeficiencyError,
    SchemaError,
    SparseFdaError,
    exit_code_for,
)
from .kernelsmooth import (  # noqa: E402
    Curve,
    Sigma2Estimate,
    Surface,
    cv_bandwidth,
    default_grid,
    estimate_sigma2,
    kde_1d,
    local_bilinear_2d,
    local_linear_1d,
    local_plane_at,
    local_quadratic_1d,
    trapezoid_weights,
)
from .datamodel import (  # noqa: E402
    CategoricalSpec,
    Cohort,
    IngestSchema,
    QcPolicy,
    QcReport,
    ScalarCovariates,
    SparseFunctionalSample,
    design_count_matrix,
    ingest_long_csv,
    normalize_sample,
    qc_filter,
    write_long_csv,
    write_scalar_csv,
    write_schema_json,
)
from .fpca import (  # noqa: E402
    EigenSystem,
    FpcaModel,
    ScoreSet,
    SmoothedMoments,
    dense_scores,
    eigendecompose,
    fit_fpca,
    fit_moments,
    pace_scores,
    raw_covariance_pairs,
    reconstruct,
    score_outlier_flags,
)
from .crosscorr import (  # noqa: E402
    CorrelationSurface,
    CorrelationTrajectory,
    CrossCovSurface,
    FsBootstrapPlan,
    correlation_surface,
    correlation_trajectory_fs,
    crosscov_ff,
    crosscov_fs,
)
from .fcr import (  # noqa: E402
    FcrFit,
    FcrSpec,
    assemble_system,
    fcr_bootstrap,
    fcr_components,
    solve_fcr,
)
from .scalarmodels import (  # noqa: E402
    DesignMatrix,
    LinearFit,
    PearsonResult,
    ResidualizationFit,
    bootstrap_score_lm,
    build_design,
    fit_residualization,
    fit_score_lm,
    pearson_scores_vs_outcome,
    residualize,
)
from .simulate import (  # noqa: E402
    GroundTruth,
    KlSpec,
    VariableSpec,
    basis_function,
    ingest_schema_for,
    load_scenario,
    oracle_scores_for_sample,
    simulate_cohort,
)

__all__ = [name for name in dir() if not name.startswith("_")]
