"""Weighted M-estimation of location for clustered multivariate data."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    ClusteredSample,
    EstimatorFamily,
    Huber,
    LpMedian,
    Mean,
    SpatialMedian,
    WeightScheme,
    make_family,
    objective,
    psi_eval,
    psi_jacobian,
    rho_eval,
)
from .solver import SolveOptions, SolveResult, solve  # noqa: E402
from .asymptotics import (  # noqa: E402
    AssumptionDiagnostics,
    ClusterStatistics,
    CovarianceReport,
    SingularCovarianceError,
    assumption_diagnostics,
    b_hat,
    c_hat,
    relative_efficiency,
    sigma_hat,
    v_hat,
)
from .weights import (  # noqa: E402
    WeightOptimizationResult,
    WeightOptions,
    closed_form_weights,
    optimize_weights,
    optimize_weights_stats,
)
from .breakdown import (  # noqa: E402
    BreakdownReport,
    breakdown_bracket,
    breakdown_exact,
    expand_cluster_weights,
    spatial_median_eps,
)
from .simulation import (  # noqa: E402
    ClusterConfiguration,
    DistributionSpec,
    ExperimentConfig,
    generate_sample,
    run_experiment,
)
