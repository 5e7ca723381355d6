"""Nearest-simplex-ETF classifiers with implicit differentiation, and UFM training."""
from .errors import (
    ConstraintError,
    DegenerateFeaturesError,
    DimensionError,
    DomainError,
    MissingClassError,
    NumericalError,
    SingularCurvatureError,
)
from .geometry import (
    NcMetricsRecord,
    build_simplex_etf,
    collect_metrics,
    compute_feature_statistics,
    standard_etf,
)
from .nearest import NearestEtfProblem, initialize_directions, objective, solve_nearest_etf
from .ddn import ImplicitJacobian, dy_dh, vjp
from .stiefel import TrustRegionSolver, procrustes_oracle, trust_region_minimize
from .ufm import TrainConfig, make_ufm, train

__version__ = "0.1.0"
