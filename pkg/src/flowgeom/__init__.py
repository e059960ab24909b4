"""Connections induced by SDE coefficients, their tensors, and Monte Carlo
checks of the identities they satisfy.

The package takes a stochastic differential equation on a manifold, given
by coefficients (X, A) in charts, builds the induced metric and connection
together with torsion, curvature and Ricci tensors, simulates the flow with
its variational and filtered companions, and estimates/verifies the
resulting probabilistic identities at desk scale.
"""

from .errors import (
    BadParams,
    ChartExit,
    ConfigError,
    DegenerateX,
    EvalFailure,
    ExprError,
    FlowgeomError,
    NotApplicable,
    NotSPD,
    OutOfOverlap,
    TooFewAlivePaths,
    UnknownScenario,
    UsageError,
    ZeroVector,
)
from .geometry import (
    GeometryPoint,
    PointData,
    christoffel,
    connection_routes_residual,
    covariant_derivative,
    curvature_from_christoffel,
    curvature_lw_direct,
    defining_property_residual,
    geometry_point,
    induced_metric,
    levi_civita_christoffel,
    lw_christoffel,
    lw_lc_split_residual,
    metricity_residual,
    moment_form,
    moment_form_extremes,
    one_form_from_spec,
    one_form_generator,
    point_data,
    ricci_bilinear,
    ricci_sharp,
    scalar_from_expr,
    scalar_generator,
    sectional_curvature,
    stratonovich_term,
    torsion_from_christoffel,
    tss_check,
)
from .linalg import DerivOracle
from .model import Chart, SdeSystem, build_scenario, scenario_names
from .stochastic import (
    FlowPath,
    NoiseGrid,
    SimResult,
    covariant_derivative_flow,
    derivative_flow,
    filtered_flow,
    integrate_flow,
    noise_decompose,
    parallel_transport,
    reconstruction_error,
    sample_noise,
    simulate,
    transport_along,
)
from .estimators import (
    CheckRow,
    McConfig,
    McReport,
    bismut_gradient,
    bochner_decay_check,
    decomposition_check,
    filtered_expectation_check,
    generator_check,
    ito_pathwise_check,
    moment_sandwich,
    one_form_semigroup_check,
    se_scaling_check,
    weak_order_check,
)

__version__ = "0.1.0"

__all__ = [
    "BadParams",
    "Chart",
    "ChartExit",
    "CheckRow",
    "McConfig",
    "McReport",
    "bismut_gradient",
    "bochner_decay_check",
    "decomposition_check",
    "filtered_expectation_check",
    "generator_check",
    "ito_pathwise_check",
    "moment_sandwich",
    "one_form_semigroup_check",
    "se_scaling_check",
    "weak_order_check",
    "ConfigError",
    "DegenerateX",
    "DerivOracle",
    "EvalFailure",
    "ExprError",
    "FlowgeomError",
    "FlowPath",
    "GeometryPoint",
    "NoiseGrid",
    "NotApplicable",
    "NotSPD",
    "OutOfOverlap",
    "PointData",
    "SdeSystem",
    "SimResult",
    "TooFewAlivePaths",
    "UnknownScenario",
    "UsageError",
    "ZeroVector",
    "build_scenario",
    "christoffel",
    "connection_routes_residual",
    "covariant_derivative",
    "covariant_derivative_flow",
    "curvature_from_christoffel",
    "curvature_lw_direct",
    "defining_property_residual",
    "derivative_flow",
    "filtered_flow",
    "geometry_point",
    "induced_metric",
    "integrate_flow",
    "levi_civita_christoffel",
    "lw_christoffel",
    "lw_lc_split_residual",
    "metricity_residual",
    "moment_form",
    "moment_form_extremes",
    "noise_decompose",
    "one_form_from_spec",
    "one_form_generator",
    "parallel_transport",
    "point_data",
    "reconstruction_error",
    "ricci_bilinear",
    "ricci_sharp",
    "sample_noise",
    "scalar_from_expr",
    "scalar_generator",
    "scenario_names",
    "sectional_curvature",
    "simulate",
    "stratonovich_term",
    "torsion_from_christoffel",
    "transport_along",
    "tss_check",
    "__version__",
]
