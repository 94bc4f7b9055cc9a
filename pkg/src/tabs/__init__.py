"""Token-based auto-balance scaling: exact simulator, mean-field ODE, oracle."""

from .core import (
    IndexedSet,
    OccupancyState,
    ServerMode,
    ServerState,
    SystemState,
    TokenPool,
    TruncationOverflowError,
    occupancy_of,
    validate,
)
from .fluid import (
    CompareReport,
    DegenerateRoutingError,
    FluidParams,
    FluidTrajectory,
    ProjectionOverflowError,
    SaturatedRegimeError,
    TruncationInadequateWarning,
    compare,
    fixed_point,
    integrate,
    rhs,
    routing_coeffs,
)
from .oracle import (
    GeneratorMatrix,
    ReducibleChainError,
    StateSpaceSizeError,
    TruncatedStateSpace,
    build_generator,
    occupancy_marginal,
    stationary,
    total_variation,
)
from .sim import (
    SimParams,
    SimTrace,
    SteadyStats,
    dispatch,
    empirical_state_law,
    initial_state,
    rng_for,
    run,
    steady_stats,
    step,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
