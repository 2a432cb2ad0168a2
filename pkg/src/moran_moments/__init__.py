"""Moran model with general recombination, mutation, and resampling:
exact stochastic simulation, closed moment hierarchies, the deterministic
infinite-population limit, and an exact finite-state oracle for
cross-validation."""

from .core import (
    Genotype,
    ModelParams,
    PopulationState,
    SignedUpdate,
    SiteSet,
    marginal_count,
    marginalize,
    project,
    recombination_update,
    recombine,
    true_jump_rates,
)
from .partitions import (
    BlockAssignment,
    PartialPartition,
    bell_number,
    block_assignments,
    composite_split_rate,
    disrupts,
    marginal_rates,
    partial_partitions,
)
from .simulate import (
    AbsorbingStateError,
    Event,
    Observable,
    ObservedCounters,
    Trajectory,
    apply_event,
    sample_event,
    simulate,
    total_rate,
)
from .oracle import ExactModel, build_generator, transient_distribution
from .hierarchy import (
    ClosureError,
    MomentSolution,
    MomentSystem,
    build_system,
    ld_decay_rate,
    poisson_parameter,
    single_crossover_system,
    solve,
    two_site_mean_ld,
    two_site_moments,
)
from .deterministic import (
    deterministic_rhs,
    integrate,
    lln_experiment,
    product_derivative_check,
    recombinator,
)
from .stats import (
    ComparisonRow,
    MomentEstimate,
    compare,
    estimate_moments,
    three_site_nonclosure_check,
)

__version__ = "0.1.0"
