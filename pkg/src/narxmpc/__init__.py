"""Kernel-surrogate NARX identification, MPC and sampled stability certificates."""

__version__ = "0.1.0"

from .narx import (
    AffineNormalization,
    Box,
    DimensionMismatchError,
    FunctionDynamics,
    NarxDims,
    NarxDynamics,
    build_regressor,
    lift_step,
    output_projection,
    rollout,
    shift_state,
)
from .kernels import (
    Dataset,
    ErrorConstants,
    KernelFitError,
    KernelInterpolant,
    KernelSpec,
    estimate_error_constants,
    estimate_lipschitz,
    fill_distance,
    fit_interpolant,
    kernel_eval,
    kernel_matrix,
    min_pairwise_distance,
    validate_error_constants,
    wendland_dphi,
    wendland_phi,
)
from .mpc import (
    ClosedLoopTrace,
    MpcConfig,
    OcpSolution,
    SolverConfig,
    SolverError,
    StageCostWeights,
    cost_J,
    cost_J_batch,
    cost_gradient,
    finite_difference_gradient,
    run_closed_loop,
    solve_ocp,
    stage_cost,
)
from .stability import (
    DetectabilityReport,
    GrowthBoundEstimate,
    StabilityReport,
    StorageMatrix,
    check_detectability,
    estimate_growth_bound,
    fit_decay_rate,
    gamma_bar,
    lyapunov_value,
    min_horizon,
    storage_matrix,
    storage_value,
    verify_decrease,
)
from .twotank import (
    BenchmarkConfig,
    DomainError,
    StatefulPlantDynamics,
    TwoTankNarxDynamics,
    TwoTankParams,
    TwoTankPlant,
    equilibrium_levels,
    generate_dataset,
    reconstruct_hidden_level,
    rk4_step,
    sample_consistent_states,
    sample_state_grid,
    sample_domain,
    two_tank_rhs,
    two_tank_step,
)
from .bench import BenchmarkResult, make_mpc_config, plant_views, run_arm, run_benchmark
