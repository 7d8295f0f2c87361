"""End-to-end two-tank benchmark: identify, control, certify, compare.

For each dataset size the pipeline generates data from the plant, fits
a kernel surrogate, estimates the proportional model-error constants,
runs the receding-horizon loop on the real plant and certifies the
decrease of the candidate Lyapunov function.  The two dataset sizes are
then compared on the same initial condition.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import (
    save_dataset,
    save_model,
    save_stability_report,
    save_trace,
    sha256_file,
    write_csv,
    write_keyvalues,
)
from .kernels import (
    ErrorConstants,
    KernelInterpolant,
    KernelSpec,
    estimate_error_constants,
    estimate_lipschitz,
    fill_distance,
    fit_interpolant,
    validate_error_constants,
)
from .mpc import ClosedLoopTrace, MpcConfig, SolverConfig, StageCostWeights, run_closed_loop
from .stability import (
    GrowthBoundEstimate,
    StabilityReport,
    estimate_growth_bound,
    storage_matrix,
    verify_decrease,
)
from .twotank import (
    BenchmarkConfig,
    StatefulPlantDynamics,
    TwoTankNarxDynamics,
    TwoTankPlant,
    generate_dataset,
    sample_consistent_states,
    sample_state_grid,
)

#: Dataset sizes compared by the standard benchmark run.
BENCHMARK_SIZES = (101, 2501)


def make_mpc_config(cfg: BenchmarkConfig, multistart: int = 1) -> MpcConfig:
    """Controller configuration induced by the benchmark settings."""
    weights = StageCostWeights(Q=np.array([[cfg.q_weight]]), R=np.array([[cfg.r_weight]]))
    return MpcConfig(
        horizon=cfg.horizon,
        weights=weights,
        input_box=cfg.input_box(),
        dims=cfg.dims,
        solver=SolverConfig(multistart=multistart, seed=cfg.seed),
    )


def plant_views(cfg: BenchmarkConfig):
    """The pure NARX view and a fresh stateful closed-loop plant."""
    norm = cfg.normalization()
    narx_view = TwoTankNarxDynamics(cfg.params, norm, cfg.dims)
    _, levels = cfg.initial_condition()
    stateful = StatefulPlantDynamics(TwoTankPlant(cfg.params, *levels), norm, cfg.dims)
    return narx_view, stateful


def probe_sites(cfg: BenchmarkConfig, count: int, seed: int) -> np.ndarray:
    """Reachable regressor-input probes used for fill-distance estimates."""
    states = sample_consistent_states(cfg, count, seed, min_norm=0.0)
    rng = np.random.default_rng(seed + 1)
    u = rng.uniform(0.0, 1.0, size=(count, 1))
    box = cfg.input_box()
    u = box.lo + (box.hi - box.lo) * u
    return np.hstack([states, u])


def error_constant_samples(
    cfg: BenchmarkConfig, count: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Reachable (state, input) samples, plus the exact equilibrium pair."""
    states = sample_consistent_states(cfg, count - 1, seed, min_norm=0.0)
    rng = np.random.default_rng(seed + 1)
    box = cfg.input_box()
    u = box.lo + (box.hi - box.lo) * rng.uniform(0.0, 1.0, size=(count - 1, 1))
    states = np.vstack([np.zeros(cfg.dims.n), states])
    u = np.vstack([np.zeros((1, 1)), u])
    return states, u


@dataclass
class BenchmarkArm:
    """Everything produced for one dataset size."""

    d: int
    dataset: object
    provenance: dict
    model: KernelInterpolant
    constants: ErrorConstants
    validation: dict
    fill: float
    trace: ClosedLoopTrace
    growth: GrowthBoundEstimate
    report: StabilityReport
    timings: dict = field(default_factory=dict)


@dataclass
class BenchmarkResult:
    cfg: BenchmarkConfig
    arms: dict[int, BenchmarkArm]
    comparison_header: list[str]
    comparison: np.ndarray


def run_arm(
    cfg: BenchmarkConfig,
    d: int,
    b_states: int = 50,
    b_horizon: int = 10,
    progress=None,
) -> BenchmarkArm:
    """Run the full pipeline for one dataset size."""
    from dataclasses import replace as dc_replace

    cfg_d = dc_replace(cfg, d=d)
    say = progress or (lambda msg: None)
    timings: dict[str, float] = {}

    tic = time.perf_counter()
    data, provenance = generate_dataset(cfg_d)
    timings["generate"] = time.perf_counter() - tic
    say(f"D={d}: generated {data.size} sites ({timings['generate']:.1f} s)")

    tic = time.perf_counter()
    spec = KernelSpec(input_dim=data.sites.shape[1], lengthscale=cfg.sigma)
    model = fit_interpolant(spec, data, jitter=cfg.jitter)
    timings["fit"] = time.perf_counter() - tic
    say(f"D={d}: fitted (site residual {model.site_residual:.2e}, {timings['fit']:.1f} s)")

    tic = time.perf_counter()
    narx_view, stateful = plant_views(cfg_d)
    X_est, U_est = error_constant_samples(cfg_d, 400, seed=cfg.seed + 11)
    constants = estimate_error_constants(narx_view, model, X_est, U_est)
    X_val, U_val = error_constant_samples(cfg_d, 400, seed=cfg.seed + 13)
    validation = validate_error_constants(constants, narx_view, model, X_val, U_val)
    pair_rng = np.random.default_rng(cfg.seed + 17)
    pairs = probe_sites(cfg_d, 500, seed=cfg.seed + 19)
    jiggle = pair_rng.normal(scale=0.05, size=pairs.shape)
    constants = ErrorConstants(
        c_x=constants.c_x,
        c_u=constants.c_u,
        sample_count=constants.sample_count,
        max_ratio=constants.max_ratio,
        worst_index=constants.worst_index,
        lipschitz=max(estimate_lipschitz(model, pairs, pairs + jiggle), 1e-12),
    )
    fill = fill_distance(data.sites, probe_sites(cfg_d, 2000, seed=cfg.seed + 23))
    timings["constants"] = time.perf_counter() - tic
    say(
        f"D={d}: c_x={constants.c_x:.3e} c_u={constants.c_u:.3e} "
        f"fill={fill:.3f} ({timings['constants']:.1f} s)"
    )

    tic = time.perf_counter()
    mpc_cfg = make_mpc_config(cfg_d)
    storage = storage_matrix(cfg.dims, mpc_cfg.weights)
    x0, _ = cfg_d.initial_condition()
    trace = run_closed_loop(
        stateful,
        model.as_dynamics(),
        mpc_cfg,
        x0,
        cfg.steps,
        storage_matrix=storage.P,
        normalization=cfg.normalization(),
    )
    timings["closed_loop"] = time.perf_counter() - tic
    say(f"D={d}: closed loop done ({timings['closed_loop']:.1f} s)")

    tic = time.perf_counter()
    grid = sample_state_grid(cfg_d, b_states, seed=cfg.seed + 29, min_norm=1e-3)
    growth = estimate_growth_bound(
        model.as_dynamics(), mpc_cfg, grid, b_horizon, model_tag=f"surrogate_D{d}"
    )
    report = verify_decrease(
        trace, storage, growth=growth, model_tag=f"surrogate_D{d}"
    )
    timings["certify"] = time.perf_counter() - tic
    say(f"D={d}: verdict {report.verdict} ({timings['certify']:.1f} s)")

    return BenchmarkArm(
        d=d,
        dataset=data,
        provenance=provenance,
        model=model,
        constants=constants,
        validation=validation,
        fill=fill,
        trace=trace,
        growth=growth,
        report=report,
        timings=timings,
    )


def comparison_table(cfg: BenchmarkConfig, arms: dict[int, BenchmarkArm]):
    """Raw-unit output and state-error columns, one row per loop step."""
    header = ["k"]
    steps = min(arm.trace.steps for arm in arms.values())
    columns = [np.arange(steps + 1)]
    norm = cfg.normalization()
    y_cols, err_cols = [], []
    for d, arm in sorted(arms.items()):
        states_raw = norm.denormalize_state(arm.trace.states[: steps + 1], cfg.dims)
        eq_raw = norm.denormalize_state(np.zeros(cfg.dims.n), cfg.dims)
        y_cols.append((f"y_D{d}", states_raw[:, 0]))
        err_cols.append((f"err_D{d}", np.linalg.norm(states_raw - eq_raw, axis=1)))
    for name, col in y_cols + err_cols:
        header.append(name)
        columns.append(col)
    return header, np.column_stack(columns)


def fit_report_entries(arm: BenchmarkArm) -> dict:
    entries = {
        "d": arm.d,
        "sigma": arm.model.spec.lengthscale,
        "jitter": arm.model.jitter,
        "certificate_degraded": arm.model.certificate_degraded,
        "site_residual": arm.model.site_residual,
        "rkhs_norm": arm.model.rkhs_norm(),
        "fill_distance": arm.fill,
        "c_x": arm.constants.c_x,
        "c_u": arm.constants.c_u,
        "lipschitz": arm.constants.lipschitz,
        "error_samples": arm.constants.sample_count,
        "error_max_ratio": arm.constants.max_ratio,
        "validation_max_ratio": arm.validation["max_ratio"],
        "validation_drift_factor": arm.validation["drift_factor"],
        "validation_flagged": arm.validation["flagged"],
    }
    entries.update({f"gen_{k}": v for k, v in arm.provenance.items()})
    return entries


def run_benchmark(
    cfg: BenchmarkConfig,
    out_dir=None,
    sizes=BENCHMARK_SIZES,
    b_states: int = 50,
    b_horizon: int = 10,
    progress=None,
) -> BenchmarkResult:
    """Run every benchmark arm and optionally write the artifact bundle.

    Returns the in-memory result; when ``out_dir`` is given, writes per
    size the dataset, model, fit report, normalized and raw traces and
    the stability report, plus the combined comparison table.
    """
    arms = {d: run_arm(cfg, d, b_states, b_horizon, progress) for d in sizes}
    header, table = comparison_table(cfg, arms)
    result = BenchmarkResult(cfg=cfg, arms=arms, comparison_header=header, comparison=table)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for d, arm in arms.items():
            save_dataset(arm.dataset, out / f"dataset_D{d}.csv", arm.provenance)
            save_model(arm.model, out / f"model_D{d}.csv")
            write_keyvalues(out / f"fit_report_D{d}.txt", fit_report_entries(arm))
            save_trace(arm.trace, out / f"trace_norm_D{d}.csv", raw=False)
            save_trace(arm.trace, out / f"trace_raw_D{d}.csv", raw=True)
            save_stability_report(
                arm.report,
                out / f"stability_report_D{d}.txt",
                out / f"stability_steps_D{d}.csv",
            )
        write_csv(out / "comparison.csv", header, table)
    return result


def bundle_digests(out_dir) -> dict[str, str]:
    """Content digests of every artifact in a benchmark output directory."""
    out = Path(out_dir)
    return {
        p.name: sha256_file(p)
        for p in sorted(out.iterdir())
        if p.is_file() and p.suffix in (".csv", ".txt", ".meta")
    }
