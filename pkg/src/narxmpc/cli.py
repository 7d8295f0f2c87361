"""Command-line interface.

Subcommands
-----------
generate   draw an identification dataset from the two-tank plant
fit        fit a kernel surrogate to a dataset file
simulate   run the receding-horizon loop on the plant with a fitted model
certify    build a stability certificate for a model and a recorded trace
benchmark  run the full two-dataset comparison

Configuration comes from an optional key=value file (see ``--config``);
command-line flags override file values.  Exit codes: 0 on success, 1
for configuration or I/O problems, 2 when a certification verdict
fails.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (
    BENCHMARK_SIZES,
    fit_report_entries,
    make_mpc_config,
    plant_views,
    probe_sites,
    run_arm,
    run_benchmark,
)
from .fileio import (
    ConfigError,
    load_dataset,
    load_model,
    load_trace,
    parse_benchmark_config,
    save_dataset,
    save_model,
    save_stability_report,
    save_trace,
    sha256_file,
    write_keyvalues,
    write_manifest,
)
from .kernels import KernelFitError, KernelSpec, fill_distance, fit_interpolant
from .mpc import SolverError, run_closed_loop
from .stability import estimate_growth_bound, storage_matrix, verify_decrease
from .twotank import BenchmarkConfig, generate_dataset, sample_state_grid


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", type=Path, help="key=value configuration file")
    sp.add_argument("--out", type=Path, default=Path("."), help="output directory")
    sp.add_argument("--seed", type=int, help="override the configured seed")
    sp.add_argument("--verbose", action="store_true", help="print progress")


def _say(args):
    if args.verbose:
        return lambda msg: print(msg, file=sys.stderr)
    return lambda msg: None


def _build_config(args, **overrides) -> BenchmarkConfig:
    kwargs = parse_benchmark_config(args.config) if args.config else {}
    if args.seed is not None:
        kwargs["seed"] = args.seed
    for key, value in overrides.items():
        if value is not None:
            kwargs[key] = value
    try:
        return BenchmarkConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _manifest(args, command: str, cfg: BenchmarkConfig | None, outputs: list[Path], started: float) -> None:
    entries = {
        "command": command,
        "version": __version__,
        "config_file": str(args.config) if args.config else None,
        "config": None if cfg is None else {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        "outputs": {p.name: sha256_file(p) for p in outputs if p.exists()},
        "duration_s": round(time.time() - started, 3),
    }
    write_manifest(args.out / "manifest.json", entries)


def cmd_generate(args) -> int:
    started = time.time()
    cfg = _build_config(args, d=args.D, mode=args.mode)
    args.out.mkdir(parents=True, exist_ok=True)
    data, provenance = generate_dataset(cfg)
    path = args.out / f"dataset_D{cfg.d}.csv"
    save_dataset(data, path, provenance)
    _say(args)(f"wrote {data.size} sites to {path}")
    _manifest(args, "generate", cfg, [path, path.with_suffix(".csv.meta")], started)
    return 0


def cmd_fit(args) -> int:
    started = time.time()
    cfg = _build_config(args, sigma=args.sigma, jitter=args.jitter)
    data = load_dataset(args.data)
    spec = KernelSpec(input_dim=data.sites.shape[1], lengthscale=cfg.sigma)
    model = fit_interpolant(spec, data, jitter=cfg.jitter)
    args.out.mkdir(parents=True, exist_ok=True)
    model_path = args.out / "model.csv"
    save_model(model, model_path)
    probes = probe_sites(cfg, 2000, seed=cfg.seed + 23)
    entries = {
        "size": data.size,
        "sigma": model.spec.lengthscale,
        "jitter": model.jitter,
        "certificate_degraded": model.certificate_degraded,
        "site_residual": model.site_residual,
        "rkhs_norm": model.rkhs_norm(),
        "fill_distance": fill_distance(data.sites, probes),
    }
    report_path = args.out / "fit_report.txt"
    write_keyvalues(report_path, entries)
    _say(args)(f"fitted {data.size} sites, site residual {model.site_residual:.2e}")
    _manifest(
        args, "fit", cfg, [model_path, model_path.with_suffix(".csv.meta"), report_path], started
    )
    return 0


def cmd_simulate(args) -> int:
    started = time.time()
    cfg = _build_config(args, steps=args.steps, horizon=args.horizon)
    model = load_model(args.model)
    if model.dims != cfg.dims:
        raise ConfigError(
            f"model dimensions {model.dims} do not match the configuration {cfg.dims}"
        )
    mpc_cfg = make_mpc_config(cfg)
    storage = storage_matrix(cfg.dims, mpc_cfg.weights)
    _, stateful = plant_views(cfg)
    x0, _ = cfg.initial_condition()
    trace = run_closed_loop(
        stateful,
        model.as_dynamics(),
        mpc_cfg,
        x0,
        cfg.steps,
        storage_matrix=storage.P,
        normalization=cfg.normalization(),
    )
    args.out.mkdir(parents=True, exist_ok=True)
    norm_path = args.out / "trace_norm.csv"
    raw_path = args.out / "trace_raw.csv"
    save_trace(trace, norm_path, raw=False)
    save_trace(trace, raw_path, raw=True)
    say = _say(args)
    if trace.failed_step is not None:
        say(f"solver failed at step {trace.failed_step}: {trace.failure}")
    say(f"ran {trace.steps} steps; final state norm {np.linalg.norm(trace.states[-1]):.3e}")
    _manifest(args, "simulate", cfg, [norm_path, raw_path], started)
    return 0


def cmd_certify(args) -> int:
    started = time.time()
    cfg = _build_config(args)
    model = load_model(args.model)
    if model.dims != cfg.dims:
        raise ConfigError(
            f"model dimensions {model.dims} do not match the configuration {cfg.dims}"
        )
    mpc_cfg = make_mpc_config(cfg)
    storage = storage_matrix(cfg.dims, mpc_cfg.weights)
    trace = load_trace(args.trace, cfg.dims, cfg.horizon, cfg.normalization())
    grid = sample_state_grid(cfg, args.b_states, seed=cfg.seed + 29, min_norm=1e-3)
    growth = estimate_growth_bound(
        model.as_dynamics(), mpc_cfg, grid, args.b_horizon, model_tag="surrogate"
    )
    report = verify_decrease(
        trace, storage, margin_fraction=args.margin, growth=growth, model_tag="surrogate"
    )
    args.out.mkdir(parents=True, exist_ok=True)
    report_path = args.out / "stability_report.txt"
    steps_path = args.out / "stability_steps.csv"
    save_stability_report(report, report_path, steps_path)
    say = _say(args)
    say(f"verdict: {report.verdict}")
    if report.gamma_bar is not None:
        say(f"gamma_bar={report.gamma_bar:.3f} min_horizon={report.min_horizon_value:.2f}")
    _manifest(args, "certify", cfg, [report_path, steps_path], started)
    print(report.verdict)
    return 0 if report.ok else 2


def cmd_benchmark(args) -> int:
    started = time.time()
    cfg = _build_config(args)
    sizes = tuple(args.only_D) if args.only_D else BENCHMARK_SIZES
    result = run_benchmark(
        cfg,
        out_dir=args.out,
        sizes=sizes,
        b_states=args.b_states,
        b_horizon=args.b_horizon,
        progress=_say(args),
    )
    outputs = [p for p in sorted(args.out.iterdir()) if p.is_file() and p.name != "manifest.json"]
    _manifest(args, "benchmark", cfg, outputs, started)
    bad = [d for d, arm in result.arms.items() if not arm.report.ok]
    for d, arm in sorted(result.arms.items()):
        print(f"D={d}: {arm.report.verdict}")
    return 2 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="narxmpc",
        description="Kernel-surrogate NARX identification, MPC and stability certificates",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("generate", help="draw an identification dataset")
    _add_common(sp)
    sp.add_argument("--D", type=int, help="number of sites (including the equilibrium)")
    sp.add_argument("--mode", choices=["trajectory", "state_grid"], help="sampling mode")
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("fit", help="fit a kernel surrogate to a dataset")
    _add_common(sp)
    sp.add_argument("--data", type=Path, required=True, help="dataset CSV")
    sp.add_argument("--sigma", type=float, help="kernel lengthscale")
    sp.add_argument("--jitter", type=float, help="diagonal regularization")
    sp.set_defaults(fn=cmd_fit)

    sp = sub.add_parser("simulate", help="closed-loop run on the plant")
    _add_common(sp)
    sp.add_argument("--model", type=Path, required=True, help="fitted model CSV")
    sp.add_argument("--steps", type=int, help="closed-loop steps")
    sp.add_argument("--horizon", type=int, help="prediction horizon")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("certify", help="stability certificate for a recorded trace")
    _add_common(sp)
    sp.add_argument("--model", type=Path, required=True, help="fitted model CSV")
    sp.add_argument("--trace", type=Path, required=True, help="normalized trace CSV")
    sp.add_argument("--b-states", type=int, default=200, help="growth-bound sample states")
    sp.add_argument("--b-horizon", type=int, default=10, help="largest growth-bound horizon")
    sp.add_argument("--margin", type=float, default=0.0, help="certified-alpha safety margin")
    sp.set_defaults(fn=cmd_certify)

    sp = sub.add_parser("benchmark", help="full two-dataset comparison")
    _add_common(sp)
    sp.add_argument(
        "--only-D",
        type=int,
        nargs="+",
        metavar="D",
        help="restrict to these dataset sizes",
    )
    sp.add_argument("--b-states", type=int, default=50)
    sp.add_argument("--b-horizon", type=int, default=10)
    sp.set_defaults(fn=cmd_benchmark)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (KernelFitError, SolverError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
