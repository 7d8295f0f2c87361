"""Plain-text artifact formats: CSV tables, key=value sidecars, manifests.

Floats are printed with 17 significant digits so that every file
round-trips bit-exactly, which keeps repeated runs byte-identical under
a fixed seed.  Datasets and fitted models are CSV tables with a
``.meta`` sidecar carrying dimensions, normalization and provenance.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .kernels import Dataset, KernelInterpolant, KernelSpec, fit_interpolant
from .mpc import ClosedLoopTrace
from .narx import AffineNormalization, NarxDims


class ConfigError(ValueError):
    """Bad configuration file, malformed artifact or unusable CLI input."""


def format_float(value: float) -> str:
    return f"{float(value):.17g}"


def write_csv(path, header: list[str], rows: np.ndarray) -> None:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    lines = [",".join(header)]
    if rows.size:
        if rows.shape[1] != len(header):
            raise ValueError(
                f"{rows.shape[1]} columns of data for {len(header)} header fields"
            )
        for row in rows:
            lines.append(",".join(format_float(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such file: {path}")
    text = path.read_text().strip().splitlines()
    if not text:
        raise ConfigError(f"{path} is empty, expected a CSV header")
    header = [h.strip() for h in text[0].split(",")]
    data = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise ConfigError(
                f"{path}:{lineno}: expected {len(header)} fields, found {len(parts)}"
            )
        try:
            data.append([float(v) for v in parts])
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return header, (np.asarray(data) if data else np.empty((0, len(header))))


def write_keyvalues(path, values: dict) -> None:
    lines = []
    for key, value in values.items():
        if isinstance(value, float):
            rendered = format_float(value)
        elif isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, (list, tuple, np.ndarray)):
            rendered = ",".join(format_float(v) for v in np.asarray(value).ravel())
        else:
            rendered = str(value)
        lines.append(f"{key} = {rendered}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_keyvalues(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such file: {path}")
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def _normalization_fields(norm: AffineNormalization) -> dict:
    return {
        "y_ref": norm.y_ref,
        "y_scale": norm.y_scale,
        "u_ref": norm.u_ref,
        "u_scale": norm.u_scale,
    }


def _parse_floats(raw: str) -> np.ndarray:
    return np.array([float(v) for v in raw.split(",")])


def _normalization_from(meta: dict, path) -> AffineNormalization:
    try:
        return AffineNormalization(
            y_ref=_parse_floats(meta["y_ref"]),
            y_scale=_parse_floats(meta["y_scale"]),
            u_ref=_parse_floats(meta["u_ref"]),
            u_scale=_parse_floats(meta["u_scale"]),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: sidecar is missing the {exc.args[0]} entry") from None


def _dims_from(meta: dict, path) -> NarxDims:
    try:
        return NarxDims(p=int(meta["p"]), m=int(meta["m"]), nu=int(meta["nu"]))
    except KeyError as exc:
        raise ConfigError(f"{path}: sidecar is missing the {exc.args[0]} entry") from None


def _sidecar(path) -> Path:
    return Path(path).with_suffix(Path(path).suffix + ".meta")


def save_dataset(data: Dataset, path, provenance: dict | None = None) -> None:
    """Write a dataset as ``xi_*, y_*`` CSV plus a ``.meta`` sidecar."""
    q = data.sites.shape[1]
    header = [f"xi_{i + 1}" for i in range(q)] + [f"y_{j + 1}" for j in range(data.dims.p)]
    write_csv(path, header, np.hstack([data.sites, data.targets]))
    meta = {
        "format": "narxmpc-dataset-v1",
        "p": data.dims.p,
        "m": data.dims.m,
        "nu": data.dims.nu,
        "size": data.size,
        "contains_origin": data.contains_origin,
        **_normalization_fields(data.normalization),
    }
    if provenance:
        meta.update({f"gen_{k}": v for k, v in provenance.items()})
    write_keyvalues(_sidecar(path), meta)


def load_dataset(path) -> Dataset:
    header, table = read_csv(path)
    meta = read_keyvalues(_sidecar(path))
    dims = _dims_from(meta, path)
    q = dims.n + dims.m
    expected = [f"xi_{i + 1}" for i in range(q)] + [f"y_{j + 1}" for j in range(dims.p)]
    if header != expected:
        raise ConfigError(
            f"{path}: header {header} does not match the sidecar dimensions"
        )
    return Dataset(
        sites=table[:, :q],
        targets=table[:, q:],
        dims=dims,
        normalization=_normalization_from(meta, path),
        contains_origin=meta.get("contains_origin", "false") == "true",
    )


def save_model(model: KernelInterpolant, path) -> None:
    """Write a fitted interpolant: sites, targets and coefficients plus sidecar."""
    data = model.data
    q = data.sites.shape[1]
    header = (
        [f"xi_{i + 1}" for i in range(q)]
        + [f"y_{j + 1}" for j in range(data.dims.p)]
        + [f"alpha_{j + 1}" for j in range(data.dims.p)]
    )
    write_csv(path, header, np.hstack([data.sites, data.targets, model.coefficients]))
    meta = {
        "format": "narxmpc-model-v1",
        "p": data.dims.p,
        "m": data.dims.m,
        "nu": data.dims.nu,
        "size": data.size,
        "contains_origin": data.contains_origin,
        "family": model.spec.family,
        "sigma": model.spec.lengthscale,
        "jitter": model.jitter,
        "site_residual": model.site_residual,
        **_normalization_fields(data.normalization),
    }
    write_keyvalues(_sidecar(path), meta)


def load_model(path) -> KernelInterpolant:
    """Load a model file, refit deterministically and verify the coefficients."""
    header, table = read_csv(path)
    meta = read_keyvalues(_sidecar(path))
    dims = _dims_from(meta, path)
    if meta.get("family", "wendland_deg5") != "wendland_deg5":
        raise ConfigError(f"{path}: only wendland_deg5 models can be reloaded")
    q = dims.n + dims.m
    p = dims.p
    if len(header) != q + 2 * p:
        raise ConfigError(f"{path}: expected {q + 2 * p} columns, found {len(header)}")
    data = Dataset(
        sites=table[:, :q],
        targets=table[:, q : q + p],
        dims=dims,
        normalization=_normalization_from(meta, path),
        contains_origin=meta.get("contains_origin", "false") == "true",
    )
    spec = KernelSpec(input_dim=q, lengthscale=float(meta.get("sigma", 1.0)))
    model = fit_interpolant(spec, data, jitter=float(meta.get("jitter", 0.0)))
    stored = table[:, q + p :]
    drift = float(np.max(np.abs(stored - model.coefficients), initial=0.0))
    if drift > 1e-8:
        raise ConfigError(
            f"{path}: stored coefficients differ from the refit by {drift:.3e}; "
            "the file is inconsistent"
        )
    return model


def trace_header(dims: NarxDims) -> list[str]:
    return (
        ["k"]
        + [f"x_{i + 1}" for i in range(dims.n)]
        + [f"u_{i + 1}" for i in range(dims.m)]
        + [f"y_{i + 1}" for i in range(dims.p)]
        + ["stage_cost", "V", "W", "Y", "grad_norm", "iters", "converged"]
    )


def _trace_rows(trace: ClosedLoopTrace, raw: bool) -> np.ndarray:
    dims = trace.dims
    steps = trace.steps
    if steps == 0:
        return np.empty((0, len(trace_header(dims))))
    states = trace.states
    inputs = trace.inputs
    outputs = trace.outputs
    if raw:
        if trace.normalization is None:
            raise ValueError("trace carries no normalization; cannot denormalize")
        norm = trace.normalization
        states = norm.denormalize_state(states, dims)
        inputs = norm.denormalize_input(inputs)
        outputs = norm.denormalize_output(outputs)
    w_vals = trace.storage_values if trace.storage_values is not None else np.full(steps + 1, np.nan)
    y_vals = trace.lyapunov if trace.lyapunov is not None else np.full(steps + 1, np.nan)
    values = trace.values
    if values.shape[0] < steps + 1:
        values = np.concatenate([values, np.full(steps + 1 - values.shape[0], np.nan)])
    rows = []
    for k in range(steps):
        rows.append(
            np.concatenate(
                [
                    [k],
                    states[k],
                    inputs[k],
                    outputs[k],
                    [
                        trace.stage_costs[k],
                        values[k],
                        w_vals[k],
                        y_vals[k],
                        trace.grad_norms[k],
                        trace.iterations[k],
                        1.0 if trace.converged[k] else 0.0,
                    ],
                ]
            )
        )
    # Terminal diagnostic row: the final measured state with its value data.
    rows.append(
        np.concatenate(
            [
                [steps],
                states[steps],
                np.full(dims.m, np.nan),
                np.full(dims.p, np.nan),
                [
                    np.nan,
                    values[steps],
                    w_vals[steps],
                    y_vals[steps],
                    trace.grad_norms[steps] if trace.grad_norms.shape[0] > steps else np.nan,
                    trace.iterations[steps] if trace.iterations.shape[0] > steps else 0,
                    1.0 if (trace.converged.shape[0] > steps and trace.converged[steps]) else 0.0,
                ],
            ]
        )
    )
    return np.asarray(rows)


def save_trace(trace: ClosedLoopTrace, path, raw: bool = False) -> None:
    """Write a closed-loop trace as CSV, one row per applied step.

    A final diagnostic row carries the terminal state and its value.
    With ``raw=True`` states, inputs and outputs are denormalized; the
    scalar diagnostics keep their normalized meaning.
    """
    write_csv(path, trace_header(trace.dims), _trace_rows(trace, raw))


def load_trace(path, dims: NarxDims, horizon: int, normalization=None) -> ClosedLoopTrace:
    """Read a normalized trace CSV back into a :class:`ClosedLoopTrace`."""
    header, table = read_csv(path)
    if header != trace_header(dims):
        raise ConfigError(f"{path}: unexpected trace header for the given dimensions")
    rows = table.shape[0]
    steps = max(rows - 1, 0)
    n, m, p = dims.n, dims.m, dims.p
    col_x = slice(1, 1 + n)
    col_u = slice(1 + n, 1 + n + m)
    col_y = slice(1 + n + m, 1 + n + m + p)
    base = 1 + n + m + p
    states = table[:, col_x] if rows else np.empty((0, n))
    trace = ClosedLoopTrace(
        states=states,
        inputs=table[:steps, col_u] if steps else np.empty((0, m)),
        outputs=table[:steps, col_y] if steps else np.empty((0, p)),
        values=table[:, base + 1] if rows else np.empty(0),
        stage_costs=table[:steps, base] if steps else np.empty(0),
        grad_norms=table[:, base + 4] if rows else np.empty(0),
        iterations=table[:, base + 5].astype(int) if rows else np.empty(0, dtype=int),
        converged=table[:, base + 6] > 0.5 if rows else np.empty(0, dtype=bool),
        dims=dims,
        horizon=horizon,
        normalization=normalization,
        storage_values=table[:, base + 2] if rows else None,
        lyapunov=table[:, base + 3] if rows else None,
    )
    return trace


def save_stability_report(report, path_txt, path_csv=None) -> None:
    """Write a stability report as key=value, plus an optional per-step CSV."""
    entries = {
        "verdict": report.verdict,
        "model_tag": report.model_tag,
        "steps": report.steps,
        "horizon": report.horizon,
        "deadband": report.deadband,
        "margin_fraction": report.margin_fraction,
        "eta": report.eta,
        "sigma_min": report.sigma_min,
        "active_steps": report.active_steps,
        "decay_rate": report.decay_rate,
        "decay_r2": report.decay_r2,
        "decay_points": report.decay_points,
    }
    if report.alpha is not None:
        entries["alpha"] = report.alpha
        entries["alpha_certified"] = report.alpha_certified
    if report.first_violation is not None:
        entries["first_violation"] = report.first_violation
    if report.gamma_bar is not None:
        entries["gamma_bar"] = report.gamma_bar
        entries["min_horizon"] = report.min_horizon_value
        entries["horizon_sufficient"] = report.horizon_sufficient
        entries["b_values"] = report.b_values
        entries["growth_failures"] = report.growth_failures
        entries["sandwich_max_excess"] = report.sandwich_max_excess
    write_keyvalues(path_txt, entries)
    if path_csv is not None:
        k = np.arange(report.state_norms.shape[0])
        deltas = np.concatenate([report.deltas, [np.nan]])
        v_vals = report.lyapunov - report.storage_values
        rows = np.column_stack(
            [
                k,
                report.state_norms,
                report.errors,
                v_vals,
                report.storage_values,
                report.lyapunov,
                deltas,
            ]
        )
        write_csv(
            path_csv,
            ["k", "state_norm", "error", "V", "W", "Y", "delta"],
            rows,
        )


def write_manifest(path, entries: dict) -> None:
    Path(path).write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")


#: Accepted configuration keys and the benchmark fields they set.
CONFIG_KEYS = {
    "D": ("d", int),
    "N": ("horizon", int),
    "Q": ("q_weight", float),
    "R": ("r_weight", float),
    "nu": ("nu", int),
    "steps": ("steps", int),
    "seed": ("seed", int),
    "u_lo": ("u_lo", float),
    "u_hi": ("u_hi", float),
    "dt": ("dt", float),
    "mode": ("mode", str),
    "sigma": ("sigma", float),
    "jitter": ("jitter", float),
    "h0": ("h0", float),
}


def parse_benchmark_config(path) -> dict:
    """Parse a key=value benchmark configuration into constructor kwargs."""
    raw = read_keyvalues(path)
    kwargs = {}
    for key, value in raw.items():
        if key not in CONFIG_KEYS:
            accepted = ", ".join(sorted(CONFIG_KEYS))
            raise ConfigError(
                f"{path}: unknown config key {key!r}; accepted keys: {accepted}"
            )
        field_name, caster = CONFIG_KEYS[key]
        try:
            kwargs[field_name] = caster(value)
        except ValueError:
            raise ConfigError(
                f"{path}: invalid value {value!r} for key {key!r}"
            ) from None
    return kwargs
