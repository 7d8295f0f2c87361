"""Regressor arithmetic for NARX models with a state-space lift.

A NARX model of lag depth ``nu`` predicts the next output from the last
``nu`` outputs and the last ``nu - 1`` applied inputs.  Stacking those
histories newest-first gives a regressor vector that doubles as the state
of an equivalent state-space system: one step shifts the history blocks
and inserts the freshly predicted output and the freshly applied input.

Everything in this module operates on plain float64 arrays.  Regressors
are 1-D arrays of length ``dims.n``; batched variants accept arrays whose
last axis is the regressor axis.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np


class DimensionMismatchError(ValueError):
    """An array argument does not match the declared NARX dimensions."""


@dataclass(frozen=True)
class NarxDims:
    """Output dimension ``p``, input dimension ``m`` and lag depth ``nu``.

    The regressor length is ``n = nu * p + (nu - 1) * m``: ``nu`` stacked
    outputs followed by ``nu - 1`` stacked inputs, both newest-first.
    """

    p: int
    m: int
    nu: int

    def __post_init__(self) -> None:
        for name in ("p", "m", "nu"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise DimensionMismatchError(
                    f"{name} must be a positive integer, got {value!r}"
                )

    @property
    def n(self) -> int:
        return self.nu * self.p + (self.nu - 1) * self.m

    @property
    def n_outputs_block(self) -> int:
        """Length of the stacked-output block at the front of the regressor."""
        return self.nu * self.p

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split a regressor into its output-history and input-history blocks."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise DimensionMismatchError(
                f"regressor has length {x.shape[-1]}, expected n={self.n}"
            )
        return x[..., : self.n_outputs_block], x[..., self.n_outputs_block :]


def build_regressor(y_hist: np.ndarray, u_hist: np.ndarray, dims: NarxDims) -> np.ndarray:
    """Stack output and input histories (newest first) into a regressor.

    Parameters
    ----------
    y_hist : array, shape (nu, p)
        Outputs ``y(k), y(k-1), ..., y(k-nu+1)``, newest first.
    u_hist : array, shape (nu - 1, m)
        Inputs ``u(k-1), ..., u(k-nu+1)``, newest first.  For ``nu = 1``
        this block is empty.
    """
    y_hist = np.atleast_2d(np.asarray(y_hist, dtype=float))
    u_hist = np.asarray(u_hist, dtype=float).reshape(-1, dims.m) if dims.nu > 1 else np.empty((0, dims.m))
    if y_hist.shape != (dims.nu, dims.p):
        raise DimensionMismatchError(
            f"y_hist has shape {y_hist.shape}, expected ({dims.nu}, {dims.p})"
        )
    if u_hist.shape != (dims.nu - 1, dims.m):
        raise DimensionMismatchError(
            f"u_hist has shape {u_hist.shape}, expected ({dims.nu - 1}, {dims.m})"
        )
    return np.concatenate([y_hist.ravel(), u_hist.ravel()])


def output_projection(x: np.ndarray, dims: NarxDims) -> np.ndarray:
    """Return the current output ``y(k)``, the leading ``p`` regressor entries."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dims.n:
        raise DimensionMismatchError(
            f"regressor has length {x.shape[-1]}, expected n={dims.n}"
        )
    return x[..., : dims.p]


def shift_state(x: np.ndarray, y_next: np.ndarray, u: np.ndarray, dims: NarxDims) -> np.ndarray:
    """Advance the regressor one step given the next output and applied input.

    The new regressor is ``[y_next; previous outputs except the oldest;
    u; previous inputs except the oldest]``.  History blocks are copied
    verbatim, so repeated shifting is exact.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y_next = np.atleast_1d(np.asarray(y_next, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape[-1] != dims.n:
        raise DimensionMismatchError(
            f"regressor has length {x.shape[-1]}, expected n={dims.n}"
        )
    if y_next.shape[-1] != dims.p:
        raise DimensionMismatchError(
            f"y_next has length {y_next.shape[-1]}, expected p={dims.p}"
        )
    if u.shape[-1] != dims.m:
        raise DimensionMismatchError(
            f"u has length {u.shape[-1]}, expected m={dims.m}"
        )
    nb = dims.n_outputs_block
    parts = [y_next, x[..., : nb - dims.p]]
    if dims.nu > 1:
        parts.append(u)
        parts.append(x[..., nb : dims.n - dims.m])
    return np.concatenate(parts, axis=-1)


class NarxDynamics(ABC):
    """A deterministic map from (regressor, input) to the next output.

    Subclasses must set ``dims`` and implement :meth:`output`.  Batched
    evaluation and rollouts have generic fallbacks; performance-critical
    implementations override them.
    """

    dims: NarxDims

    @abstractmethod
    def output(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Next output for a single regressor ``x`` and input ``u``."""

    def output_batch(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Next outputs for rows of ``X`` (B, n) and ``U`` (B, m)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float))
        return np.stack([self.output(x, u) for x, u in zip(X, U)])

    @property
    def differentiable(self) -> bool:
        """Whether :meth:`jacobians` is available."""
        return False

    def jacobians(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Jacobians of the output map w.r.t. ``x`` (p, n) and ``u`` (p, m)."""
        raise NotImplementedError(f"{type(self).__name__} provides no Jacobians")

    def rollout_batch(
        self, X0: np.ndarray, U_seq: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Roll out B input sequences in lockstep.

        Parameters
        ----------
        X0 : array, shape (B, n)
            Initial regressors.
        U_seq : array, shape (B, N, m)
            Input sequences.

        Returns
        -------
        states : array, shape (B, N + 1, n)
        outputs : array, shape (B, N, p)
        """
        X0 = np.atleast_2d(np.asarray(X0, dtype=float))
        U_seq = np.asarray(U_seq, dtype=float)
        b, horizon = U_seq.shape[0], U_seq.shape[1]
        states = np.empty((b, horizon + 1, self.dims.n))
        outputs = np.empty((b, horizon, self.dims.p))
        states[:, 0] = X0
        for k in range(horizon):
            y_next = self.output_batch(states[:, k], U_seq[:, k])
            outputs[:, k] = y_next
            states[:, k + 1] = shift_state(states[:, k], y_next, U_seq[:, k], self.dims)
        return states, outputs


class FunctionDynamics(NarxDynamics):
    """Wrap a plain callable ``f(x, u) -> y_next`` as :class:`NarxDynamics`."""

    def __init__(self, dims, fn, jacobian_fn=None, batch_fn=None):
        self.dims = dims
        self._fn = fn
        self._jacobian_fn = jacobian_fn
        self._batch_fn = batch_fn

    def output(self, x, u):
        return np.atleast_1d(np.asarray(self._fn(x, u), dtype=float))

    def output_batch(self, X, U):
        if self._batch_fn is not None:
            return np.atleast_2d(np.asarray(self._batch_fn(X, U), dtype=float))
        return super().output_batch(X, U)

    @property
    def differentiable(self) -> bool:
        return self._jacobian_fn is not None

    def jacobians(self, x, u):
        if self._jacobian_fn is None:
            raise NotImplementedError("no Jacobian callable supplied")
        dy_dx, dy_du = self._jacobian_fn(x, u)
        return np.asarray(dy_dx, dtype=float), np.asarray(dy_du, dtype=float)


def lift_step(
    f: NarxDynamics, x: np.ndarray, u: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One step of the lifted state-space system.

    Returns the shifted regressor and the predicted output.
    """
    y_next = f.output(x, u)
    return shift_state(x, y_next, u, f.dims), y_next


def rollout(
    f: NarxDynamics, x0: np.ndarray, u_seq: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Roll the lifted system forward under an input sequence.

    Parameters
    ----------
    f : NarxDynamics
    x0 : array, shape (n,)
    u_seq : array, shape (N, m)

    Returns
    -------
    states : array, shape (N + 1, n)
        ``x(0), ..., x(N)``.
    outputs : array, shape (N, p)
        ``y(1), ..., y(N)``.
    """
    x0 = np.asarray(x0, dtype=float)
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    if x0.shape != (f.dims.n,):
        raise DimensionMismatchError(
            f"x0 has shape {x0.shape}, expected ({f.dims.n},)"
        )
    if u_seq.shape[1] != f.dims.m:
        raise DimensionMismatchError(
            f"u_seq has {u_seq.shape[1]} input columns, expected m={f.dims.m}"
        )
    horizon = u_seq.shape[0]
    states = np.empty((horizon + 1, f.dims.n))
    outputs = np.empty((horizon, f.dims.p))
    states[0] = x0
    for k in range(horizon):
        states[k + 1], outputs[k] = lift_step(f, states[k], u_seq[k])
    return states, outputs


@dataclass(frozen=True)
class AffineNormalization:
    """Shift-and-scale map between raw physical units and working coordinates.

    Outputs map as ``(y - y_ref) / y_scale`` and inputs as
    ``(u - u_ref) / u_scale``, componentwise.  The reference point, which
    is the controlled equilibrium in the benchmark, maps to the origin.
    """

    y_ref: np.ndarray
    y_scale: np.ndarray
    u_ref: np.ndarray
    u_scale: np.ndarray

    def __post_init__(self) -> None:
        for name in ("y_ref", "y_scale", "u_ref", "u_scale"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if np.any(self.y_scale <= 0) or np.any(self.u_scale <= 0):
            raise ValueError("normalization scales must be strictly positive")

    @property
    def p(self) -> int:
        return self.y_ref.shape[0]

    @property
    def m(self) -> int:
        return self.u_ref.shape[0]

    def normalize_output(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.y_ref) / self.y_scale

    def denormalize_output(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) * self.y_scale + self.y_ref

    def normalize_input(self, u: np.ndarray) -> np.ndarray:
        return (np.asarray(u, dtype=float) - self.u_ref) / self.u_scale

    def denormalize_input(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u, dtype=float) * self.u_scale + self.u_ref

    def _state_ref_scale(self, dims: NarxDims) -> tuple[np.ndarray, np.ndarray]:
        ref = np.concatenate(
            [np.tile(self.y_ref, dims.nu), np.tile(self.u_ref, dims.nu - 1)]
        )
        scale = np.concatenate(
            [np.tile(self.y_scale, dims.nu), np.tile(self.u_scale, dims.nu - 1)]
        )
        return ref, scale

    def normalize_state(self, x: np.ndarray, dims: NarxDims) -> np.ndarray:
        """Normalize a regressor blockwise (output lags, then input lags)."""
        ref, scale = self._state_ref_scale(dims)
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != dims.n:
            raise DimensionMismatchError(
                f"regressor has length {x.shape[-1]}, expected n={dims.n}"
            )
        return (x - ref) / scale

    def denormalize_state(self, x: np.ndarray, dims: NarxDims) -> np.ndarray:
        ref, scale = self._state_ref_scale(dims)
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != dims.n:
            raise DimensionMismatchError(
                f"regressor has length {x.shape[-1]}, expected n={dims.n}"
            )
        return x * scale + ref


@dataclass(frozen=True)
class Box:
    """Axis-aligned box used for input constraints and domain checks."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "lo", np.atleast_1d(np.asarray(self.lo, dtype=float)))
        object.__setattr__(self, "hi", np.atleast_1d(np.asarray(self.hi, dtype=float)))
        if self.lo.shape != self.hi.shape:
            raise ValueError("box bounds must have matching shapes")
        if np.any(self.lo > self.hi):
            raise ValueError("box has lo > hi in some component")

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Componentwise membership check; returns a bool per point."""
        points = np.asarray(points, dtype=float)
        inside = (points >= self.lo - tol) & (points <= self.hi + tol)
        return np.all(inside, axis=-1)

    def clip(self, points: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(points, dtype=float), self.lo, self.hi)
