"""Delay differential equation machinery: interpolating history buffer,
classical RK4 stepping, method-of-steps solving, and the physics-guided
evolution right-hand side (graph diffusion + delayed graph advection +
a source/sink network over current state and covariates).

Gradients propagate by differentiating the discrete solver: every stage,
buffer append, and interpolated lookup is ordinary tape arithmetic.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np

from .blocks import GnnParams, MlpParams, gnn_khop, mlp
from .tensor import Tensor, add, concat_last_dim, scale

TIME_EPS = 1e-9


class HistoryUnderflowError(ValueError):
    """Delayed lookup before the start of the recorded history."""


class SolverDivergenceError(RuntimeError):
    """Non-finite state produced while integrating."""

    def __init__(self, time: float):
        self.time = time
        super().__init__(f"solver produced a non-finite state at t = {time:g}")


class HistoryBuffer:
    """Time-stamped states over [t_min, t_max] with interpolated lookup.

    Knots are strictly increasing in time and append-only. Queries between
    knots use cubic Hermite interpolation when both bracketing knots carry a
    derivative, linear interpolation otherwise; queries at a knot return that
    knot's state object exactly.
    """

    def __init__(self, times, states, derivatives=None):
        times = [float(t) for t in times]
        if len(times) != len(states) or not times:
            raise ValueError("times and states must be non-empty and equal length")
        if any(t1 - t0 <= 0 for t0, t1 in zip(times, times[1:])):
            raise ValueError("knot times must be strictly increasing")
        if derivatives is None:
            derivatives = [None] * len(times)
        self._times = times
        self._states = list(states)
        self._derivs = list(derivatives)

    @property
    def span(self) -> tuple[float, float]:
        return self._times[0], self._times[-1]

    @property
    def knot_times(self) -> tuple[float, ...]:
        return tuple(self._times)

    def append(self, t: float, state: Tensor, derivative: Tensor | None = None) -> None:
        t = float(t)
        if t <= self._times[-1]:
            raise ValueError(
                f"append time {t:g} not after current end {self._times[-1]:g}"
            )
        self._times.append(t)
        self._states.append(state)
        self._derivs.append(derivative)

    def attach_end_derivative(self, derivative: Tensor) -> None:
        """Give the terminal knot a derivative it was created without.

        Only upgrades interpolation on segments appended afterwards; queries
        already answered are unaffected because the left-side segment still
        lacks a derivative at its other end.
        """
        if self._derivs[-1] is not None:
            raise ValueError("terminal knot already has a derivative")
        self._derivs[-1] = derivative

    def query(self, t: float) -> Tensor:
        t = float(t)
        lo, hi = self.span
        if t < lo - TIME_EPS or t > hi + TIME_EPS:
            raise HistoryUnderflowError(
                f"query at t = {t:g} outside recorded span [{lo:g}, {hi:g}]"
            )
        t = min(max(t, lo), hi)
        k = bisect.bisect_left(self._times, t)
        if k < len(self._times) and abs(self._times[k] - t) <= TIME_EPS:
            return self._states[k]
        if k > 0 and abs(self._times[k - 1] - t) <= TIME_EPS:
            return self._states[k - 1]
        i0, i1 = k - 1, k
        t0, t1 = self._times[i0], self._times[i1]
        y0, y1 = self._states[i0], self._states[i1]
        d0, d1 = self._derivs[i0], self._derivs[i1]
        dt = t1 - t0
        s = (t - t0) / dt
        if d0 is not None and d1 is not None:
            h00 = 2 * s**3 - 3 * s**2 + 1
            h10 = s**3 - 2 * s**2 + s
            h01 = -2 * s**3 + 3 * s**2
            h11 = s**3 - s**2
            return add(
                add(scale(y0, h00), scale(d0, h10 * dt)),
                add(scale(y1, h01), scale(d1, h11 * dt)),
            )
        return add(scale(y0, 1.0 - s), scale(y1, s))


def rk4_step(f, t: float, h_t: Tensor, dt: float, history, interval: int = 0,
             k1: Tensor | None = None) -> Tensor:
    """One classical RK4 step of ``dh/dt = f(t, h, history, interval)``.

    Stage evaluations at t, t+dt/2 (twice), and t+dt; delayed lookups inside
    ``f`` read the history buffer at the stage times. ``k1`` may be supplied
    when the caller already evaluated f at (t, h_t).
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    half = 0.5 * dt
    if k1 is None:
        k1 = f(t, h_t, history, interval)
    k2 = f(t + half, add(h_t, scale(k1, half)), history, interval)
    k3 = f(t + half, add(h_t, scale(k2, half)), history, interval)
    k4 = f(t + dt, add(h_t, scale(k3, dt)), history, interval)
    increment = add(add(k1, scale(add(k2, k3), 2.0)), k4)
    return add(h_t, scale(increment, dt / 6.0))


def rk4_solve(f, y0: Tensor, t0: float, dt: float, n_steps: int) -> list[Tensor]:
    """Plain RK4 rollout for delay-free right-hand sides (history unused)."""
    states = []
    y = y0
    for s in range(n_steps):
        y = rk4_step(f, t0 + s * dt, y, dt, history=None)
        states.append(y)
    return states


def solve_dde(
    f,
    initial: Tensor,
    history: HistoryBuffer,
    horizon: int,
    dt_out: float,
    substeps: int = 4,
) -> list[Tensor]:
    """Method-of-steps integration over ``horizon`` output intervals.

    ``history`` must end exactly at the initial time with ``initial`` as its
    terminal state. Integration proceeds in RK4 substeps of dt_out/substeps;
    each accepted state is appended to the buffer together with its
    derivative so later delayed lookups interpolate solved values. Returns
    the states at the ``horizon`` output grid points.

    ``f(t, state, history, interval)`` receives the index of the output
    interval being integrated so piecewise inputs (wind graphs, covariates)
    can be selected without decoding t.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if substeps < 1:
        raise ValueError(f"substeps must be >= 1, got {substeps}")
    if dt_out <= 0:
        raise ValueError(f"output grid spacing must be positive, got {dt_out}")
    t0 = history.span[1]
    if history._states[-1] is not initial and not np.array_equal(
        history._states[-1].data, initial.data
    ):
        raise ValueError("history must end with the initial state at the start time")

    dt = dt_out / substeps
    outputs: list[Tensor] = []
    state = initial
    step_count = 0
    for p in range(horizon):
        # fresh k1 per interval: piecewise inputs may jump at the boundary
        k1 = f(t0 + step_count * dt, state, history, p)
        if p == 0 and history._derivs[-1] is None:
            history.attach_end_derivative(k1)
        for _ in range(substeps):
            t = t0 + step_count * dt
            state = rk4_step(f, t, state, dt, history, interval=p, k1=k1)
            step_count += 1
            t_new = t0 + step_count * dt
            if not np.all(np.isfinite(state.data)):
                raise SolverDivergenceError(t_new)
            k1 = f(t_new, state, history, interval=p)
            history.append(t_new, state, k1)
        outputs.append(state)
    return outputs


# ---------------------------------------------------------------------------
# physics-guided evolution function


@dataclass
class EvolutionParams:
    """Diffusion/advection graph convolutions plus a source/sink network.

    ``diffusion_coeff`` is the fixed dimensionless coefficient scaling the
    diffusion term; ``tau`` is the delay in solver time units (grid steps).
    """

    diffusion_coeff: float
    tau: float
    gnn_diff: GnnParams
    gnn_adv: GnnParams
    source_mlp: MlpParams

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    def named(self, prefix: str):
        yield from self.gnn_diff.named(f"{prefix}.gnn_diff")
        yield from self.gnn_adv.named(f"{prefix}.gnn_adv")
        yield from self.source_mlp.named(f"{prefix}.source_mlp")


def evolution_rhs(
    h_t: Tensor,
    h_delayed: Tensor,
    a_diff,
    a_adv,
    m_t: Tensor,
    params: EvolutionParams,
) -> Tensor:
    """D * GNN(A_diff, h) + GNN(A_adv, h_delayed) + MLP(h || M)."""
    diffusion = scale(gnn_khop(a_diff, h_t, params.gnn_diff), params.diffusion_coeff)
    advection = gnn_khop(a_adv, h_delayed, params.gnn_adv)
    source = mlp(concat_last_dim([h_t, m_t]), params.source_mlp)
    return add(add(diffusion, advection), source)


def evolution_f(
    t: float,
    h_t: Tensor,
    history: HistoryBuffer,
    a_diff,
    a_adv_t,
    m_t: Tensor,
    params: EvolutionParams,
) -> Tensor:
    """Evolution right-hand side with the delayed state read from history."""
    h_delayed = history.query(t - params.tau)
    return evolution_rhs(h_t, h_delayed, a_diff, a_adv_t, m_t, params)


def dump_trajectory(history: HistoryBuffer, path) -> None:
    """Write every knot as CSV rows (t, station, dimension, value)."""
    with open(path, "w") as fh:
        fh.write("t,station,dimension,value\n")
        for t, state in zip(history._times, history._states):
            arr = state.data
            for i in range(arr.shape[0]):
                for k in range(arr.shape[1]):
                    fh.write(f"{t:.17g},{i},{k},{arr[i, k]:.17g}\n")
