"""Discrete-time dynamics of the two latent SDE layers.

The first layer X is a Brownian bridge pinned to each inducing mark at its
event time; the second layer Y integrates X. Both follow the Euler-Maruyama
recursions

    x[k+1] = x[k] + (m - x[k]) / (t_next - k dt) * dt
             + sigma_x * sqrt((t_next - k dt)(k dt - t_prev)/(t_next - t_prev) * dt) * w
    y[k+1] = y[k] + x[k] * dt + sigma_y * sqrt(dt) * v

with w, v standard normal per dimension.

Pinning: when the step about to be taken lands within dt of the pending
event time, x is set to the mark exactly and the event is consumed (the
drift denominator is singular there; hitting the mark is the bridge's
boundary condition). Event times snap to the grid only for pinning; the
continuous waiting times are kept for density evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .inducing import InducingSequence

_LOG_2PI = math.log(2.0 * math.pi)
_TIME_TOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Uniform sampling grid: `n_steps` intervals of width `dt` from `origin`."""

    dt: float
    n_steps: int
    origin: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 1:
            raise ValueError("need at least one step")

    @property
    def end(self) -> float:
        return self.origin + self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        """Grid times t_0 .. t_K (length n_steps + 1)."""
        return self.origin + np.arange(self.n_steps + 1) * self.dt

    def pin_step(self, t_event) -> np.ndarray | int:
        """Grid step at which an event at absolute time `t_event` pins.

        The step index k satisfies t_event - k*dt < dt with k maximal, i.e.
        floor((t_event - origin)/dt) up to float tolerance.
        """
        idx = np.floor((np.asarray(t_event) - self.origin) / self.dt + _TIME_TOL).astype(int)
        return int(idx) if idx.ndim == 0 else idx


@dataclass(frozen=True, eq=False)
class NoiseParams:
    """Per-dimension diffusion scales of the two layers (componentwise >= 0)."""

    sigma_x: np.ndarray
    sigma_y: np.ndarray

    def __post_init__(self):
        sx = np.atleast_1d(np.asarray(self.sigma_x, dtype=float))
        sy = np.atleast_1d(np.asarray(self.sigma_y, dtype=float))
        if sx.shape != sy.shape:
            raise ValueError("sigma_x and sigma_y must have the same length")
        if np.any(sx < 0) or np.any(sy < 0):
            raise ValueError("noise scales must be nonnegative")
        object.__setattr__(self, "sigma_x", sx)
        object.__setattr__(self, "sigma_y", sy)

    @classmethod
    def isotropic(cls, sigma_x: float, sigma_y: float, dim: int) -> "NoiseParams":
        return cls(np.full(dim, float(sigma_x)), np.full(dim, float(sigma_y)))

    @property
    def dim(self) -> int:
        return self.sigma_x.size


@dataclass(frozen=True, eq=False)
class InitialStatePrior:
    """Independent Gaussian priors for x_0 and y_0."""

    mean_x: np.ndarray
    std_x: np.ndarray
    mean_y: np.ndarray
    std_y: np.ndarray

    def __post_init__(self):
        for name in ("mean_x", "std_x", "mean_y", "std_y"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if np.any(self.std_x < 0) or np.any(self.std_y < 0):
            raise ValueError("initial stds must be nonnegative")

    @classmethod
    def default(cls, dim: int, std: float = 1.0) -> "InitialStatePrior":
        z = np.zeros(dim)
        s = np.full(dim, float(std))
        return cls(z, s, z.copy(), s.copy())

    def sample(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        d = self.mean_x.size
        x0 = self.mean_x + self.std_x * rng.standard_normal((size, d))
        y0 = self.mean_y + self.std_y * rng.standard_normal((size, d))
        return x0, y0

    def logpdf(self, x0, y0) -> np.ndarray:
        """Joint log-density, batched over leading axes."""
        total = 0.0
        for v, mean, std in ((x0, self.mean_x, self.std_x), (y0, self.mean_y, self.std_y)):
            v = np.asarray(v, dtype=float)
            total = total + np.sum(_gauss_logpdf(v, np.broadcast_to(mean, v.shape), std**2), axis=-1)
        return total


@dataclass(frozen=True, eq=False)
class LatentPath:
    """Simulated trajectories of both layers on a grid: arrays (K+1, D)."""

    x: np.ndarray
    y: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.shape != y.shape or x.ndim != 2:
            raise ValueError("x and y must be (K+1, D) arrays of the same shape")
        if x.shape[0] != self.grid.n_steps + 1:
            raise ValueError("path length does not match the grid")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("paths must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def to_csv(self, path: str) -> None:
        d = self.dim
        header = "t," + ",".join(f"x{i + 1}" for i in range(d)) + "," + ",".join(
            f"y{i + 1}" for i in range(d)
        )
        data = np.column_stack([self.grid.times, self.x, self.y])
        rows = [header] + [",".join(repr(float(v)) for v in row) for row in data]
        from ._util import atomic_write_text

        atomic_write_text(path, "\n".join(rows) + "\n")


def _gauss_logpdf(value, mean, var):
    """Elementwise Gaussian log-pdf; var == 0 collapses to exact-match 0 / -inf."""
    value = np.asarray(value, dtype=float)
    var = np.broadcast_to(np.asarray(var, dtype=float), value.shape)
    mean = np.broadcast_to(np.asarray(mean, dtype=float), value.shape)
    out = np.empty(value.shape)
    degenerate = var == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = ~degenerate
        out[ok] = -0.5 * ((value[ok] - mean[ok]) ** 2 / var[ok] + np.log(2.0 * np.pi * var[ok]))
    out[degenerate] = np.where(value[degenerate] == mean[degenerate], 0.0, -np.inf)
    return out


def bridge_moments(t_k, dt: float, t_next, t_prev):
    """Drift denominator and diffusion factor of one bridge step from time t_k.

    factor = (t_next - t_k)(t_k - t_prev)/(t_next - t_prev), clipped at 0;
    it vanishes at both segment endpoints.
    """
    t_k = np.asarray(t_k, dtype=float)
    denom = np.asarray(t_next, dtype=float) - t_k
    span = np.asarray(t_next, dtype=float) - np.asarray(t_prev, dtype=float)
    factor = denom * (t_k - np.asarray(t_prev, dtype=float)) / span
    return denom, np.maximum(factor, 0.0)


def bridge_step(
    x_k,
    k: int,
    grid: TimeGrid,
    next_event,
    prev_event_time,
    noise: NoiseParams,
    rng: np.random.Generator,
):
    """One Euler-Maruyama step of the pinned bridge from step k to k+1.

    `next_event` is the pending (time, mark) pair. If step k+1 pins the event
    (its time lies within dt of (k+1)*dt from above), the mark is returned
    exactly; the caller must then treat the event as consumed.
    """
    t_next, m_next = next_event
    x_k = np.asarray(x_k, dtype=float)
    m_next = np.asarray(m_next, dtype=float)
    t_k = grid.origin + k * grid.dt
    t_next_arr = np.asarray(t_next, dtype=float)
    if np.any(t_k >= t_next_arr + _TIME_TOL * grid.dt):
        raise ValueError(f"step {k} is at or beyond the pending event time; advance the event first")
    pinned = grid.pin_step(t_next_arr) <= k + 1
    denom, factor = bridge_moments(t_k, grid.dt, t_next_arr, prev_event_time)
    drift = (m_next - x_k) / np.expand_dims(denom, -1) * grid.dt if x_k.ndim > 1 else (
        (m_next - x_k) / denom * grid.dt
    )
    std = noise.sigma_x * np.sqrt(np.expand_dims(factor, -1) * grid.dt) if x_k.ndim > 1 else (
        noise.sigma_x * math.sqrt(float(factor) * grid.dt)
    )
    stepped = x_k + drift + std * rng.standard_normal(x_k.shape)
    if np.ndim(pinned) == 0:
        return m_next.copy() if pinned else stepped
    return np.where(np.expand_dims(pinned, -1), m_next, stepped)


def bridge_transition_logpdf(
    x_next,
    x_k,
    k: int,
    grid: TimeGrid,
    next_event,
    prev_event_time,
    noise: NoiseParams,
):
    """Log-density of the bridge transition produced by `bridge_step`.

    A pinned step is a point mass at the mark: 0 when x_next equals it,
    -inf otherwise. A zero-variance non-pinned step (segment start, or a
    zero sigma_x component) is treated the same way around the drift mean.
    """
    t_next, m_next = next_event
    x_next = np.asarray(x_next, dtype=float)
    x_k = np.asarray(x_k, dtype=float)
    m_next = np.asarray(m_next, dtype=float)
    t_next_arr = np.asarray(t_next, dtype=float)
    pinned = grid.pin_step(t_next_arr) <= k + 1
    t_k = grid.origin + k * grid.dt
    denom, factor = bridge_moments(t_k, grid.dt, t_next_arr, prev_event_time)
    mean = x_k + (m_next - x_k) / np.expand_dims(denom, -1) * grid.dt if x_k.ndim > 1 else (
        x_k + (m_next - x_k) / denom * grid.dt
    )
    var = noise.sigma_x**2 * (np.expand_dims(factor, -1) if x_k.ndim > 1 else factor) * grid.dt
    pinned_arr = np.broadcast_to(np.asarray(pinned)[..., None] if x_k.ndim > 1 else pinned, x_next.shape)
    target_mean = np.where(pinned_arr, np.broadcast_to(m_next, x_next.shape), np.broadcast_to(mean, x_next.shape))
    target_var = np.where(pinned_arr, 0.0, np.broadcast_to(var, x_next.shape))
    ll = _gauss_logpdf(x_next, target_mean, target_var)
    return np.sum(ll, axis=-1)


def integrator_step(y_k, x_k, grid: TimeGrid, noise: NoiseParams, rng: np.random.Generator):
    """One Euler-Maruyama step of the integrator layer: y + x dt + sigma_y sqrt(dt) v."""
    y_k = np.asarray(y_k, dtype=float)
    return y_k + np.asarray(x_k, dtype=float) * grid.dt + noise.sigma_y * math.sqrt(grid.dt) * (
        rng.standard_normal(y_k.shape)
    )


def integrator_transition_logpdf(y_next, y_k, x_k, grid: TimeGrid, noise: NoiseParams):
    """Log-density of the integrator transition (Gaussian, variance sigma_y^2 dt)."""
    y_next = np.asarray(y_next, dtype=float)
    mean = np.asarray(y_k, dtype=float) + np.asarray(x_k, dtype=float) * grid.dt
    var = np.broadcast_to(noise.sigma_y**2 * grid.dt, y_next.shape)
    return np.sum(_gauss_logpdf(y_next, np.broadcast_to(mean, y_next.shape), var), axis=-1)


@dataclass(frozen=True, eq=False)
class SegmentSchedule:
    """Per-step bridge bookkeeping for a fixed event sequence on a grid.

    For each target step k = 1..K: the pending event index, whether the step
    pins it, and the effective left endpoint of the active segment (the grid
    time of the previously pinned event, or the origin).
    """

    event_index: np.ndarray
    pinned: np.ndarray
    t_prev: np.ndarray
    pin_steps: np.ndarray


def segment_schedule(seq: InducingSequence, grid: TimeGrid) -> SegmentSchedule:
    """Resolve which event each grid step bridges toward.

    Raises ValueError if the sequence is exhausted before the grid end or if
    orderliness fails (two events pinning at the same step, or an event at or
    before the origin step).
    """
    if len(seq) == 0:
        raise ValueError("event sequence is empty; need events covering the grid")
    if abs(seq.origin - grid.origin) > _TIME_TOL * grid.dt:
        raise ValueError("sequence origin must match the grid origin")
    pins = grid.pin_step(seq.times)
    if pins[0] < 1 or np.any(np.diff(pins) < 1):
        raise ValueError("orderliness violated: more than one event per grid bin")
    k = np.arange(1, grid.n_steps + 1)
    pending = np.searchsorted(pins, k, side="left")
    if pending[-1] >= len(seq):
        raise ValueError(
            f"event sequence exhausted before the grid end (last event pins at step {pins[-1]}, "
            f"grid has {grid.n_steps} steps); supply more events"
        )
    pinned = pins[pending] == k
    prev_idx = np.maximum(pending - 1, 0)
    t_prev = np.where(pending > 0, grid.origin + pins[prev_idx] * grid.dt, grid.origin)
    return SegmentSchedule(event_index=pending, pinned=pinned, t_prev=t_prev, pin_steps=pins)


def simulate_path(
    seq: InducingSequence,
    grid: TimeGrid,
    noise: NoiseParams,
    x0=None,
    y0=None,
    rng: np.random.Generator | None = None,
) -> LatentPath:
    """Forward-simulate both layers over the grid given a fixed event sequence.

    X hits every mark exactly at its pinned grid step; Y integrates X. The
    sequence must cover the grid (last event time >= grid end).
    """
    d = seq.dim
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float)
    y0 = np.zeros(d) if y0 is None else np.asarray(y0, dtype=float)
    rng = rng or np.random.default_rng()
    sched = segment_schedule(seq, grid)
    times = seq.times
    k_count = grid.n_steps
    x = np.empty((k_count + 1, d))
    y = np.empty((k_count + 1, d))
    x[0], y[0] = x0, y0
    sqrt_dt = math.sqrt(grid.dt)
    for k in range(1, k_count + 1):
        y[k] = y[k - 1] + x[k - 1] * grid.dt + noise.sigma_y * sqrt_dt * rng.standard_normal(d)
        ev = sched.event_index[k - 1]
        if sched.pinned[k - 1]:
            x[k] = seq.marks[ev]
        else:
            t_k = grid.origin + (k - 1) * grid.dt
            denom, factor = bridge_moments(t_k, grid.dt, times[ev], sched.t_prev[k - 1])
            x[k] = (
                x[k - 1]
                + (seq.marks[ev] - x[k - 1]) / denom * grid.dt
                + noise.sigma_x * math.sqrt(factor * grid.dt) * rng.standard_normal(d)
            )
    return LatentPath(x=x, y=y, grid=grid)
