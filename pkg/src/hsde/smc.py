"""Sequential Monte Carlo filter for joint inducing-event and state inference.

Each particle carries its own event sequence plus (x, y) trajectories. Per
time step: (1) event birth — a particle whose pending event pins at this step
consumes it and draws the next (waiting time, mark) pair from the current
model; (2) propose (x_k, y_k); (3) weight by observation likelihood times the
transition/proposal ratio (which cancels to the likelihood alone under the
bootstrap proposal); (4) normalize and accumulate the marginal-likelihood
estimate; (5) resample when the effective sample size drops below the
threshold.

All randomness is drawn from streams keyed by (seed, stage, step), so results
are reproducible and independent of how particle-level work is partitioned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from ._util import substream, weighted_quantile
from .inducing import InducingSequence, sample_waiting_times
from .obs import GaussianObsModel, ObservationSeries, observation_loglik
from .sde import (
    TimeGrid,
    bridge_moments,
    bridge_step,
    bridge_transition_logpdf,
    integrator_step,
    integrator_transition_logpdf,
    segment_schedule,
)

if TYPE_CHECKING:  # pragma: no cover
    from .em import ModelParams

_TIME_TOL = 1e-9


class FilterDegenerateError(RuntimeError):
    """All particle weights collapsed to zero or NaN at some step."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"particle filter degenerate at step {step}: all weights zero or NaN")


@dataclass(frozen=True)
class SmcConfig:
    """Filter settings: particle count, proposal, resampling policy, storage."""

    n_particles: int
    proposal: str = "bootstrap"
    resampling: str = "systematic"
    ess_threshold: float = 0.5
    seed: int = 0
    storage: str = "full-path"
    guided_blend: float = 0.5
    summary_bands: bool = True
    max_path_memory_mb: float = 4096.0

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        if not 0.0 < self.ess_threshold <= 1.0:
            raise ValueError("ess_threshold must be in (0, 1]")
        if self.proposal not in ("bootstrap", "guided"):
            raise ValueError(f"unknown proposal {self.proposal!r}")
        if self.resampling not in ("systematic", "multinomial"):
            raise ValueError(f"unknown resampling scheme {self.resampling!r}")
        if self.storage not in ("full-path", "filtered-summary"):
            raise ValueError(f"unknown storage mode {self.storage!r}")
        if not 0.0 <= self.guided_blend <= 1.0:
            raise ValueError("guided_blend must be in [0, 1]")


@dataclass(eq=False)
class Particle:
    """Single-particle view: trajectories so far plus its event sequence.

    The last entry of `events` is the pending (not yet pinned) event.
    """

    x_path: np.ndarray
    y_path: np.ndarray
    events: InducingSequence
    n_events: int
    weight: float
    grid: TimeGrid

    @property
    def step(self) -> int:
        return self.x_path.shape[0] - 1

    def pending_event(self) -> tuple[float, np.ndarray]:
        times = self.events.times
        return float(times[-1]), self.events.marks[-1]

    def prev_event_time(self) -> float:
        """Effective left endpoint of the active bridge segment (grid-pinned)."""
        times = self.events.times
        if times.size < 2:
            return self.grid.origin
        return self.grid.origin + self.grid.pin_step(float(times[-2])) * self.grid.dt


@dataclass(eq=False)
class ParticleEnsemble:
    """Weighted particle set after a filter pass.

    Events are stored flat (owner index, birth step, tau, mark) so weighted
    event statistics pool without per-particle Python structures; full paths
    are present only under full-path storage.
    """

    weights: np.ndarray
    n_events: np.ndarray
    grid: TimeGrid
    x_last: np.ndarray
    y_last: np.ndarray
    event_owner: np.ndarray
    event_step: np.ndarray
    event_taus: np.ndarray
    event_marks: np.ndarray
    x_paths: np.ndarray | None = None
    y_paths: np.ndarray | None = None
    fixed_events: InducingSequence | None = None

    @property
    def n_particles(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.x_last.shape[1]

    def events_of(self, u: int) -> tuple[np.ndarray, np.ndarray]:
        """Waiting times and marks of particle u, in birth order."""
        if self.fixed_events is not None:
            return self.fixed_events.taus.copy(), self.fixed_events.marks.copy()
        sel = np.flatnonzero(self.event_owner == u)
        sel = sel[np.argsort(self.event_step[sel], kind="stable")]
        return self.event_taus[sel], self.event_marks[sel]

    def sequence_of(self, u: int) -> InducingSequence:
        taus, marks = self.events_of(u)
        return InducingSequence(taus, marks, origin=self.grid.origin)

    def particle(self, u: int) -> Particle:
        if self.x_paths is None:
            raise ValueError("particle views require full-path storage")
        return Particle(
            x_path=self.x_paths[u],
            y_path=self.y_paths[u],
            events=self.sequence_of(u),
            n_events=int(self.n_events[u]),
            weight=float(self.weights[u]),
            grid=self.grid,
        )

    def weighted_event_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flat (taus, marks, weights) with each event carrying its owner's weight."""
        if self.fixed_events is not None:
            n = len(self.fixed_events)
            taus = np.tile(self.fixed_events.taus, self.n_particles)
            marks = np.tile(self.fixed_events.marks, (self.n_particles, 1))
            w = np.repeat(self.weights, n)
            return taus, marks, w
        return self.event_taus, self.event_marks, self.weights[self.event_owner]


@dataclass(eq=False)
class SmcResult:
    """Filter output: evidence estimate, per-step posterior summaries, ensemble."""

    log_marginal_likelihood: float
    x_mean: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    y_mean: np.ndarray
    y_lo: np.ndarray
    y_hi: np.ndarray
    ess_history: np.ndarray
    n_resamples: int
    ensemble: ParticleEnsemble

    def to_envelope(self, max_event_particles: int | None = None) -> dict:
        """JSON-ready summary envelope (log_ml, summaries, weighted event sets)."""
        ens = self.ensemble
        order = np.argsort(ens.weights)[::-1]
        if max_event_particles is not None:
            order = order[:max_event_particles]
        events = []
        for u in order:
            taus, marks = ens.events_of(int(u))
            events.append(
                {
                    "weight": float(ens.weights[u]),
                    "taus": [float(t) for t in taus],
                    "marks": [[float(v) for v in m] for m in marks],
                }
            )
        return {
            "schema": 1,
            "log_ml": float(self.log_marginal_likelihood),
            "summary": {
                "t": [float(t) for t in ens.grid.times],
                "x_mean": self.x_mean.tolist(),
                "x_lo": self.x_lo.tolist(),
                "x_hi": self.x_hi.tolist(),
                "y_mean": self.y_mean.tolist(),
                "y_lo": self.y_lo.tolist(),
                "y_hi": self.y_hi.tolist(),
            },
            "events": events,
        }

    def summary_csv_text(self, which: str = "y") -> str:
        """CSV `t,mean_1..,lo_1..,hi_1..` for one trajectory summary."""
        mean, lo, hi = {
            "x": (self.x_mean, self.x_lo, self.x_hi),
            "y": (self.y_mean, self.y_lo, self.y_hi),
        }[which]
        d = mean.shape[1]
        header = (
            "t,"
            + ",".join(f"mean_{i + 1}" for i in range(d))
            + ","
            + ",".join(f"lo_{i + 1}" for i in range(d))
            + ","
            + ",".join(f"hi_{i + 1}" for i in range(d))
        )
        rows = [header]
        for t, row in zip(self.ensemble.grid.times, np.column_stack([mean, lo, hi])):
            rows.append(",".join([repr(float(t))] + [repr(float(v)) for v in row]))
        return "\n".join(rows) + "\n"


def effective_sample_size(weights) -> float:
    """ESS of normalized weights: 1 / sum(w^2)."""
    w = np.asarray(weights, dtype=float)
    return 1.0 / float(np.sum(w**2))


def resample_indices(weights, scheme: str, rng: np.random.Generator) -> np.ndarray:
    """Ancestor indices drawn by systematic or multinomial resampling.

    Expected offspring count of particle u is U * w_u under both schemes.
    Weights must be normalized to 1 within 1e-6.
    """
    w = np.asarray(weights, dtype=float)
    if abs(float(w.sum()) - 1.0) > 1e-6:
        raise ValueError("weights must be normalized before resampling")
    u_count = w.size
    if scheme == "multinomial":
        return rng.choice(u_count, size=u_count, p=w / w.sum())
    if scheme == "systematic":
        positions = (rng.uniform() + np.arange(u_count)) / u_count
        return np.searchsorted(np.cumsum(w), positions, side="left").clip(0, u_count - 1)
    raise ValueError(f"unknown resampling scheme {scheme!r}")


def resample(ensemble: ParticleEnsemble, scheme: str, rng: np.random.Generator) -> ParticleEnsemble:
    """Resample a whole ensemble; offspring inherit paths and events, weights reset to 1/U."""
    idx = resample_indices(ensemble.weights, scheme, rng)
    u_count = ensemble.n_particles
    if ensemble.fixed_events is not None:
        owner = ensemble.event_owner
        step = ensemble.event_step
        taus = ensemble.event_taus
        marks = ensemble.event_marks
    else:
        order = np.argsort(ensemble.event_owner, kind="stable")
        sorted_owner = ensemble.event_owner[order]
        starts = np.searchsorted(sorted_owner, np.arange(u_count), side="left")
        stops = np.searchsorted(sorted_owner, np.arange(u_count), side="right")
        pieces = [order[starts[i]:stops[i]] for i in idx]
        counts = np.array([p.size for p in pieces])
        flat = np.concatenate(pieces) if pieces else np.empty(0, dtype=int)
        owner = np.repeat(np.arange(u_count), counts)
        step = ensemble.event_step[flat]
        taus = ensemble.event_taus[flat]
        marks = ensemble.event_marks[flat]
    return ParticleEnsemble(
        weights=np.full(u_count, 1.0 / u_count),
        n_events=ensemble.n_events[idx],
        grid=ensemble.grid,
        x_last=ensemble.x_last[idx],
        y_last=ensemble.y_last[idx],
        event_owner=owner,
        event_step=step,
        event_taus=taus,
        event_marks=marks,
        x_paths=None if ensemble.x_paths is None else ensemble.x_paths[idx],
        y_paths=None if ensemble.y_paths is None else ensemble.y_paths[idx],
        fixed_events=ensemble.fixed_events,
    )


class _GuidedProposal:
    """Locally adapted Gaussian proposal for y under the linear-Gaussian model.

    Blends the prior transition mean toward the conjugate posterior mean given
    z_k; blend 0 reproduces the bootstrap proposal exactly.
    """

    def __init__(self, model: GaussianObsModel, sigma_y: np.ndarray, dt: float, blend: float):
        if not isinstance(model, GaussianObsModel):
            raise ValueError("guided proposal requires the Gaussian observation model")
        q_diag = sigma_y**2 * dt
        if np.any(q_diag <= 0):
            raise ValueError("guided proposal requires sigma_y > 0 in every dimension")
        d = sigma_y.size
        r_inv = np.linalg.inv(model.R)
        self.wtri = model.W.T @ r_inv
        prec_post = np.diag(1.0 / q_diag) + self.wtri @ model.W
        self.cov_post = np.linalg.inv(prec_post)
        self.q_diag = q_diag
        self.blend = blend
        cov_prop = (1.0 - blend) * np.diag(q_diag) + blend * self.cov_post
        self.chol_prop = np.linalg.cholesky(cov_prop)
        self.logdet_prop = 2.0 * float(np.sum(np.log(np.diag(self.chol_prop))))
        self.logdet_prior = float(np.sum(np.log(q_diag)))
        self.dim = d

    def sample(self, mu_prior: np.ndarray, z_k: np.ndarray, rng: np.random.Generator):
        """Returns (y draw, log q(y) - log p_prior(y)) for a (U, D) batch of prior means."""
        mean_post = (mu_prior / self.q_diag + z_k @ self.wtri.T) @ self.cov_post.T
        mean_prop = (1.0 - self.blend) * mu_prior + self.blend * mean_post
        y = mean_prop + rng.standard_normal(mu_prior.shape) @ self.chol_prop.T
        resid_prop = np.linalg.solve(self.chol_prop, (y - mean_prop).T)
        log_q = -0.5 * np.sum(resid_prop**2, axis=0) - 0.5 * (self.logdet_prop + self.dim * math.log(2 * math.pi))
        log_p = -0.5 * np.sum((y - mu_prior) ** 2 / self.q_diag, axis=1) - 0.5 * (
            self.logdet_prior + self.dim * math.log(2 * math.pi)
        )
        return y, log_q - log_p


def propose_step(particle: Particle, z_k, params: "ModelParams", cfg: SmcConfig,
                 rng: np.random.Generator):
    """Propose (x, y) for the next step of one particle.

    Returns (x_new, y_new, log_q) with log_q the joint proposal log-density.
    Under the bootstrap proposal the density equals the prior transition, so
    the importance-weight ratio cancels to the observation likelihood.
    """
    grid = particle.grid
    k = particle.step
    x_k = particle.x_path[-1]
    y_k = particle.y_path[-1]
    t_next, m_next = particle.pending_event()
    t_prev = particle.prev_event_time()
    if cfg.proposal == "guided":
        guide = _GuidedProposal(params.obs, params.noise.sigma_y, grid.dt, cfg.guided_blend)
        mu_prior = (y_k + x_k * grid.dt)[None, :]
        y_new, delta = guide.sample(mu_prior, np.asarray(z_k, dtype=float), rng)
        y_new = y_new[0]
        delta = float(delta[0])
    else:
        y_new = integrator_step(y_k, x_k, grid, params.noise, rng)
        delta = 0.0
    x_new = bridge_step(x_k, k, grid, (t_next, m_next), t_prev, params.noise, rng)
    log_q = float(
        integrator_transition_logpdf(y_new, y_k, x_k, grid, params.noise)
        + bridge_transition_logpdf(x_new, x_k, k, grid, (t_next, m_next), t_prev, params.noise)
        + delta
    )
    return x_new, y_new, log_q


def _path_memory_mb(u: int, k: int, d: int) -> float:
    return (2 * (k + 1) * u * d * 8 + (k + 1) * u * 8) / 1e6


def run_filter(
    obs: ObservationSeries,
    params: "ModelParams",
    cfg: SmcConfig,
    fixed_events: InducingSequence | None = None,
) -> SmcResult:
    """Run the particle filter over an observation series.

    With `fixed_events`, event birth is disabled and every particle shares the
    given sequence (the conditionally linear-Gaussian case used for oracle
    validation).
    """
    d = params.noise.dim
    u_count = cfg.n_particles
    k_count = obs.n_steps
    grid = TimeGrid(dt=obs.dt, n_steps=k_count, origin=0.0)
    dt = grid.dt
    store = cfg.storage == "full-path"
    if store:
        need = _path_memory_mb(u_count, k_count, d)
        if need > cfg.max_path_memory_mb:
            raise MemoryError(
                f"full-path storage needs ~{need:.0f} MB > cap {cfg.max_path_memory_mb:.0f} MB; "
                "raise max_path_memory_mb or use filtered-summary storage"
            )

    sched = segment_schedule(fixed_events, grid) if fixed_events is not None else None

    rng0 = substream(cfg.seed, 0)
    x, y = params.init.sample(rng0, u_count)
    weights = np.full(u_count, 1.0 / u_count)

    if fixed_events is None:
        taus0 = sample_waiting_times(params.wt, rng0, u_count, min_tau=dt)
        marks0 = params.mk.sample(rng0, u_count)
        t_next = grid.origin + taus0
        m_next = marks0
        t_prev = np.full(u_count, grid.origin)
        pin_idx = grid.pin_step(t_next)
        n_events = np.ones(u_count, dtype=np.int64)
        births: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {
            0: (np.arange(u_count), taus0, marks0)
        }
    else:
        n_events = np.full(u_count, len(fixed_events), dtype=np.int64)
        births = {}

    guide = (
        _GuidedProposal(params.obs, params.noise.sigma_y, dt, cfg.guided_blend)
        if cfg.proposal == "guided"
        else None
    )

    x_hist = [x] if store else None
    y_hist = [y] if store else None
    parents: dict[int, np.ndarray] = {}

    shape = (k_count + 1, d)
    x_mean = np.empty(shape)
    y_mean = np.empty(shape)
    x_lo = np.empty(shape)
    x_hi = np.empty(shape)
    y_lo = np.empty(shape)
    y_hi = np.empty(shape)
    ess_history = np.empty(k_count)
    qs = (0.05, 0.95)

    def summarize(k: int, w: np.ndarray):
        x_mean[k] = np.einsum("u,ud->d", w, x)
        y_mean[k] = np.einsum("u,ud->d", w, y)
        if cfg.summary_bands:
            xq = weighted_quantile(x, w, qs)
            yq = weighted_quantile(y, w, qs)
            x_lo[k], x_hi[k] = xq[0], xq[1]
            y_lo[k], y_hi[k] = yq[0], yq[1]
        else:
            x_lo[k] = x_hi[k] = x_mean[k]
            y_lo[k] = y_hi[k] = y_mean[k]

    summarize(0, weights)

    log_ml = 0.0
    n_resamples = 0
    sqrt_dt = math.sqrt(dt)

    for k in range(1, k_count + 1):
        rng_k = substream(cfg.seed, 1, k)
        z_k = obs.data[k - 1]

        # Integrator layer first: y_k depends on x_{k-1}.
        mu_prior = y + x * dt
        if guide is not None:
            y, delta = guide.sample(mu_prior, np.asarray(z_k, dtype=float), rng_k)
        else:
            y = mu_prior + params.noise.sigma_y * sqrt_dt * rng_k.standard_normal((u_count, d))
            delta = 0.0

        # Bridge layer: pinned particles take their mark exactly.
        t_k = grid.origin + (k - 1) * dt
        if fixed_events is None:
            pinned = pin_idx == k
            denom, factor = bridge_moments(t_k, dt, t_next, t_prev)
            x_new = (
                x
                + (m_next - x) / denom[:, None] * dt
                + params.noise.sigma_x * np.sqrt(factor * dt)[:, None] * rng_k.standard_normal((u_count, d))
            )
            if np.any(pinned):
                x_new[pinned] = m_next[pinned]
            x = x_new
        else:
            ev = sched.event_index[k - 1]
            target_t = fixed_events.times[ev]
            target_m = fixed_events.marks[ev]
            if sched.pinned[k - 1]:
                x = np.broadcast_to(target_m, (u_count, d)).copy()
            else:
                denom, factor = bridge_moments(t_k, dt, target_t, sched.t_prev[k - 1])
                x = (
                    x
                    + (target_m - x) / denom * dt
                    + params.noise.sigma_x * math.sqrt(factor * dt) * rng_k.standard_normal((u_count, d))
                )

        # Weight update; bootstrap reduces the ratio to the observation likelihood.
        log_g = observation_loglik(z_k, y, params.obs, dt) - delta
        finite = np.isfinite(log_g)
        if not np.any(finite) or np.any(np.isnan(log_g)):
            raise FilterDegenerateError(k)
        peak = float(np.max(log_g[finite]))
        g = np.exp(log_g - peak)
        pred = float(np.dot(weights, g))
        if not np.isfinite(pred) or pred <= 0.0:
            raise FilterDegenerateError(k)
        log_ml += peak + math.log(pred)
        weights = weights * g / pred

        ess = effective_sample_size(weights)
        ess_history[k - 1] = ess
        summarize(k, weights)

        if store:
            x_hist.append(x)
            y_hist.append(y)

        # Event birth for particles that just pinned: consume and draw the next pair.
        if fixed_events is None:
            born = np.flatnonzero(pinned)
            if born.size:
                rng_b = substream(cfg.seed, 2, k)
                tau_new = sample_waiting_times(params.wt, rng_b, born.size, min_tau=dt)
                mark_new = params.mk.sample(rng_b, born.size)
                t_prev[born] = grid.origin + k * dt
                t_next = t_next.copy()
                t_next[born] = t_next[born] + tau_new
                m_next = m_next.copy()
                m_next[born] = mark_new
                pin_idx = grid.pin_step(t_next)
                n_events[born] += 1
                births[k] = (born, tau_new, mark_new)

        if k < k_count and ess < cfg.ess_threshold * u_count:
            ridx = resample_indices(weights, cfg.resampling, substream(cfg.seed, 3, k))
            x = x[ridx]
            y = y[ridx]
            if fixed_events is None:
                t_prev = t_prev[ridx]
                t_next = t_next[ridx]
                m_next = m_next[ridx]
                pin_idx = pin_idx[ridx]
            n_events = n_events[ridx]
            parents[k] = ridx.astype(np.int64)
            weights = np.full(u_count, 1.0 / u_count)
            n_resamples += 1

    # Trace genealogies back from the final particles.
    ancestry = np.empty((k_count + 1, u_count), dtype=np.int64)
    ancestry[k_count] = np.arange(u_count)
    for k in range(k_count - 1, -1, -1):
        p = parents.get(k)
        ancestry[k] = p[ancestry[k + 1]] if p is not None else ancestry[k + 1]

    if fixed_events is None:
        owner_chunks = []
        step_chunks = []
        tau_chunks = []
        mark_chunks = []
        for k in sorted(births):
            bidx, btau, bmark = births[k]
            col = np.full(u_count, -1, dtype=np.int64)
            col[bidx] = np.arange(bidx.size)
            sel = col[ancestry[k]]
            hit = np.flatnonzero(sel >= 0)
            if hit.size:
                owner_chunks.append(hit)
                step_chunks.append(np.full(hit.size, k, dtype=np.int64))
                tau_chunks.append(btau[sel[hit]])
                mark_chunks.append(bmark[sel[hit]])
        event_owner = np.concatenate(owner_chunks)
        event_step = np.concatenate(step_chunks)
        event_taus = np.concatenate(tau_chunks)
        event_marks = np.concatenate(mark_chunks)
        fixed_for_ensemble = None
    else:
        event_owner = np.empty(0, dtype=np.int64)
        event_step = np.empty(0, dtype=np.int64)
        event_taus = np.empty(0)
        event_marks = np.empty((0, d))
        fixed_for_ensemble = fixed_events

    if store:
        stacked_x = np.stack(x_hist)
        stacked_y = np.stack(y_hist)
        gather = ancestry[:, :, None]
        x_paths = np.take_along_axis(stacked_x, gather, axis=1).transpose(1, 0, 2)
        y_paths = np.take_along_axis(stacked_y, gather, axis=1).transpose(1, 0, 2)
    else:
        x_paths = y_paths = None

    ensemble = ParticleEnsemble(
        weights=weights,
        n_events=n_events,
        grid=grid,
        x_last=x,
        y_last=y,
        event_owner=event_owner,
        event_step=event_step,
        event_taus=event_taus,
        event_marks=event_marks,
        x_paths=x_paths,
        y_paths=y_paths,
        fixed_events=fixed_for_ensemble,
    )
    return SmcResult(
        log_marginal_likelihood=log_ml,
        x_mean=x_mean,
        x_lo=x_lo,
        x_hi=x_hi,
        y_mean=y_mean,
        y_lo=y_lo,
        y_hi=y_hi,
        ess_history=ess_history,
        n_resamples=n_resamples,
        ensemble=ensemble,
    )
