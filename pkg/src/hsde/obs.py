"""Observation models mapping the integrator layer Y to data.

Two likelihoods: a linear-Gaussian model z = W y + noise for continuous
series, and a log-linear Poisson model for binned spike counts where each
neuron's rate is exp(w . y + b) and bins are conditionally independent given
the latent path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import gammaln

from ._util import atomic_write_text

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class GaussianObsModel:
    """Linear-Gaussian observation: z = W y + e, e ~ N(0, R)."""

    W: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        m = W.shape[0]
        if R.shape != (m, m):
            raise ValueError(f"R shape {R.shape} incompatible with W of shape {W.shape}")
        if not np.allclose(R, R.T):
            raise ValueError("R must be symmetric")
        try:
            chol = cholesky(R, lower=True)
        except Exception as exc:
            raise ValueError("R must be positive definite") from exc
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_logdet", 2.0 * float(np.sum(np.log(np.diag(chol)))))

    @property
    def n_obs(self) -> int:
        return self.W.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.W.shape[1]


@dataclass(frozen=True, eq=False)
class PointProcessObsModel:
    """Log-linear Poisson spike model: rate_m = exp(w_m . y + b_m) spikes/second."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if b.size != W.shape[0]:
            raise ValueError("need one baseline per neuron")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("loadings and baselines must be finite")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def n_obs(self) -> int:
        return self.W.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.W.shape[1]


@dataclass(frozen=True, eq=False)
class ObservationSeries:
    """K observation rows at interval dt: real-valued (`gaussian`) or counts (`spikes`)."""

    kind: str
    data: np.ndarray
    dt: float

    def __post_init__(self):
        if self.kind not in ("gaussian", "spikes"):
            raise ValueError(f"unknown observation kind {self.kind!r}")
        data = np.atleast_2d(np.asarray(self.data, dtype=float))
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.kind == "spikes":
            if np.any(data < 0) or not np.all(data == np.round(data)):
                raise ValueError("spike counts must be nonnegative integers")
        elif not np.all(np.isfinite(data)):
            raise ValueError("gaussian observations must be finite")
        object.__setattr__(self, "data", data)

    @property
    def n_steps(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def times(self) -> np.ndarray:
        """Observation times: row k is observed at (k+1) dt."""
        return (np.arange(self.n_steps) + 1) * self.dt

    def to_csv(self, path: str) -> None:
        prefix = "z" if self.kind == "gaussian" else "n"
        header = "t," + ",".join(f"{prefix}{i + 1}" for i in range(self.n_channels))
        rows = [header]
        for t, row in zip(self.times, self.data):
            cells = [repr(float(t))] + [
                str(int(v)) if self.kind == "spikes" else repr(float(v)) for v in row
            ]
            rows.append(",".join(cells))
        atomic_write_text(path, "\n".join(rows) + "\n")

    @classmethod
    def from_csv(cls, path: str) -> "ObservationSeries":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            body = np.loadtxt(fh, delimiter=",", ndmin=2)
        if header[0] != "t" or len(header) < 2:
            raise ValueError(f"{path}: expected header t,<z1..|n1..>")
        kind = "gaussian" if header[1].startswith("z") else "spikes"
        times = body[:, 0]
        dt = float(times[0]) if times.size == 1 else float(np.median(np.diff(times)))
        return cls(kind=kind, data=body[:, 1:], dt=dt)


def read_event_list(path: str, dt: float, duration: float | None = None,
                    n_neurons: int | None = None) -> ObservationSeries:
    """Bin a `neuron_id,time_s` event-list CSV into spike counts at interval dt.

    Neuron ids are zero-based columns; `duration` defaults to the last event
    time rounded up to a whole bin.
    """
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if raw.size == 0:
        raise ValueError(f"{path}: no events")
    ids = raw[:, 0].astype(int)
    times = raw[:, 1]
    if duration is None:
        duration = float(np.ceil(times.max() / dt) * dt)
    n_bins = int(round(duration / dt))
    m = int(n_neurons if n_neurons is not None else ids.max() + 1)
    counts = np.zeros((n_bins, m))
    bins = np.minimum((times / dt).astype(int), n_bins - 1)
    keep = (times >= 0) & (times < duration) & (ids >= 0) & (ids < m)
    np.add.at(counts, (bins[keep], ids[keep]), 1.0)
    return ObservationSeries(kind="spikes", data=counts, dt=dt)


def gaussian_loglik(z_k, y_k, model: GaussianObsModel):
    """Gaussian observation log-likelihood log N(z_k; W y_k, R).

    `y_k` may be a single vector or a (U, D) batch; returns a scalar or (U,).
    """
    y = np.asarray(y_k, dtype=float)
    single = y.ndim == 1
    resid = np.asarray(z_k, dtype=float) - np.atleast_2d(y) @ model.W.T
    white = solve_triangular(model._chol, resid.T, lower=True)
    ll = -0.5 * np.sum(white**2, axis=0) - 0.5 * (model._logdet + model.n_obs * _LOG_2PI)
    return float(ll[0]) if single else ll


def spike_loglik(n_k, y_k, model: PointProcessObsModel, dt: float):
    """Poisson spike log-likelihood of one bin of counts.

    Per neuron: n (w.y + b + log dt) - exp(w.y + b) dt - log(n!), summed over
    neurons. `y_k` may be a (U, D) batch.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = np.asarray(n_k, dtype=float)
    if np.any(n < 0):
        raise ValueError("spike counts must be nonnegative")
    y = np.asarray(y_k, dtype=float)
    single = y.ndim == 1
    eta = np.atleast_2d(y) @ model.W.T + model.b
    ll = np.sum(n * (eta + math.log(dt)) - np.exp(eta) * dt - gammaln(n + 1.0), axis=-1)
    return float(ll[0]) if single else ll


def sample_observation(y_k, model, dt: float, rng: np.random.Generator):
    """Generative counterpart of the likelihoods: one observation row per y.

    Gaussian model: W y + chol(R) eta. Spike model: independent
    Poisson(exp(W y + b) dt) counts. `y_k` may be a (U, D) batch.
    """
    y = np.asarray(y_k, dtype=float)
    single = y.ndim == 1
    y2 = np.atleast_2d(y)
    if isinstance(model, GaussianObsModel):
        out = y2 @ model.W.T + rng.standard_normal((y2.shape[0], model.n_obs)) @ model._chol.T
    elif isinstance(model, PointProcessObsModel):
        rate = np.exp(y2 @ model.W.T + model.b) * dt
        out = rng.poisson(rate).astype(float)
    else:
        raise TypeError(f"unsupported observation model {type(model).__name__}")
    return out[0] if single else out


def observation_loglik(z_k, y_k, model, dt: float):
    """Dispatch to the Gaussian or spike log-likelihood based on the model type."""
    if isinstance(model, GaussianObsModel):
        return gaussian_loglik(z_k, y_k, model)
    if isinstance(model, PointProcessObsModel):
        return spike_loglik(z_k, y_k, model, dt)
    raise TypeError(f"unsupported observation model {type(model).__name__}")
