"""Marked point process over inducing events.

An inducing event is a (waiting time, mark) pair: Gamma-distributed gaps
between events and multivariate-normal mark vectors sampled in latent space.
This module holds the event/mark distributions, their hyperpriors, the
optional repulsive joint prior over waiting times, and the samplers used by
the generative model and the particle filter.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import gammaln

REJECTION_CAP = 10_000
PAIR_LOG_FLOOR = -1e9
_LOG_2PI = math.log(2.0 * math.pi)


class OrderlinessError(RuntimeError):
    """Waiting-time rejection sampling exhausted: bin size incompatible with the Gamma bulk."""


@dataclass(frozen=True)
class WaitingTimeModel:
    """Gamma model for inter-event waiting times, shape `alpha` and rate `lam`."""

    alpha: float
    lam: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.lam > 0):
            raise ValueError(f"Gamma shape and rate must be positive, got ({self.alpha}, {self.lam})")

    @classmethod
    def from_mean_std(cls, mean: float, std: float) -> "WaitingTimeModel":
        """Moment-matched Gamma: shape = mean^2/var, rate = mean/var."""
        var = std * std
        return cls(alpha=mean * mean / var, lam=mean / var)

    @property
    def mean(self) -> float:
        return self.alpha / self.lam

    @property
    def var(self) -> float:
        return self.alpha / self.lam**2

    def logpdf(self, tau):
        """Gamma log-density, vectorized over `tau`. Domain error on tau <= 0."""
        tau = np.asarray(tau, dtype=float)
        if np.any(tau <= 0):
            raise ValueError("waiting times must be positive")
        return (
            self.alpha * math.log(self.lam)
            - gammaln(self.alpha)
            + (self.alpha - 1.0) * np.log(tau)
            - self.lam * tau
        )


@dataclass(frozen=True, eq=False)
class MarkModel:
    """Multivariate normal over mark vectors: mean `mu`, covariance `sigma` (SPD)."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if sigma.shape != (mu.size, mu.size):
            raise ValueError(f"covariance shape {sigma.shape} incompatible with mean of size {mu.size}")
        if not np.allclose(sigma, sigma.T):
            raise ValueError("mark covariance must be symmetric")
        try:
            chol = cholesky(sigma, lower=True)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - scipy raises its own type
            raise ValueError("mark covariance must be positive definite") from exc
        except Exception as exc:
            raise ValueError("mark covariance must be positive definite") from exc
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_logdet", 2.0 * float(np.sum(np.log(np.diag(chol)))))

    @property
    def dim(self) -> int:
        return self.mu.size

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        z = rng.standard_normal((size or 1, self.dim))
        draws = self.mu + z @ self._chol.T
        return draws if size is not None else draws[0]

    def logpdf(self, m) -> np.ndarray:
        """Gaussian log-density; accepts a single vector or an (n, D) batch."""
        m = np.asarray(m, dtype=float)
        single = m.ndim == 1
        resid = np.atleast_2d(m) - self.mu
        white = solve_triangular(self._chol, resid.T, lower=True)
        ll = -0.5 * np.sum(white**2, axis=0) - 0.5 * self._logdet - 0.5 * self.dim * _LOG_2PI
        return float(ll[0]) if single else ll


@dataclass(frozen=True)
class GammaPrior:
    """Gamma(a, b) prior (shape/rate) for a positive scalar parameter."""

    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("Gamma prior requires positive shape and rate")

    def logpdf(self, x: float) -> float:
        if x <= 0:
            return -math.inf
        return self.a * math.log(self.b) - float(gammaln(self.a)) + (self.a - 1.0) * math.log(x) - self.b * x

    def dlogpdf(self, x: float) -> float:
        return (self.a - 1.0) / x - self.b

    def mode(self) -> float:
        return max((self.a - 1.0) / self.b, 1e-6)


@dataclass(frozen=True)
class ExpPrior:
    """Exponential(rate) prior for a positive scalar parameter."""

    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("Exponential prior requires a positive rate")

    def logpdf(self, x: float) -> float:
        if x <= 0:
            return -math.inf
        return math.log(self.rate) - self.rate * x

    def dlogpdf(self, x: float) -> float:
        return -self.rate

    def mode(self) -> float:
        return 1e-6


@dataclass(frozen=True)
class LognormalPrior:
    """Lognormal(mu, sigma2) prior for a positive scalar parameter."""

    mu: float
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("Lognormal prior requires a positive variance")

    def logpdf(self, x: float) -> float:
        if x <= 0:
            return -math.inf
        return -math.log(x) - 0.5 * math.log(2.0 * math.pi * self.sigma2) - (math.log(x) - self.mu) ** 2 / (
            2.0 * self.sigma2
        )

    def dlogpdf(self, x: float) -> float:
        return -1.0 / x - (math.log(x) - self.mu) / (self.sigma2 * x)

    def mode(self) -> float:
        return math.exp(self.mu - self.sigma2)


@dataclass(frozen=True)
class InvGammaPrior:
    """Inverse-Gamma(a, b) prior for a positive scalar parameter."""

    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("Inverse-Gamma prior requires positive parameters")

    def logpdf(self, x: float) -> float:
        if x <= 0:
            return -math.inf
        return self.a * math.log(self.b) - float(gammaln(self.a)) - (self.a + 1.0) * math.log(x) - self.b / x

    def dlogpdf(self, x: float) -> float:
        return -(self.a + 1.0) / x + self.b / x**2

    def mode(self) -> float:
        return self.b / (self.a + 1.0)


ScalarPrior = GammaPrior | ExpPrior | LognormalPrior | InvGammaPrior


@dataclass(frozen=True, eq=False)
class PriorHyperparams:
    """Hyperpriors for the event model.

    Marks carry a Normal-Inverse-Wishart prior (mu0, lambda_niw, nu, psi);
    the Gamma shape and rate of the waiting-time model carry configurable
    scalar priors. `None` means an improper flat prior for that parameter.
    """

    mu0: np.ndarray
    lambda_niw: float
    nu: float
    psi: np.ndarray
    alpha_prior: ScalarPrior | None = None
    lambda_prior: ScalarPrior | None = None

    def __post_init__(self):
        mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        psi = np.atleast_2d(np.asarray(self.psi, dtype=float))
        d = mu0.size
        if psi.shape != (d, d):
            raise ValueError("psi must be D x D")
        if not np.allclose(psi, psi.T):
            raise ValueError("psi must be symmetric")
        if np.any(np.linalg.eigvalsh(psi) <= 0):
            raise ValueError("psi must be positive definite")
        if not self.lambda_niw > 0:
            raise ValueError("lambda_niw must be positive")
        if not self.nu > d - 1:
            raise ValueError("nu must exceed D - 1")
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "psi", psi)

    @classmethod
    def default(cls, dim: int) -> "PriorHyperparams":
        """Weak NIW prior around the unit ball plus Gamma(2, rate) priors."""
        return cls(
            mu0=np.zeros(dim),
            lambda_niw=1e-3,
            nu=dim + 2.0,
            psi=np.eye(dim),
            alpha_prior=GammaPrior(2.0, 0.1),
            lambda_prior=GammaPrior(2.0, 0.1),
        )

    def mark_prior_mode(self) -> tuple[np.ndarray, np.ndarray]:
        """Joint MAP of the NIW prior over (mu, sigma)."""
        d = self.mu0.size
        return self.mu0.copy(), self.psi / (self.nu + d + 2.0)


@dataclass(frozen=True)
class RepulsionParams:
    """Pairwise repulsion between nearby waiting times.

    `strength` scales the penalty 1/(1 + strength/gap^2); `window` limits each
    waiting time's interaction to that many predecessors.
    """

    strength: float
    window: int = 3

    def __post_init__(self):
        if not self.strength > 0:
            raise ValueError("repulsion strength must be positive")
        if self.window < 1:
            raise ValueError("repulsion window must be at least 1")


@dataclass(frozen=True, eq=False)
class InducingPoint:
    """One event: waiting time since the previous event plus its mark vector."""

    tau: float
    mark: np.ndarray

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"waiting time must be positive, got {self.tau}")
        mark = np.atleast_1d(np.asarray(self.mark, dtype=float))
        if not np.all(np.isfinite(mark)):
            raise ValueError("mark must be finite")
        object.__setattr__(self, "mark", mark)


class InducingSequence:
    """Ordered inducing events for one trial.

    Stored as arrays: `taus` (n,) of positive waiting times and `marks` (n, D).
    Absolute event times are origin + cumsum(taus), so they are strictly
    increasing by construction.
    """

    __slots__ = ("taus", "marks", "origin")

    def __init__(self, taus, marks, origin: float = 0.0):
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        marks = np.asarray(marks, dtype=float)
        if taus.size == 0:
            marks = marks.reshape(0, marks.shape[-1] if marks.ndim == 2 else 1)
        else:
            marks = np.atleast_2d(marks)
            if marks.shape[0] != taus.size:
                raise ValueError("need one mark per waiting time")
        if np.any(taus <= 0):
            raise ValueError("waiting times must be positive")
        if not np.all(np.isfinite(marks)):
            raise ValueError("marks must be finite")
        self.taus = taus
        self.marks = marks
        self.origin = float(origin)

    def __len__(self) -> int:
        return self.taus.size

    @property
    def dim(self) -> int:
        return self.marks.shape[1]

    @property
    def times(self) -> np.ndarray:
        """Absolute event times."""
        return self.origin + np.cumsum(self.taus)

    @property
    def points(self) -> list[InducingPoint]:
        return [InducingPoint(float(t), m.copy()) for t, m in zip(self.taus, self.marks)]

    @classmethod
    def from_points(cls, points, origin: float = 0.0) -> "InducingSequence":
        if not points:
            return cls(np.empty(0), np.empty((0, 1)), origin)
        return cls([p.tau for p in points], np.stack([p.mark for p in points]), origin)

    def concat(self, other: "InducingSequence") -> "InducingSequence":
        """Append another sequence's events after this one (other's origin is dropped)."""
        if len(self) and len(other) and self.dim != other.dim:
            raise ValueError("mark dimensions differ")
        dim = self.dim if len(self) else other.dim
        return InducingSequence(
            np.concatenate([self.taus, other.taus]),
            np.concatenate([self.marks.reshape(-1, dim), other.marks.reshape(-1, dim)]),
            self.origin,
        )

    def check_orderly(self, dt: float) -> bool:
        """True when every waiting time exceeds the grid interval."""
        return bool(np.all(self.taus > dt))

    def to_json_dict(self) -> dict:
        return {
            "origin": self.origin,
            "points": [
                {"tau": float(t), "mark": [float(v) for v in m]}
                for t, m in zip(self.taus, self.marks)
            ],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "InducingSequence":
        pts = obj["points"]
        if not pts:
            return cls(np.empty(0), np.empty((0, 1)), float(obj["origin"]))
        return cls(
            [p["tau"] for p in pts],
            np.array([p["mark"] for p in pts], dtype=float),
            float(obj["origin"]),
        )


def sample_waiting_time(
    model: WaitingTimeModel,
    rng: np.random.Generator,
    min_tau: float | None = None,
    max_rejections: int = REJECTION_CAP,
) -> float:
    """Draw one Gamma waiting time.

    With `min_tau` set, draws are rejected until tau > min_tau (the
    at-most-one-event-per-bin constraint); exceeding `max_rejections`
    raises OrderlinessError.
    """
    return float(sample_waiting_times(model, rng, 1, min_tau=min_tau, max_rejections=max_rejections)[0])


def sample_waiting_times(
    model: WaitingTimeModel,
    rng: np.random.Generator,
    size: int,
    min_tau: float | None = None,
    max_rejections: int = REJECTION_CAP,
) -> np.ndarray:
    """Vectorized waiting-time sampler with optional lower-bound rejection."""
    scale = 1.0 / model.lam
    draws = rng.gamma(model.alpha, scale, size=size)
    if min_tau is None:
        return draws
    attempts = 1
    bad = draws <= min_tau
    while np.any(bad):
        if attempts >= max_rejections:
            raise OrderlinessError(
                f"no Gamma(alpha={model.alpha}, rate={model.lam}) draw exceeded {min_tau} "
                f"after {attempts} rounds; the bin size is incompatible with the waiting-time bulk"
            )
        n_bad = int(bad.sum())
        draws[bad] = rng.gamma(model.alpha, scale, size=n_bad)
        bad = draws <= min_tau
        attempts += 1
    return draws


def sample_mark(model: MarkModel, rng: np.random.Generator) -> np.ndarray:
    """Draw one mark vector from the multivariate normal mark model."""
    return model.sample(rng)


def log_density_sequence(seq: InducingSequence, wt: WaitingTimeModel, mk: MarkModel) -> float:
    """Joint log-density of an event sequence under the independence model.

    Sum of Gamma log-pdfs of the waiting times plus Gaussian log-pdfs of the
    marks; the empty sequence has log-density 0 (empty product).
    """
    if len(seq) == 0:
        return 0.0
    return float(np.sum(wt.logpdf(seq.taus)) + np.sum(mk.logpdf(seq.marks)))


def log_density_repulsive(taus, wt: WaitingTimeModel, rep: RepulsionParams) -> float:
    """Unnormalized log-density of waiting times under the repulsive prior.

    Gamma terms plus, for every pair within `rep.window` of each other,
    -log(1 + strength / gap^2). Coincident waiting times would send a pair
    term to -inf; each pair term is floored at PAIR_LOG_FLOOR to keep
    optimizers finite.
    """
    taus = np.asarray(taus, dtype=float)
    total = float(np.sum(wt.logpdf(taus)))
    n = taus.size
    for j in range(1, n):
        lo = max(0, j - rep.window)
        gaps2 = (taus[lo:j] - taus[j]) ** 2
        with np.errstate(divide="ignore"):
            terms = -np.log1p(rep.strength / gaps2)
        total += float(np.sum(np.maximum(terms, PAIR_LOG_FLOOR)))
    return total


def sample_repulsive(
    n: int,
    wt: WaitingTimeModel,
    rep: RepulsionParams,
    rng: np.random.Generator,
    n_proposals: int = 1000,
) -> np.ndarray:
    """One joint draw of `n` waiting times from the repulsive prior.

    Self-normalized importance sampling with i.i.d. Gamma proposals: the
    importance weight of a proposal is exp(sum of its repulsion terms), so
    the Gamma factor cancels. Warns when the proposal effective sample size
    drops below 10.
    """
    if n_proposals < 100:
        raise ValueError("need at least 100 proposals")
    proposals = rng.gamma(wt.alpha, 1.0 / wt.lam, size=(n_proposals, n))
    log_w = np.zeros(n_proposals)
    for j in range(1, n):
        lo = max(0, j - rep.window)
        gaps2 = (proposals[:, lo:j] - proposals[:, j : j + 1]) ** 2
        with np.errstate(divide="ignore"):
            terms = -np.log1p(rep.strength / gaps2)
        log_w += np.sum(np.maximum(terms, PAIR_LOG_FLOOR), axis=1)
    log_w -= log_w.max()
    w = np.exp(log_w)
    w /= w.sum()
    ess = 1.0 / float(np.sum(w**2))
    if ess < 10.0:
        warnings.warn(
            f"repulsive importance sampler ESS {ess:.2f} < 10; increase n_proposals",
            RuntimeWarning,
            stacklevel=2,
        )
    pick = rng.choice(n_proposals, p=w)
    return proposals[pick].copy()


def order_statistics_gap_sample(n: int, horizon: float, rng: np.random.Generator) -> np.ndarray:
    """Adjacent gaps between sorted uniform draws on [0, horizon].

    Test-suite helper for the spacing-convergence checks: n uniforms give
    n - 1 adjacent gaps.
    """
    if n < 2:
        raise ValueError("need at least two samples to form a gap")
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    u = np.sort(rng.uniform(0.0, horizon, size=n))
    return np.diff(u)
