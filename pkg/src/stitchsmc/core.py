"""Generic particle-filter machinery.

Particles at a single time are held in a 1-D numpy array (numeric dtype for
scalar/discrete models, ``object`` dtype for structured states).  Trajectories
are stored column-wise so that frozen early coordinates are never copied.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np


class AllWeightsZero(RuntimeError):
    """Every particle carries zero weight; model and data are incompatible."""

    def __init__(self, message: str = "all particle weights are zero", *, time: int | None = None,
                 index: int | None = None):
        details = []
        if time is not None:
            details.append(f"time={time}")
        if index is not None:
            details.append(f"particle={index}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)
        self.time = time
        self.index = index


class MissingBound(ValueError):
    """Rejection sampling was requested but the model has no transition bound."""


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent, reproducible generator for a (seed, stream) pair."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream,))))


def logsumexp(values) -> float:
    """log(sum(exp(values))) for a 1-D array; -inf when every entry is -inf."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return -np.inf
    top = values.max()
    if not np.isfinite(top):
        return float(top)
    return float(top + np.log(np.exp(values - top).sum()))


def normalise_log_weights(log_weights: np.ndarray) -> np.ndarray:
    log_weights = np.asarray(log_weights, dtype=float)
    total = logsumexp(log_weights)
    if not np.isfinite(total):
        raise AllWeightsZero()
    return log_weights - total


def uniform_log_weights(n: int) -> np.ndarray:
    return np.full(n, -np.log(n))


def inverse_cdf(cdf: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Map uniforms to indices through a cumulative weight table."""
    idx = np.searchsorted(cdf, uniforms * cdf[-1], side="right")
    return np.minimum(idx, len(cdf) - 1)


def categorical(log_weights: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``size`` i.i.d. indices from normalised-or-not log weights."""
    weights = np.exp(normalise_log_weights(log_weights))
    return inverse_cdf(np.cumsum(weights), rng.random(size))


@dataclass
class WeightedSample:
    """N particles at a single time with normalised log weights."""

    particles: np.ndarray
    log_weights: np.ndarray

    def __post_init__(self):
        if len(self.particles) != len(self.log_weights):
            raise ValueError("particles and weights differ in length")

    @property
    def n(self) -> int:
        return len(self.particles)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


@dataclass
class TrajectorySample:
    """N trajectories x_{0:T}, stored as T+1 columns of length N."""

    columns: list[np.ndarray]
    log_weights: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.columns[0])
        if any(len(c) != n for c in self.columns):
            raise ValueError("columns differ in length")
        if self.log_weights is None:
            self.log_weights = uniform_log_weights(n)

    @property
    def n(self) -> int:
        return len(self.columns[0])

    @property
    def length(self) -> int:
        return len(self.columns)

    @property
    def weighted(self) -> bool:
        return not np.allclose(self.log_weights, -np.log(self.n), rtol=0, atol=1e-12)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def column(self, t: int) -> np.ndarray:
        return self.columns[t]

    def take(self, indices: np.ndarray) -> "TrajectorySample":
        """Reindex every coordinate; result is unweighted."""
        return TrajectorySample([c[indices] for c in self.columns])

    def extended(self, column: np.ndarray, log_weights: np.ndarray | None = None) -> "TrajectorySample":
        return TrajectorySample(self.columns + [column],
                                self.log_weights if log_weights is None else log_weights)

    def to_array(self) -> np.ndarray:
        """(N, T+1) array of states."""
        return np.stack(self.columns, axis=1)

    def marginal(self, t: int) -> WeightedSample:
        return WeightedSample(self.columns[t], self.log_weights)


class StateSpaceModel:
    """State-space model contract used by every algorithm in the package.

    All methods are vectorised over particles.  The transition density is
    split as ``log p(x_new | x_prev) = kernel(x_prev, x_new) - normaliser(x_prev)``
    so that factors depending on ``x_prev`` alone can be dropped where they
    cancel; ``transition_bound`` bounds ``exp(kernel)``.
    """

    def initial_sample(self, y0: Any, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def initial_log_weight(self, x0: np.ndarray, y0: Any) -> np.ndarray:
        """log p(x0) p(y0 | x0) / q0(x0 | y0) up to an additive constant."""
        raise NotImplementedError

    def transition_log_density(self, x_prev, x_new) -> np.ndarray:
        raise NotImplementedError

    def transition_log_kernel(self, x_prev, x_new) -> np.ndarray:
        return self.transition_log_density(x_prev, x_new)

    def transition_log_normaliser(self, x_prev, x_next=None) -> np.ndarray:
        """Log normaliser of the transition from x_prev; x_next supplies context such as time."""
        return np.zeros(np.shape(x_prev))

    def transition_bound(self) -> float | None:
        return None

    def transition_log_envelope(self, x_prev: np.ndarray, x_new: np.ndarray, candidates: str):
        """Upper bound on the log kernel for rejection sampling.

        ``candidates`` names the side being proposed ("prev" or "new"); the
        bound may be a scalar or one value per candidate, and must hold for
        every pairing with the other side.
        """
        rho = self.transition_bound()
        if rho is None:
            raise MissingBound("model provides no transition bound")
        return float(np.log(rho))

    def transition_sample(self, x_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def proposal_sample(self, x_prev: np.ndarray, y: Any, rng: np.random.Generator) -> np.ndarray:
        return self.transition_sample(x_prev, rng)

    def proposal_log_density(self, x_prev, x_new, y) -> np.ndarray:
        return self.transition_log_density(x_prev, x_new)

    def observation_log_density(self, x, y) -> np.ndarray:
        raise NotImplementedError

    def propagate(self, x_prev: np.ndarray, y: Any, rng: np.random.Generator):
        """Sample x_new ~ q(.|x_prev, y); return it with log incremental weights."""
        x_new = self.proposal_sample(x_prev, y, rng)
        log_inc = (self.transition_log_density(x_prev, x_new)
                   + self.observation_log_density(x_new, y)
                   - self.proposal_log_density(x_prev, x_new, y))
        return x_new, log_inc

    def rebase(self, x_prev: np.ndarray, x_new: np.ndarray) -> np.ndarray:
        """Re-express x_new as a successor of x_prev (identity for plain states)."""
        return x_new


def ess(sample) -> float:
    """Effective sample size 1 / sum(w^2).

    Accepts a weighted sample or a plain array of (linear) weights.
    """
    if hasattr(sample, "log_weights"):
        w = np.exp(normalise_log_weights(sample.log_weights))
    else:
        w = np.asarray(sample, dtype=float)
        w = w / w.sum()
    return float(1.0 / np.sum(w * w))


def multinomial_indices(log_weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. Categorical(w) indices by inverse CDF over cumulative weights."""
    weights = np.exp(normalise_log_weights(log_weights))
    return inverse_cdf(np.cumsum(weights), rng.random(n))


def multinomial_resample(sample: WeightedSample, rng: np.random.Generator) -> WeightedSample:
    idx = multinomial_indices(sample.log_weights, sample.n, rng)
    return WeightedSample(sample.particles[idx], uniform_log_weights(sample.n))


def initialise(model: StateSpaceModel, y0, n: int, rng: np.random.Generator) -> TrajectorySample:
    """Weighted sample approximating p(x_0 | y_0)."""
    x0 = model.initial_sample(y0, n, rng)
    log_w = np.asarray(model.initial_log_weight(x0, y0), dtype=float)
    try:
        log_w = normalise_log_weights(log_w)
    except AllWeightsZero:
        raise AllWeightsZero(time=0) from None
    return TrajectorySample([x0], log_w)


def filter_step(sample: WeightedSample, y_new, model: StateSpaceModel, ess_threshold: float,
                rng: np.random.Generator, *, time: int | None = None,
                force_resample: bool = False) -> tuple[WeightedSample, np.ndarray | None]:
    """One update of the marginal particle filter.

    Returns the new weighted sample and the resampling ancestors (or None).
    """
    n = sample.n
    ancestors = None
    prior = sample.log_weights
    # tolerance keeps exactly uniform weights from triggering a resample
    if force_resample or ess(sample) < ess_threshold * n * (1 - 1e-9):
        ancestors = multinomial_indices(sample.log_weights, n, rng)
        x_prev = sample.particles[ancestors]
        prior = uniform_log_weights(n)
    else:
        x_prev = sample.particles
    x_new, log_inc = model.propagate(x_prev, y_new, rng)
    try:
        log_w = normalise_log_weights(prior + log_inc)
    except AllWeightsZero:
        raise AllWeightsZero(time=time) from None
    return WeightedSample(x_new, log_w), ancestors


def pf_update(sample: TrajectorySample, y_new, model: StateSpaceModel, ess_threshold: float,
              rng: np.random.Generator, *, time: int | None = None,
              force_resample: bool = False) -> TrajectorySample:
    """Particle filter update over full trajectories.

    Resamples when ESS < ess_threshold * N (or always with ``force_resample``),
    propagates through the model proposal and reweights.
    """
    latest = WeightedSample(sample.columns[-1], sample.log_weights)
    new, ancestors = filter_step(latest, y_new, model, ess_threshold, rng, time=time,
                                 force_resample=force_resample)
    history = sample if ancestors is None else sample.take(ancestors)
    return history.extended(new.particles, new.log_weights)


def marginal_fixed_lag_update(sample: TrajectorySample, y_new, lag: int, model: StateSpaceModel,
                              rng: np.random.Generator, *, ess_threshold: float = 0.5,
                              time: int | None = None) -> TrajectorySample:
    """Fixed-lag update that resamples only the last ``lag + 1`` coordinates.

    Coordinates older than the lag stay in place and are joined to the
    resampled recent coordinates by position, with no regard to compatibility.
    """
    T = sample.length
    propagated = pf_update(sample, y_new, model, ess_threshold, rng, time=time)
    idx = multinomial_indices(propagated.log_weights, propagated.n, rng)
    if T <= lag:
        return propagated.take(idx)
    split = T - lag
    frozen = propagated.columns[:split]
    recent = [c[idx] for c in propagated.columns[split:]]
    return TrajectorySample(frozen + recent)


def as_object_array(items: Sequence) -> np.ndarray:
    out = np.empty(len(items), dtype=object)
    for i, item in enumerate(items):
        out[i] = item
    return out
