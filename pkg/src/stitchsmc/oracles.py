"""Exactly solvable models used to check the particle algorithms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import StateSpaceModel, inverse_cdf

LOG_2PI = np.log(2 * np.pi)


class TooLarge(ValueError):
    """Requested enumeration exceeds the configured table size."""


def _normal_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


@dataclass(frozen=True)
class LinearGaussianModel(StateSpaceModel):
    """Scalar model x_t = a x_{t-1} + N(0, q), y_t = c x_t + N(0, r).

    ``proposal`` selects the bootstrap or the locally optimal proposal.
    """

    a: float = 0.5
    q: float = 1.0
    c: float = 1.0
    r: float = 1.0
    m0: float = 0.0
    p0v: float = 1.0
    proposal: str = "bootstrap"

    def __post_init__(self):
        if self.q <= 0 or self.r <= 0 or self.p0v <= 0:
            raise ValueError("variances must be positive")
        if self.proposal not in ("bootstrap", "optimal"):
            raise ValueError(f"unknown proposal {self.proposal!r}")

    def simulate(self, T: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        x = np.empty(T + 1)
        x[0] = self.m0 + np.sqrt(self.p0v) * rng.standard_normal()
        for t in range(1, T + 1):
            x[t] = self.a * x[t - 1] + np.sqrt(self.q) * rng.standard_normal()
        y = self.c * x + np.sqrt(self.r) * rng.standard_normal(T + 1)
        return x, y

    def initial_sample(self, y0, n, rng):
        return self.m0 + np.sqrt(self.p0v) * rng.standard_normal(n)

    def initial_log_weight(self, x0, y0):
        return self.observation_log_density(x0, y0)

    def transition_log_density(self, x_prev, x_new):
        return _normal_logpdf(x_new, self.a * np.asarray(x_prev), self.q)

    def transition_bound(self):
        return 1.0 / np.sqrt(2 * np.pi * self.q)

    def transition_sample(self, x_prev, rng):
        return self.a * x_prev + np.sqrt(self.q) * rng.standard_normal(len(x_prev))

    def _optimal_moments(self, x_prev, y):
        var = 1.0 / (1.0 / self.q + self.c ** 2 / self.r)
        mean = var * (self.a * np.asarray(x_prev) / self.q + self.c * y / self.r)
        return mean, var

    def proposal_sample(self, x_prev, y, rng):
        if self.proposal == "bootstrap":
            return self.transition_sample(x_prev, rng)
        mean, var = self._optimal_moments(x_prev, y)
        return mean + np.sqrt(var) * rng.standard_normal(len(x_prev))

    def proposal_log_density(self, x_prev, x_new, y):
        if self.proposal == "bootstrap":
            return self.transition_log_density(x_prev, x_new)
        mean, var = self._optimal_moments(x_prev, y)
        return _normal_logpdf(x_new, mean, var)

    def predictive_log_density(self, x_prev, y):
        """log p(y_t | x_{t-1})."""
        return _normal_logpdf(y, self.c * self.a * np.asarray(x_prev), self.c ** 2 * self.q + self.r)

    def observation_log_density(self, x, y):
        return _normal_logpdf(y, self.c * np.asarray(x), self.r)


def kalman_filter(model: LinearGaussianModel, y: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Filtering means and variances for t = 0..T."""
    y = np.asarray(y, dtype=float)
    means = np.empty(len(y))
    variances = np.empty(len(y))
    m, p = model.m0, model.p0v
    for t, obs in enumerate(y):
        if t > 0:
            m, p = model.a * m, model.a ** 2 * p + model.q
        s = model.c ** 2 * p + model.r
        k = p * model.c / s
        m, p = m + k * (obs - model.c * m), (1 - k * model.c) * p
        means[t], variances[t] = m, p
    return means, variances


def rts_smoother(model: LinearGaussianModel, y: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Rauch-Tung-Striebel smoothed means and variances."""
    fm, fv = kalman_filter(model, y)
    sm, sv = fm.copy(), fv.copy()
    for t in range(len(fm) - 2, -1, -1):
        pred_m = model.a * fm[t]
        pred_v = model.a ** 2 * fv[t] + model.q
        gain = fv[t] * model.a / pred_v
        sm[t] = fm[t] + gain * (sm[t + 1] - pred_m)
        sv[t] = fv[t] + gain ** 2 * (sv[t + 1] - pred_v)
    return sm, sv


@dataclass(frozen=True, eq=False)
class DiscreteHMM(StateSpaceModel):
    """K-state hidden Markov model with a finite observation alphabet."""

    initial: np.ndarray
    transition: np.ndarray
    emission: np.ndarray

    def __post_init__(self):
        for name, mat in (("initial", self.initial), ("transition", self.transition),
                          ("emission", self.emission)):
            rows = np.atleast_2d(mat)
            if np.any(rows < 0) or not np.allclose(rows.sum(axis=1), 1.0, atol=1e-12):
                raise ValueError(f"{name} rows must be probability vectors")
        object.__setattr__(self, "_trans_cdf", np.cumsum(self.transition, axis=1))
        with np.errstate(divide="ignore"):
            object.__setattr__(self, "_log_a", np.log(self.transition))
            object.__setattr__(self, "_log_b", np.log(self.emission))
            object.__setattr__(self, "_log_pi", np.log(self.initial))

    @property
    def k(self) -> int:
        return len(self.initial)

    def simulate(self, T: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        x = np.empty(T + 1, dtype=int)
        x[0] = inverse_cdf(np.cumsum(self.initial), rng.random(1))[0]
        for t in range(1, T + 1):
            x[t] = inverse_cdf(self._trans_cdf[x[t - 1]], rng.random(1))[0]
        y = np.array([inverse_cdf(np.cumsum(self.emission[s]), rng.random(1))[0] for s in x])
        return x, y

    def initial_sample(self, y0, n, rng):
        return inverse_cdf(np.cumsum(self.initial), rng.random(n))

    def initial_log_weight(self, x0, y0):
        return self._log_b[x0, y0]

    def transition_log_density(self, x_prev, x_new):
        return self._log_a[x_prev, x_new]

    def transition_bound(self):
        return float(self.transition.max())

    def transition_log_envelope(self, x_prev, x_new, candidates: str):
        """Row or column maxima of the transition matrix, per candidate."""
        if candidates not in ("prev", "new"):
            raise ValueError("candidates must be 'prev' or 'new'")
        with np.errstate(divide="ignore"):
            if candidates == "prev":
                return np.log(self.transition.max(axis=1))[np.asarray(x_prev)]
            return np.log(self.transition.max(axis=0))[np.asarray(x_new)]

    def transition_sample(self, x_prev, rng):
        cdf = self._trans_cdf[x_prev]
        u = rng.random(len(x_prev))[:, None] * cdf[:, -1:]
        return np.minimum((cdf <= u).sum(axis=1), self.k - 1)

    def observation_log_density(self, x, y):
        return self._log_b[x, y]


def random_hmm(k: int, m: int, rng: np.random.Generator, stickiness: float = 4.0,
               clarity: float = 4.0) -> DiscreteHMM:
    """Random HMM with Dirichlet rows; diagonal concentration boosted.

    Emissions map state s preferentially to symbol ``s % m``.
    """
    trans = np.array([rng.dirichlet(1.0 + stickiness * np.eye(k)[i]) for i in range(k)])
    emis = np.array([rng.dirichlet(1.0 + clarity * np.eye(m)[i % m]) for i in range(k)])
    return DiscreteHMM(rng.dirichlet(np.ones(k)), trans, emis)


def _check_size(model: DiscreteHMM, T: int, limit: int) -> None:
    if model.k ** (T + 1) > limit:
        raise TooLarge(f"{model.k}^{T + 1} paths exceeds {limit}")


def _segment_table(model: DiscreteHMM, y, start: int, stop: int, with_prior: bool) -> np.ndarray:
    """Unnormalised table over paths x_{start-1:stop} (or x_{0:stop} with the prior).

    Entry = prod_{s} A[x_{s-1}, x_s] B[x_s, y_s] over the segment, times
    pi[x_0] B[x_0, y_0] when ``with_prior``.  Built by broadcasting products.
    """
    K = model.k
    if with_prior:
        table = model.initial * model.emission[:, y[0]]
        first = 1
    else:
        table = np.ones(K)
        first = start
    for s in range(first, stop + 1):
        factor = model.transition * model.emission[:, y[s]][None, :]
        table = table[..., None] * factor.reshape((1,) * (table.ndim - 1) + (K, K))
    return table


def hmm_exact_joint(model: DiscreteHMM, y: Sequence[int], limit: int = 10 ** 7) -> np.ndarray:
    """p(x_{0:T} | y_{0:T}) as a K^(T+1) array."""
    y = np.asarray(y)
    T = len(y) - 1
    _check_size(model, T, limit)
    table = _segment_table(model, y, 0, T, with_prior=True)
    return table / table.sum()


def hmm_exact_fixed_lag_joint(model: DiscreteHMM, y: Sequence[int], lag: int,
                              limit: int = 10 ** 7) -> np.ndarray:
    """Fixed-lag joint law of x_{0:T} as a K^(T+1) array.

    Product of p(x_0 | y_{0:L}), p(x_t | x_{t-1}, y_{t:t+L}) for
    1 <= t <= T-L-1, and p(x_{T-L:T} | x_{T-L-1}, y_{T-L:T}); each factor is
    obtained by summing an enumerated segment table and normalising.
    """
    y = np.asarray(y)
    T = len(y) - 1
    _check_size(model, T, limit)
    if lag >= T:
        return hmm_exact_joint(model, y, limit)
    K = model.k
    split = T - lag  # first coordinate of the final block

    seg = _segment_table(model, y, 0, lag, with_prior=True)
    first = seg.reshape(K, -1).sum(axis=1)
    table = first / first.sum()

    for t in range(1, split):
        seg = _segment_table(model, y, t, t + lag, with_prior=False)  # axes x_{t-1}, x_t, ...
        cond = seg.reshape(K, K, -1).sum(axis=2)
        cond = cond / cond.sum(axis=1, keepdims=True)
        table = table[..., None] * cond.reshape((1,) * (table.ndim - 1) + (K, K))

    seg = _segment_table(model, y, split, T, with_prior=False)  # axes x_{split-1}, x_{split:T}
    flat = seg.reshape(K, -1)
    block = (flat / flat.sum(axis=1, keepdims=True)).reshape(seg.shape)
    lead = table.ndim - 1
    return table.reshape(table.shape + (1,) * (lag + 1)) * block.reshape((1,) * lead + block.shape)


def hmm_forward_backward(model: DiscreteHMM, y: Sequence[int]) -> np.ndarray:
    """Smoothing marginals p(x_t | y_{0:T}) by scaled forward-backward, shape (T+1, K)."""
    y = np.asarray(y)
    T = len(y) - 1
    alpha = np.empty((T + 1, model.k))
    a = model.initial * model.emission[:, y[0]]
    alpha[0] = a / a.sum()
    for t in range(1, T + 1):
        a = (alpha[t - 1] @ model.transition) * model.emission[:, y[t]]
        alpha[t] = a / a.sum()
    beta = np.ones(model.k)
    post = np.empty_like(alpha)
    post[T] = alpha[T]
    for t in range(T - 1, -1, -1):
        beta = model.transition @ (model.emission[:, y[t + 1]] * beta)
        beta /= beta.sum()
        p = alpha[t] * beta
        post[t] = p / p.sum()
    return post


def path_marginals(table: np.ndarray) -> np.ndarray:
    """Per-time marginals of a path table, shape (T+1, K)."""
    axes = range(table.ndim)
    return np.array([table.sum(axis=tuple(a for a in axes if a != t)) for t in axes])


def empirical_path_table(paths: np.ndarray, k: int) -> np.ndarray:
    """Empirical law of integer paths (N, T+1) as a K^(T+1) array."""
    n, length = paths.shape
    flat = np.ravel_multi_index(paths.T, (k,) * length)
    counts = np.bincount(flat, minlength=k ** length)
    return (counts / n).reshape((k,) * length)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum())
