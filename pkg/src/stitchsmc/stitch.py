"""Fixed-lag particle stitching and the smoothers built on it.

The hybrid sampler shared by stitching and backward simulation draws, for
each row ``i``, an index ``j`` with probability proportional to
``exp(cand_log_w[j] + kernel(i, j))``.  Up to ``R`` rejection proposals are
tried per row (in vectorised rounds) before falling back to computing the
full row of weights, in blocks of rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

import numpy as np

from .core import (
    AllWeightsZero,
    MissingBound,
    StateSpaceModel,
    TrajectorySample,
    WeightedSample,
    ess,
    filter_step,
    initialise,
    inverse_cdf,
    marginal_fixed_lag_update,
    multinomial_indices,
    normalise_log_weights,
    pf_update,
    uniform_log_weights,
)

BOUND_TOLERANCE = 1e-9
DIRECT_BLOCK_CELLS = 1 << 20


@dataclass
class HybridStats:
    """Counters from one hybrid sampling pass."""

    accepted: int = 0
    proposals: int = 0
    direct: int = 0
    dead: int = 0


def hybrid_sample(cand_log_w: np.ndarray,
                  pair_log_kernel: Callable[[np.ndarray, np.ndarray], np.ndarray],
                  block_log_kernel: Callable[[np.ndarray], np.ndarray],
                  n_rows: int,
                  max_rejections: int,
                  rng: np.random.Generator,
                  log_bound=None,
                  *,
                  time: int | None = None,
                  stats: HybridStats | None = None,
                  skip_empty: bool = False) -> np.ndarray:
    """Sample one candidate index per row by rejection with direct fallback.

    ``pair_log_kernel(rows, cands)`` evaluates matched pairs;
    ``block_log_kernel(rows)`` returns the (len(rows), n_candidates) matrix.
    ``log_bound`` bounds the kernel, either as a scalar or per candidate; it
    is only consulted when ``max_rejections > 0``.  A row with no compatible
    candidate raises AllWeightsZero, or gets index -1 when ``skip_empty``.
    """
    cand_log_w = np.asarray(cand_log_w, dtype=float)
    choice = np.full(n_rows, -1, dtype=np.intp)
    pending = np.arange(n_rows)

    if max_rejections > 0:
        if log_bound is None:
            raise MissingBound("rejection sampling needs a transition bound")
        bound = np.broadcast_to(np.asarray(log_bound, dtype=float), cand_log_w.shape)
        prop = cand_log_w + bound
        if np.isfinite(prop).any():
            cdf = np.cumsum(np.exp(prop - prop[np.isfinite(prop)].max()))
            for _ in range(max_rejections):
                if pending.size == 0:
                    break
                c = inverse_cdf(cdf, rng.random(pending.size))
                u = rng.random(pending.size)
                log_k = np.asarray(pair_log_kernel(pending, c), dtype=float)
                excess = log_k - bound[c]
                if np.any(excess > BOUND_TOLERANCE):
                    raise ValueError("transition bound violated during rejection sampling")
                accept = np.log(u) < excess
                choice[pending[accept]] = c[accept]
                if stats is not None:
                    stats.proposals += pending.size
                    stats.accepted += int(accept.sum())
                pending = pending[~accept]

    step = max(1, DIRECT_BLOCK_CELLS // max(cand_log_w.size, 1))
    for start in range(0, pending.size, step):
        rows = pending[start:start + step]
        log_w = cand_log_w[None, :] + np.asarray(block_log_kernel(rows), dtype=float)
        top = log_w.max(axis=1)
        empty = ~np.isfinite(top)
        if empty.any() and not skip_empty:
            i = int(rows[np.flatnonzero(empty)[0]])
            raise AllWeightsZero("no compatible candidate", time=time, index=i)
        with np.errstate(invalid="ignore"):
            cdf = np.cumsum(np.exp(log_w - top[:, None]), axis=1)
        u = rng.random(rows.size) * cdf[:, -1]
        picks = np.minimum((cdf <= u[:, None]).sum(axis=1), cand_log_w.size - 1)
        choice[rows[~empty]] = picks[~empty]
    if stats is not None:
        stats.direct += len(pending)
    return choice


@dataclass
class StitchBlock:
    """Weighted tails x~_{T-L-1:T}; the first column is the overlap coordinate."""

    columns: list[np.ndarray]
    log_weights: np.ndarray

    def __post_init__(self):
        if len(self.columns) < 2:
            raise ValueError("a stitch block needs the overlap plus at least one coordinate")
        n = len(self.columns[0])
        if any(len(c) != n for c in self.columns) or len(self.log_weights) != n:
            raise ValueError("block columns and weights differ in length")

    @property
    def n(self) -> int:
        return len(self.columns[0])

    @property
    def overlap(self) -> np.ndarray:
        return self.columns[0]

    @property
    def first(self) -> np.ndarray:
        return self.columns[1]


def _proposal_log_weights(block: StitchBlock, model: StateSpaceModel) -> np.ndarray:
    """log w^_j = log w~_j - log p(x~_{T-L} | x~_{T-L-1}), up to a constant."""
    log_trans = np.asarray(model.transition_log_density(block.overlap, block.first), dtype=float)
    with np.errstate(invalid="ignore"):
        out = block.log_weights - log_trans
    # tails that are impossible under their own overlap carry no weight
    out[~np.isfinite(log_trans) | ~np.isfinite(block.log_weights)] = -np.inf
    return out


def stitch_weights(head_end, block: StitchBlock, model: StateSpaceModel) -> np.ndarray:
    """Normalised stitching weights over tails for a single head end state."""
    log_w = _proposal_log_weights(block, model) + model.transition_log_kernel(head_end, block.first)
    return np.exp(normalise_log_weights(log_w))


def stitch_indices(head_end: np.ndarray, block: StitchBlock, model: StateSpaceModel,
                   max_rejections: int, rng: np.random.Generator, *, time: int | None = None,
                   stats: HybridStats | None = None, skip_empty: bool = False) -> np.ndarray:
    """Tail index drawn for each head end by the stitching weights (-1 if skipped)."""
    tails_first = block.first
    cand_log_w = _proposal_log_weights(block, model)
    log_bound = None
    if max_rejections > 0:
        log_bound = model.transition_log_envelope(head_end, tails_first, "new")
    return hybrid_sample(
        cand_log_w,
        lambda rows, cands: model.transition_log_kernel(head_end[rows], tails_first[cands]),
        lambda rows: model.transition_log_kernel(head_end[rows][:, None], tails_first[None, :]),
        len(head_end), max_rejections, rng, log_bound, time=time, stats=stats,
        skip_empty=skip_empty)


def fixed_lag_stitch(heads: TrajectorySample, block: StitchBlock, model: StateSpaceModel,
                     max_rejections: int, rng: np.random.Generator, *, time: int | None = None,
                     stats: HybridStats | None = None, on_dead_head: str = "raise") -> TrajectorySample:
    """Join each head x_{0:T-L-1} to a tail drawn by its stitching weights.

    Head coordinates are never modified; the tail's overlap coordinate is
    discarded and its first coordinate re-expressed relative to the head.

    A head compatible with no tail raises AllWeightsZero.  With
    ``on_dead_head="resample"`` such heads are dropped instead and their
    slots refilled uniformly from the successfully stitched trajectories.
    """
    if on_dead_head not in ("raise", "resample"):
        raise ValueError(f"unknown on_dead_head policy {on_dead_head!r}")
    head_end = heads.columns[-1]
    tails_first = block.first
    choice = stitch_indices(head_end, block, model, max_rejections, rng, time=time, stats=stats,
                            skip_empty=on_dead_head == "resample")

    rows = np.arange(heads.n)
    dead = choice < 0
    if dead.any():
        alive = np.flatnonzero(~dead)
        if alive.size == 0:
            raise AllWeightsZero("no head has a compatible tail", time=time)
        rows = rows.copy()
        rows[dead] = alive[rng.integers(alive.size, size=int(dead.sum()))]
        choice = choice[rows]
        if stats is not None:
            stats.dead += int(dead.sum())
    first = model.rebase(head_end[rows], tails_first[choice])
    rest = [c[choice] for c in block.columns[2:]]
    return TrajectorySample([c[rows] for c in heads.columns] + [first] + rest)


def backward_simulation(filter_samples: list[WeightedSample], model: StateSpaceModel,
                        max_rejections: int, rng: np.random.Generator, *, n: int | None = None,
                        time_offset: int = 0, stats: HybridStats | None = None) -> TrajectorySample:
    """Backward simulation through weighted filtering samples for t = 0..T.

    Returns ``n`` (default N) unweighted trajectories of length T+1.
    """
    last = filter_samples[-1]
    n = last.n if n is None else n
    idx = multinomial_indices(last.log_weights, n, rng)
    cols = [last.particles[idx]]
    for t in range(len(filter_samples) - 2, -1, -1):
        sample = filter_samples[t]
        nxt = cols[0]
        cand_log_w = sample.log_weights - model.transition_log_normaliser(sample.particles, nxt)
        log_bound = None
        if max_rejections > 0:
            log_bound = model.transition_log_envelope(sample.particles, nxt, "prev")
        parts = sample.particles
        anc = hybrid_sample(
            cand_log_w,
            lambda rows, cands: model.transition_log_kernel(parts[cands], nxt[rows]),
            lambda rows: model.transition_log_kernel(parts[None, :], nxt[rows][:, None]),
            n, max_rejections, rng, log_bound, time=time_offset + t, stats=stats)
        chosen = parts[anc]
        cols[0] = model.rebase(chosen, nxt)
        cols.insert(0, chosen)
    return TrajectorySample(cols)


@dataclass
class SmootherState:
    """Everything an online smoother carries between observations."""

    model: StateSpaceModel
    lag: int
    max_rejections: int
    trajectories: TrajectorySample
    rng: np.random.Generator
    ess_threshold: float = 0.5
    window: list[WeightedSample] = field(default_factory=list)
    last_ess: float = float("nan")
    on_dead_head: str = "raise"

    @property
    def time(self) -> int:
        """Index T of the latest processed observation."""
        return self.trajectories.length - 1


def _init_state(model, y0, n, lag, max_rejections, rng, ess_threshold, keep_window):
    sample = initialise(model, y0, n, rng)
    state = SmootherState(model, lag, max_rejections, sample, rng, ess_threshold,
                          last_ess=ess(sample))
    if keep_window:
        state.window = [sample.marginal(0)]
    idx = multinomial_indices(sample.log_weights, n, rng)
    state.trajectories = sample.take(idx)
    return state


def online_smoother_init(model: StateSpaceModel, y0, n: int, lag: int, max_rejections: int,
                         rng: np.random.Generator, ess_threshold: float = 0.5) -> SmootherState:
    return _init_state(model, y0, n, lag, max_rejections, rng, ess_threshold, keep_window=False)


def online_smoother_bsi_init(model: StateSpaceModel, y0, n: int, lag: int, max_rejections: int,
                             rng: np.random.Generator, ess_threshold: float = 0.5) -> SmootherState:
    return _init_state(model, y0, n, lag, max_rejections, rng, ess_threshold, keep_window=True)


def online_smoother_update(state: SmootherState, y_new, rng: np.random.Generator | None = None,
                           stats: HybridStats | None = None) -> SmootherState:
    """Online particle smoother step: propagate, weight, stitch tails onto frozen heads."""
    rng = state.rng if rng is None else rng
    model, lag = state.model, state.lag
    traj = state.trajectories
    T = traj.length
    new, ancestors = filter_step(WeightedSample(traj.columns[-1], traj.log_weights), y_new, model,
                                 state.ess_threshold, rng, time=T)
    if ancestors is not None:
        traj = traj.take(ancestors)
    state.last_ess = ess(new)
    if T <= lag:
        extended = traj.extended(new.particles, new.log_weights)
        state.trajectories = extended.take(multinomial_indices(new.log_weights, new.n, rng))
        return state
    split = T - lag
    heads = TrajectorySample(traj.columns[:split])
    block = StitchBlock(traj.columns[split - 1:] + [new.particles], new.log_weights)
    state.trajectories = fixed_lag_stitch(heads, block, model, state.max_rejections, rng,
                                          time=T, stats=stats, on_dead_head=state.on_dead_head)
    return state


def online_smoother_bsi_update(state: SmootherState, y_new, rng: np.random.Generator | None = None,
                               stats: HybridStats | None = None) -> SmootherState:
    """Online smoother with partial backward simulation over the lag window."""
    rng = state.rng if rng is None else rng
    model, lag = state.model, state.lag
    traj = state.trajectories
    T = traj.length
    new, _ = filter_step(state.window[-1], y_new, model, state.ess_threshold, rng, time=T)
    state.last_ess = ess(new)
    window = state.window + [new]
    if T <= lag:
        state.trajectories = backward_simulation(window, model, state.max_rejections, rng,
                                                 stats=stats)
        state.window = window
        return state
    split = T - lag
    tails = backward_simulation(window[-(lag + 2):], model, state.max_rejections, rng,
                                time_offset=split - 1, stats=stats)
    heads = TrajectorySample(traj.columns[:split])
    block = StitchBlock(tails.columns, uniform_log_weights(tails.n))
    state.trajectories = fixed_lag_stitch(heads, block, model, state.max_rejections, rng,
                                          time=T, stats=stats, on_dead_head=state.on_dead_head)
    state.window = window[-(lag + 1):]
    return state


def run_particle_filter(model: StateSpaceModel, observations: Iterable[Any], n: int,
                        rng: np.random.Generator, ess_threshold: float = 0.5,
                        force_resample: bool = False) -> tuple[TrajectorySample, list[WeightedSample]]:
    """Full-trajectory particle filter; also returns every filtering marginal."""
    it = iter(observations)
    sample = initialise(model, next(it), n, rng)
    marginals = [sample.marginal(0)]
    for t, y in enumerate(it, start=1):
        sample = pf_update(sample, y, model, ess_threshold, rng, time=t,
                           force_resample=force_resample)
        marginals.append(sample.marginal(t))
    return sample, marginals


def run_filter_marginals(model: StateSpaceModel, observations: Iterable[Any], n: int,
                         rng: np.random.Generator, ess_threshold: float = 0.5) -> list[WeightedSample]:
    """Marginal particle filter output (no trajectories kept)."""
    it = iter(observations)
    marginals = [initialise(model, next(it), n, rng).marginal(0)]
    for t, y in enumerate(it, start=1):
        marginals.append(filter_step(marginals[-1], y, model, ess_threshold, rng, time=t)[0])
    return marginals


def ffbsi(model: StateSpaceModel, observations: Iterable[Any], n: int, max_rejections: int,
          rng: np.random.Generator, ess_threshold: float = 0.5) -> TrajectorySample:
    """Offline forward filtering, backward simulation."""
    marginals = run_filter_marginals(model, observations, n, rng, ess_threshold)
    return backward_simulation(marginals, model, max_rejections, rng)


def run_online(model: StateSpaceModel, observations: Iterable[Any], n: int, lag: int,
               max_rejections: int, rng: np.random.Generator, *, backward: bool = False,
               ess_threshold: float = 0.5, on_dead_head: str = "raise",
               stats: HybridStats | None = None) -> SmootherState:
    """Stream observations through an online smoother and return its final state."""
    it = iter(observations)
    init = online_smoother_bsi_init if backward else online_smoother_init
    update = online_smoother_bsi_update if backward else online_smoother_update
    state = init(model, next(it), n, lag, max_rejections, rng, ess_threshold)
    state.on_dead_head = on_dead_head
    for y in it:
        state = update(state, y, stats=stats)
    return state


def run_marginal_fixed_lag(model: StateSpaceModel, observations: Iterable[Any], n: int, lag: int,
                           rng: np.random.Generator) -> TrajectorySample:
    it = iter(observations)
    sample = initialise(model, next(it), n, rng)
    sample = sample.take(multinomial_indices(sample.log_weights, n, rng))
    for t, y in enumerate(it, start=1):
        sample = marginal_fixed_lag_update(sample, y, lag, model, rng, time=t)
    return sample
