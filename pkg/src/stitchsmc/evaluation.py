"""Evaluation metrics and timing harness."""

from __future__ import annotations

import gc
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import TrajectorySample, multinomial_indices


class EmptySample(ValueError):
    pass


def binned_tv(sample_a: Sequence[float], sample_b: Sequence[float], bin_width: float = 5.0) -> float:
    """Total variation between two samples after binning into [k w, (k+1) w)."""
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise EmptySample("both samples must be nonempty")
    ia = np.floor(a / bin_width).astype(np.int64)
    ib = np.floor(b / bin_width).astype(np.int64)
    bins, inv = np.unique(np.concatenate([ia, ib]), return_inverse=True)
    fa = np.bincount(inv[:a.size], minlength=len(bins)) / a.size
    fb = np.bincount(inv[a.size:], minlength=len(bins)) / b.size
    return float(0.5 * np.abs(fa - fb).sum())


def block_distance(trajectory: Sequence, block: range | None = None) -> float:
    """Road distance travelled over the steps in ``block`` (default: every step after the first)."""
    indices = range(1, len(trajectory)) if block is None else block
    return float(sum(trajectory[i].distance for i in indices))


def minute_blocks(times: Sequence[float], block_seconds: float = 60.0) -> list[range]:
    """Consecutive step indices t >= 1 grouped by the block containing t."""
    times = np.asarray(times, dtype=float)
    if len(times) < 2:
        return []
    key = np.floor((times[1:] - times[0] - 1e-9) / block_seconds).astype(int)
    blocks = []
    start = 1
    for t in range(2, len(times) + 1):
        if t == len(times) or key[t - 1] != key[start - 1]:
            blocks.append(range(start, t))
            start = t
    return blocks


def block_distances(trajectories: np.ndarray, blocks: Sequence[range]) -> np.ndarray:
    """(n_particles, n_blocks) road distance travelled by each particle in each block."""
    dist = np.array([[s.distance for s in row] for row in trajectories])
    return np.stack([dist[:, list(b)].sum(axis=1) for b in blocks], axis=1)


def unweighted(sample: TrajectorySample, rng: np.random.Generator) -> TrajectorySample:
    """Resample a weighted sample; unweighted samples pass through."""
    if not sample.weighted:
        return sample
    return sample.take(multinomial_indices(sample.log_weights, sample.n, rng))


def per_block_tv(a: np.ndarray, b: np.ndarray, times: Sequence[float], bin_width: float = 5.0,
                 block_seconds: float = 60.0) -> np.ndarray:
    """binned_tv of per-block distance travelled between two trajectory arrays."""
    blocks = minute_blocks(times, block_seconds)
    da, db = block_distances(a, blocks), block_distances(b, blocks)
    return np.array([binned_tv(da[:, k], db[:, k], bin_width) for k in range(len(blocks))])


def unique_count(trajectories, t: int) -> int:
    """Distinct states at time ``t`` across trajectories."""
    if isinstance(trajectories, TrajectorySample):
        column = trajectories.columns[t]
    else:
        column = np.asarray(trajectories)[:, t]
    if column.dtype == object:
        return len(set(column.tolist()))
    return len(np.unique(column, axis=0))


@dataclass
class BenchRow:
    n: int
    r: int
    mean_s: float
    sd_s: float


def bench_update(make_state: Callable[[int, int, int], object], update: Callable[[object, object], object],
                 observations: Sequence, n_values: Sequence[int], r_values: Sequence[int],
                 seeds: Sequence[int], warmup: int = 1) -> list[BenchRow]:
    """Mean and standard deviation of per-update wall time.

    ``make_state(n, r, seed)`` builds a smoother after the first observation;
    every later observation is timed except the first ``warmup`` updates.
    As in ``timeit``, the cyclic garbage collector is paused while timing.
    """
    rows = []
    for r in r_values:
        for n in n_values:
            times = []
            for seed in seeds:
                state = make_state(n, r, seed)
                gc.collect()
                gc.disable()
                try:
                    for k, y in enumerate(observations[1:]):
                        start = time.perf_counter()
                        state = update(state, y)
                        elapsed = time.perf_counter() - start
                        if k >= warmup:
                            times.append(elapsed)
                finally:
                    gc.enable()
            times = np.array(times)
            rows.append(BenchRow(n, r, float(times.mean()), float(times.std(ddof=1)) if len(times) > 1 else 0.0))
    return rows
