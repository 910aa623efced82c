"""Discrete-event simulation of the M-server choice-of-d system.

Rates follow the level form: arrivals land on a size-(k-1) queue at rate
lam*M*(s_{k-1}^d - s_k^d), realized by sampling d servers uniformly with
replacement and joining the shortest; departures leave a size-k queue at
rate M*(s_k - s_{k+1}), realized by picking a uniform busy server.
Stationary quantities are time-weighted averages over (warmup, horizon],
split into equal-time batches for Student-t confidence intervals.

next_event/apply_event expose single transitions for inspection; the
bulk path runs in the compiled kernel, driven here block-by-block so
one Philox stream per (seed, stream id) owns every draw.  A run that
outgrows its tail-count capacity is rerun from scratch with double the
headroom, which reproduces the identical event path.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import _kernel
from .core import ModelParams, OccupancyState, equilibrium

__all__ = [
    "SimConfig",
    "Event",
    "StationaryEstimate",
    "next_event",
    "apply_event",
    "simulate",
    "estimate_mse",
    "sample_stationary_states",
]

_BLOCK = 1 << 17


@dataclass(frozen=True)
class SimConfig:
    """Simulation run parameters.

    warmup_time defaults to max(100, 10 ln M / (1 - lam)) and
    horizon_time to 100x warmup, both resolved against the model
    parameters at run time since mixing slows as lam -> 1.
    """

    seed: int
    warmup_time: float | None = None
    horizon_time: float | None = None
    batches: int = 20
    n_report: int = 10

    def __post_init__(self):
        if not (isinstance(self.seed, (int, np.integer)) and 0 <= self.seed < 2**64):
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.batches < 2:
            raise ValueError("batch means needs at least 2 batches")
        if self.n_report < 1:
            raise ValueError("n_report must be positive")
        for name in ("warmup_time", "horizon_time"):
            val = getattr(self, name)
            if val is not None and not val > 0.0:
                raise ValueError(f"{name} must be positive, got {val}")


def _resolve_times(params: ModelParams, config: SimConfig) -> tuple[float, float]:
    warmup = config.warmup_time
    if warmup is None:
        warmup = max(100.0, 10.0 * math.log(params.M) / (1.0 - params.lam))
    horizon = config.horizon_time
    if horizon is None:
        horizon = 100.0 * warmup
    if horizon <= warmup:
        raise ValueError(f"horizon {horizon} must exceed warmup {warmup}")
    return float(warmup), float(horizon)


@dataclass(frozen=True)
class Event:
    kind: str  # "arrival" or "departure"
    level: int  # arrival onto a size-(level-1) queue / departure from a size-level queue

    def __post_init__(self):
        if self.kind not in ("arrival", "departure"):
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.level < 1:
            raise ValueError(f"event level must be >= 1, got {self.level}")


@dataclass(frozen=True)
class StationaryEstimate:
    """Batch-means estimates from one run; half-widths are 95% Student-t.

    mean_tail is indexed by level: entry k estimates the stationary
    fraction of queues with length >= k, with entry 0 pinned at exactly
    1 (every queue has length >= 0).  tail_ci matches, entry 0 = 0.
    """

    mean_tail: np.ndarray
    tail_ci: np.ndarray
    mean_square_error: float
    mse_ci: float
    total_events: int
    seed_used: int
    meta: dict = field(default_factory=dict)


def _rng_for(seed: int, stream: int, role: int) -> np.random.Generator:
    seq = np.random.SeedSequence(seed, spawn_key=(stream, role))
    return np.random.Generator(np.random.Philox(seq))


def _rank_length(tail: np.ndarray, rank: int) -> int:
    """Queue length of the rank-th server when sorted by length, descending."""
    length = 0
    while length + 1 < tail.size and tail[length + 1] > rank:
        length += 1
    return length


def next_event(state: OccupancyState, params: ModelParams, rng) -> tuple[float, Event]:
    if state.M != params.M:
        raise ValueError(f"state has {state.M} servers, params say {params.M}")
    tail = state.tail_counts()
    busy = int(tail[1]) if tail.size > 1 else 0
    lam_m = params.lam * params.M
    total_rate = lam_m + busy
    dt = -math.log1p(-rng.random()) / total_rate
    if rng.random() * total_rate < lam_m:
        shortest = None
        for _ in range(params.d):
            rank = min(int(rng.random() * params.M), params.M - 1)
            length = _rank_length(tail, rank)
            shortest = length if shortest is None else min(shortest, length)
        return dt, Event("arrival", shortest + 1)
    rank = min(int(rng.random() * busy), busy - 1)
    level = 1
    while level + 1 < tail.size and tail[level + 1] > rank:
        level += 1
    return dt, Event("departure", level)


def apply_event(state: OccupancyState, event: Event) -> OccupancyState:
    k = event.level
    counts = state.counts
    if event.kind == "arrival":
        if k - 1 >= counts.size or counts[k - 1] <= 0:
            raise RuntimeError(f"infeasible arrival at level {k}: no size-{k - 1} queue")
        new = np.zeros(max(counts.size, k + 1), dtype=np.int64)
        new[: counts.size] = counts
        new[k - 1] -= 1
        new[k] += 1
    else:
        if k >= counts.size or counts[k] <= 0:
            raise RuntimeError(f"infeasible departure at level {k}: no size-{k} queue")
        new = counts.copy()
        new[k] -= 1
        new[k - 1] += 1
    return OccupancyState(new)


def _initial_cap(params: ModelParams, horizon: float) -> int:
    if params.d >= 2:
        return 64
    # single-choice queues are geometric; size so overflow-restarts stay rare
    expected_events = 2.0 * params.lam * params.M * horizon
    depth = math.log(100.0 * max(expected_events, 1.0)) / math.log(1.0 / params.lam)
    return max(64, math.ceil(depth))


def _inspection_times(
    rng, params: ModelParams, warmup: float, horizon: float, budget: int
) -> np.ndarray:
    """Exponential inspection times in (warmup, horizon), capped in count.

    Hitting a stationary path at such times reproduces time-weighted
    sampling.  The rate is anchored to the default window for the given
    params, so a longer horizon yields proportionally more snapshots
    (CLT-scaled CIs) until the hard cap of 1.25x the budget; truncation
    by the cap leaves a prefix of the window and is flagged.
    """
    d_warm, d_hori = _resolve_times(params, SimConfig(seed=0))
    scale = (d_hori - d_warm) / budget
    cap = math.ceil(1.25 * budget)
    times = []
    t = warmup
    while True:
        t += rng.exponential(scale)
        if t >= horizon:
            return np.asarray(times, dtype=np.float64)
        if len(times) >= cap:
            warnings.warn(
                f"snapshot budget exhausted at t={t:.6g} < horizon={horizon:.6g}; "
                "snapshots cover a prefix of the window",
                stacklevel=3,
            )
            return np.asarray(times, dtype=np.float64)
        times.append(t)


def _run_kernel(
    params: ModelParams,
    config: SimConfig,
    stream: int = 0,
    snapshot_budget: int = 0,
) -> dict:
    warmup, horizon = _resolve_times(params, config)
    bounds = np.linspace(warmup, horizon, config.batches + 1)
    if snapshot_budget > 0:
        insp = _inspection_times(
            _rng_for(config.seed, stream, 1), params, warmup, horizon, snapshot_budget
        )
    else:
        insp = np.empty(0, dtype=np.float64)
    cap = _initial_cap(params, horizon)
    while True:
        rng = _rng_for(config.seed, stream, 0)
        tail = np.zeros(cap + 1, dtype=np.int64)
        tail[0] = params.M
        last = np.zeros(cap + 1)
        t_state = np.zeros(1)
        acc1 = np.zeros((bounds.size, cap + 1))
        acc2 = np.zeros((bounds.size, cap + 1))
        snaps = np.zeros((insp.size, cap + 1), dtype=np.int64)
        istate = np.zeros(_kernel.ISTATE_LEN, dtype=np.int64)
        buf = rng.random(_BLOCK)
        while True:
            status = _kernel.run_events(
                tail, last, t_state, acc1, acc2, bounds, insp, snaps, buf, istate,
                float(params.lam), params.M, params.d,
            )
            if status != _kernel.NEED_BLOCK:
                break
            buf = np.concatenate([buf[istate[_kernel.I_UPOS] :], rng.random(_BLOCK)])
            istate[_kernel.I_UPOS] = 0
        if status == _kernel.DONE:
            return {
                "acc1": acc1[1:],  # drop the warmup segment
                "acc2": acc2[1:],
                "snaps": snaps,
                "events": int(istate[_kernel.I_EVENTS]),
                "deepest": int(istate[_kernel.I_DEEP]),
                "warmup": warmup,
                "horizon": horizon,
                "cap": cap,
            }
        cap *= 2  # a queue outgrew the tail array: rerun, identical path, more room


def _t_quantile(batches: int) -> float:
    return float(stats.t.ppf(0.975, batches - 1))


def _batch_stats(batch_vals: np.ndarray, tq: float) -> tuple[np.ndarray, np.ndarray]:
    mean = batch_vals.mean(axis=0)
    half = tq * batch_vals.std(axis=0, ddof=1) / math.sqrt(batch_vals.shape[0])
    return mean, half


def _estimate(params: ModelParams, config: SimConfig, stream: int = 0) -> StationaryEstimate:
    res = _run_kernel(params, config, stream=stream)
    batches = config.batches
    seg_dt = (res["horizon"] - res["warmup"]) / batches
    cap = res["cap"]
    big_m = params.M
    tq = _t_quantile(batches)

    tail_batches = res["acc1"][:, 1:] / (big_m * seg_dt)  # (batches, cap)
    star = equilibrium(params.lam, cap)
    mse_batches = (
        res["acc2"][:, 1:] / (big_m**2 * seg_dt)
        - 2.0 * star * tail_batches
        + star**2
    ).sum(axis=1)
    # levels beyond cap: the state never reaches them and their s*_k
    # has underflowed to exact zero, so the remaining series vanishes

    k = min(config.n_report, cap)
    tail_mean, tail_half = _batch_stats(tail_batches[:, :k], tq)
    mse_mean, mse_half = _batch_stats(mse_batches, tq)
    return StationaryEstimate(
        mean_tail=np.concatenate([[1.0], tail_mean]),
        tail_ci=np.concatenate([[0.0], tail_half]),
        mean_square_error=float(mse_mean),
        mse_ci=float(mse_half),
        total_events=res["events"],
        seed_used=config.seed,
        meta={
            "lam": params.lam,
            "M": big_m,
            "d": params.d,
            "stream": stream,
            "warmup": res["warmup"],
            "horizon": res["horizon"],
            "batches": batches,
            "capacity": cap,
            "deepest_level": res["deepest"],
        },
    )


def simulate(params: ModelParams, config: SimConfig, stream: int = 0) -> StationaryEstimate:
    """Run one replication and estimate stationary tail moments."""
    return _estimate(params, config, stream=stream)


def estimate_mse(
    params: ModelParams, config: SimConfig, n: int, stream: int = 0
) -> tuple[float, float]:
    """Time-average of the squared deviation series, with its half-width.

    The estimate always covers every level the state ever occupied plus
    the full equilibrium tail (levels never reached contribute their
    s*_k^2 exactly; past the double-precision underflow depth those are
    exact zeros), so the value does not depend on n beyond validation.
    """
    if n < 1:
        raise ValueError(f"truncation level must be >= 1, got {n}")
    est = _estimate(params, config, stream=stream)
    return est.mean_square_error, est.mse_ci


def _occupancy_from_tail_row(row: np.ndarray) -> OccupancyState:
    counts = np.append(row[:-1] - row[1:], row[-1])
    nonzero = np.nonzero(counts)[0]
    top = int(nonzero[-1]) if nonzero.size else 0
    return OccupancyState(counts[: top + 1])


def sample_stationary_states(
    params: ModelParams,
    config: SimConfig,
    budget: int = 200,
    stream: int = 0,
) -> list[OccupancyState]:
    """States hit at independent exponential inspection times.

    The inspection clock runs on its own substream with its rate anchored
    to the default window for params (budget snapshots per default span),
    so each state is a time-weighted stationary draw and a longer horizon
    yields proportionally more draws, up to 1.25x budget (exceeding that
    warns and truncates; see _inspection_times).
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    res = _run_kernel(params, config, stream=stream, snapshot_budget=budget)
    return [_occupancy_from_tail_row(row) for row in res["snaps"]]
