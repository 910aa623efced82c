"""Poisson-equation machinery for the stationary mean-square error.

g(x) = -int_0^inf sum_k x_k(t,x)^2 dt satisfies grad g . f = sum_k x_k^2
along the truncated mean-field flow, so applying the exact finite-M
generator to g and averaging in stationarity splits the mean-square
error into a truncation term (the level-(n+1) coupling the closure
replaces with its equilibrium value) and a second-order term (the Taylor
residual of g across 1/M-sized jumps).  Everything here is numerical:
g by quadrature along a settled trajectory, directional derivatives by
co-integrated sensitivities, the generator by exact neighbor enumeration
on M-quantized tail states.

States recur heavily in stationarity at small M, so g evaluations are
memoized on the exact integer tail counts (GCache); distinct states are
independent and may be evaluated concurrently against a shared cache.
"""
from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import ModelParams, OccupancyState, TailState, _check_lambda, equilibrium, to_tail
from .meanfield import IntegratorConfig, solve_to_equilibrium
from .perturbation import SensitivitySetup, integrate_sensitivity
from .simulator import SimConfig, sample_stationary_states

__all__ = [
    "GEvaluation",
    "GCache",
    "SteinReport",
    "g_value",
    "g_gradient_dir",
    "generator_neighbors",
    "generator_apply_g",
    "transition_residuals",
    "bar_check",
    "stein_decomposition",
]

# g enters central differences at h = 1e-5 and per-transition residuals at
# the 1/M^2 scale, so its absolute error has to sit near 1e-9; tight solver
# tolerances achieve that, and the settle threshold stays far enough above
# the resulting noise floor for the terminal event to fire while the
# dropped tail is only O(settle_tol^2 / rate).
_STEIN_CFG = IntegratorConfig(rel_tol=1e-10, abs_tol=1e-12, settle_tol=1e-8)

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(5)


def _gl5(f, knots: np.ndarray) -> float:
    """5-point Gauss-Legendre on each panel between consecutive knots.

    With knots at the solver's accepted steps the integrand here is a
    product of two quartic dense-output polynomials per panel (degree
    <= 8), which the rule integrates exactly; the only error left is the
    interpolant's own.  f must accept a vector of times.
    """
    knots = np.asarray(knots, dtype=np.float64)
    a, b = knots[:-1], knots[1:]
    keep = b > a
    a, b = a[keep], b[keep]
    if a.size == 0:
        return 0.0
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    ts = (mid[:, None] + half[:, None] * _GL_NODES[None, :]).ravel()
    vals = np.asarray(f(ts), dtype=np.float64).reshape(-1, _GL_NODES.size)
    return float(((vals @ _GL_WEIGHTS) * half).sum())


@dataclass(frozen=True)
class GEvaluation:
    """One g(x) evaluation: the value, how long the flow took to settle,
    and an error estimate covering quadrature, solver drift, and the
    dropped exponential tail."""

    value: float
    settle_time: float
    quadrature_error_estimate: float


def _fitted_tail_rate(ts: np.ndarray, v: np.ndarray, fallback: float) -> float:
    mask = v > 0.0
    if mask.sum() >= 2:
        slope = np.polyfit(ts[mask], np.log(v[mask]), 1)[0]
        if slope < 0.0:
            return float(max(-slope, fallback))
    return fallback


def g_value(x, lam: float, cfg: IntegratorConfig | None = None) -> GEvaluation:
    """g(x): negated integral of the squared deviation along the flow.

    Integrates the trajectory until it settles, then applies the exact
    per-step quadrature.  The part beyond the settling time is bounded by
    the terminal value over the fitted decay rate and charged to the
    error estimate, not the value.
    """
    cfg = cfg or _STEIN_CFG
    lam = _check_lambda(lam)
    traj, t_settle = solve_to_equilibrium(x, lam, cfg=cfg)
    if traj.meta.get("settled"):
        return GEvaluation(value=0.0, settle_time=0.0, quadrature_error_estimate=0.0)
    n = traj.states.shape[1]

    def sq(ts):
        ys = traj.dense(ts)
        return (ys * ys).sum(axis=0)

    integral = _gl5(sq, traj.times)
    t_end = float(traj.times[-1])
    ts_late = np.linspace(max(0.0, 0.75 * t_end), t_end, 33)
    v_late = sq(ts_late)
    rate = _fitted_tail_rate(ts_late, v_late, fallback=(1.0 - math.sqrt(lam)) / (2.0 * n))
    tail = float(v_late[-1]) / rate
    l1_int = float(np.trapezoid(np.abs(traj.states).sum(axis=1), traj.times))
    err = 2.0 * (cfg.rel_tol * integral + cfg.abs_tol * l1_int) + tail
    return GEvaluation(
        value=-float(integral),
        settle_time=float(t_settle),
        quadrature_error_estimate=float(err),
    )


def g_gradient_dir(
    x,
    v,
    lam: float,
    cfg: IntegratorConfig | None = None,
    t_span: float | None = None,
) -> float:
    """Directional derivative grad g(x) . v via the sensitivity flow.

    Returns -int_0^inf 2 sum_k x_k(t) x1_k(t) dt with x1(0) = v, the
    chain rule applied under g's integral.  t_span defaults to a margin
    past the base flow's settling time; pass it when known to skip the
    settling solve.
    """
    cfg = cfg or _STEIN_CFG
    lam = _check_lambda(lam)
    setup = SensitivitySetup(x0=np.asarray(x, dtype=np.float64), z=v)
    if not setup.x0.any():
        return 0.0
    if t_span is None:
        _, t_settle = solve_to_equilibrium(setup.x0, lam, cfg=cfg)
        t_span = 1.5 * t_settle + 10.0
    aug = integrate_sensitivity(setup, lam, cfg=cfg, t_span=t_span)
    n = aug.n

    def cross(ts):
        ys = aug.dense(ts)
        return 2.0 * (ys[:n] * ys[n : 2 * n]).sum(axis=0)

    return -_gl5(cross, aug.times)


class GCache:
    """Memo table for g values and directional gradients.

    Keys are exact integer tail-count tuples truncated to the report
    depth, so revisited CTMC states reuse their trajectory solves.
    Lookups are plain dict reads and safe under concurrent readers;
    inserts serialize on a lock.  A lost insert race recomputes the same
    deterministic value and the first insert wins, so workers never see
    inconsistent entries.
    """

    def __init__(self) -> None:
        self._values: dict[tuple, GEvaluation] = {}
        self._grads: dict[tuple, float] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._values) + len(self._grads)

    def value(self, key: tuple, compute) -> GEvaluation:
        out = self._values.get(key)
        if out is not None:
            with self._lock:
                self.hits += 1
            return out
        result = compute()
        with self._lock:
            self.misses += 1
            return self._values.setdefault(key, result)

    def gradient(self, key: tuple, coord: int, compute) -> float:
        gkey = (key, coord)
        out = self._grads.get(gkey)
        if out is not None:
            with self._lock:
                self.hits += 1
            return out
        result = compute()
        with self._lock:
            self.misses += 1
            return self._grads.setdefault(gkey, result)


def generator_neighbors(
    s: TailState, params: ModelParams
) -> list[tuple[float, TailState]]:
    """All positive-rate transitions out of an M-quantized tail state.

    Arrivals add a job to a length-(k-1) queue at rate
    lam*M*(s_{k-1}^d - s_k^d), exact for d choices with replacement;
    departures drain a length-k queue at rate M*(s_k - s_{k+1}).  Rates
    are computed on integer counts so they are exact, and the neighbor
    list has at most 2*(deepest occupied level + 1) entries.
    """
    if not isinstance(s, TailState):
        s = TailState(np.asarray(s, dtype=np.float64))
    M, d, lam = params.M, params.d, params.lam
    if not s.is_quantized(M):
        raise ValueError(f"tail state is not quantized to multiples of 1/{M}")
    counts = np.rint(s.s * M).astype(np.int64)
    occupied = np.nonzero(counts)[0]
    deepest = int(occupied[-1]) + 1 if occupied.size else 0
    width = max(s.n, deepest + 1)
    full = np.zeros(width + 1, dtype=np.int64)  # full[k] = T_k for k = 0..width
    full[0] = M
    full[1 : counts.size + 1] = counts

    out: list[tuple[float, TailState]] = []
    for k in range(1, deepest + 2):
        rate = lam * (int(full[k - 1]) ** d - int(full[k]) ** d) / M ** (d - 1)
        if rate > 0.0:
            nbr = full[1:].copy()
            nbr[k - 1] += 1
            out.append((float(rate), TailState(nbr / M)))
    for k in range(1, deepest + 1):
        rate = float(full[k] - full[k + 1])
        if rate > 0.0:
            nbr = full[1:].copy()
            nbr[k - 1] -= 1
            out.append((rate, TailState(nbr / M)))
    return out


def _truncated_key(counts, n: int) -> tuple[int, ...]:
    c = np.zeros(n, dtype=np.int64)
    m = min(n, len(counts))
    c[:m] = counts[:m]
    return tuple(int(v) for v in c)


def _key_to_shifted(key: tuple[int, ...], M: int, star: np.ndarray) -> np.ndarray:
    return np.asarray(key, dtype=np.float64) / M - star


def _cached_value(
    cache: GCache, key: tuple, M: int, star: np.ndarray, lam: float, cfg: IntegratorConfig
) -> GEvaluation:
    return cache.value(key, lambda: g_value(_key_to_shifted(key, M, star), lam, cfg))


def _cached_gradient(
    cache: GCache,
    key: tuple,
    coord: int,
    M: int,
    star: np.ndarray,
    lam: float,
    cfg: IntegratorConfig,
    t_span: float,
) -> float:
    def compute() -> float:
        unit = np.zeros(len(key))
        unit[coord] = 1.0
        return g_gradient_dir(
            _key_to_shifted(key, M, star), unit, lam, cfg=cfg, t_span=t_span
        )

    return cache.gradient(key, coord, compute)


def _full_tail(occ: OccupancyState) -> TailState:
    return to_tail(occ, occ.M, max(occ.max_level, 1))


def generator_apply_g(
    s: TailState,
    params: ModelParams,
    n: int,
    cfg: IntegratorConfig | None = None,
    cache: GCache | None = None,
) -> float:
    """G_M g at an M-quantized state: sum of rate*(g(y) - g(x)).

    g sees the shifted coordinates truncated to depth n, so transitions
    at deeper levels leave g unchanged and drop out exactly.
    """
    cfg = cfg or _STEIN_CFG
    if cache is None:
        cache = GCache()
    if not isinstance(s, TailState):
        s = TailState(np.asarray(s, dtype=np.float64))
    M = params.M
    star = equilibrium(params.lam, n)
    key = _truncated_key(np.rint(s.s * M).astype(np.int64), n)
    gx = _cached_value(cache, key, M, star, params.lam, cfg).value
    total = 0.0
    for rate, nbr in generator_neighbors(s, params):
        nk = _truncated_key(np.rint(nbr.s * M).astype(np.int64), n)
        if nk == key:
            continue
        gy = _cached_value(cache, nk, M, star, params.lam, cfg).value
        total += rate * (gy - gx)
    return float(total)


def transition_residuals(
    s: TailState,
    params: ModelParams,
    n: int,
    cfg: IntegratorConfig | None = None,
    cache: GCache | None = None,
) -> dict[tuple[str, int], float]:
    """Second-order Taylor residual g(y) - g(x) - grad g . (y - x) per transition.

    Keyed by (kind, level) with kind in {"arrival", "departure"}, covering
    the neighbors that change a coordinate at depth <= n.  Each residual
    carries the 1/M^2 curvature scale that drives the second-order term.
    """
    cfg = cfg or _STEIN_CFG
    if cache is None:
        cache = GCache()
    if not isinstance(s, TailState):
        s = TailState(np.asarray(s, dtype=np.float64))
    M = params.M
    lam = params.lam
    star = equilibrium(lam, n)
    key = _truncated_key(np.rint(s.s * M).astype(np.int64), n)
    gx_eval = _cached_value(cache, key, M, star, lam, cfg)
    span = 1.5 * gx_eval.settle_time + 10.0
    out: dict[tuple[str, int], float] = {}
    for rate, nbr in generator_neighbors(s, params):
        nk = _truncated_key(np.rint(nbr.s * M).astype(np.int64), n)
        if nk == key:
            continue
        diff = np.subtract(nk, key)
        coord = int(np.nonzero(diff)[0][0])
        step = diff[coord] / M
        kind = "arrival" if diff[coord] > 0 else "departure"
        gy = _cached_value(cache, nk, M, star, lam, cfg).value
        grad = _cached_gradient(cache, key, coord, M, star, lam, cfg, span)
        out[(kind, coord + 1)] = float(gy - gx_eval.value - grad * step)
    return out


def _batch_ci(vals: np.ndarray, batches: int) -> tuple[float, float]:
    # contiguous chunks preserve whatever serial correlation the thinning
    # left, which is what batch means is for
    B = max(2, min(batches, vals.size // 2))
    means = np.array([chunk.mean() for chunk in np.array_split(vals, B)])
    tq = float(stats.t.ppf(0.975, B - 1))
    return float(means.mean()), float(tq * means.std(ddof=1) / math.sqrt(B))


def bar_check(
    params: ModelParams,
    sim_config: SimConfig,
    n: int,
    cfg: IntegratorConfig | None = None,
    budget: int = 200,
) -> tuple[float, float]:
    """Stationary average of G_M g with a batch-means half-width.

    In stationarity E[G_M g] = 0 exactly, so the returned mean should be
    consistent with zero; this is the adjoint-relation check.  Each
    distinct sampled state costs about 2n trajectory solves on a miss,
    so keep M and n small.
    """
    cfg = cfg or _STEIN_CFG
    states = sample_stationary_states(params, sim_config, budget=budget)
    if len(states) < 4:
        raise RuntimeError(
            f"only {len(states)} stationary snapshots; widen the horizon or budget"
        )
    cache = GCache()
    vals = np.array(
        [generator_apply_g(_full_tail(occ), params, n, cfg, cache) for occ in states]
    )
    return _batch_ci(vals, sim_config.batches)


@dataclass(frozen=True)
class SteinReport:
    """Both sides of the stationary decomposition on one thinned sample.

    lhs_mse estimates E[sum_{k<=n} x_k^2] directly; truncation_term
    estimates E[-dg/dx_n * x_{n+1}] with x_{n+1} read from the full
    occupancy state; second_order_term estimates the negated generator
    Taylor residual; bar_residual is the plain stationary average of
    G_M g.  identity_residual = lhs - truncation - second_order, which
    per state equals G_M g(x), so it doubles as a consistency check.
    All half-widths are 95% batch means.
    """

    lhs_mse: float
    lhs_ci: float
    truncation_term: float
    truncation_ci: float
    second_order_term: float
    second_order_ci: float
    bar_residual: float
    bar_ci: float
    identity_residual: float
    identity_ci: float
    n_states: int
    meta: dict = field(default_factory=dict)

    @property
    def identity_ci_units(self) -> float:
        if self.identity_ci == 0.0:
            return 0.0 if self.identity_residual == 0.0 else math.inf
        return abs(self.identity_residual) / self.identity_ci

    def to_json(self, **kwargs) -> str:
        payload = {
            "lhs_mse": self.lhs_mse,
            "lhs_ci": self.lhs_ci,
            "truncation_term": self.truncation_term,
            "truncation_ci": self.truncation_ci,
            "second_order_term": self.second_order_term,
            "second_order_ci": self.second_order_ci,
            "bar_residual": self.bar_residual,
            "bar_ci": self.bar_ci,
            "identity_residual": self.identity_residual,
            "identity_ci": self.identity_ci,
            "identity_ci_units": self.identity_ci_units,
            "n_states": self.n_states,
            "meta": self.meta,
        }
        return json.dumps(payload, **kwargs)


def stein_decomposition(
    params: ModelParams,
    sim_config: SimConfig,
    n: int,
    cfg: IntegratorConfig | None = None,
    budget: int = 200,
) -> SteinReport:
    """Estimate the mean-square error and its generator decomposition.

    Every term is averaged over the same inspection-time sample, so the
    identity lhs = truncation + second_order holds per draw up to G_M g
    (zero in expectation) and the comparison is maximally correlated.
    """
    cfg = cfg or _STEIN_CFG
    lam, M = params.lam, params.M
    star_ext = equilibrium(lam, n + 1)
    star = star_ext[:n]
    states = sample_stationary_states(params, sim_config, budget=budget)
    if len(states) < 4:
        raise RuntimeError(
            f"only {len(states)} stationary snapshots; widen the horizon or budget"
        )
    cache = GCache()
    count = len(states)
    lhs = np.empty(count)
    trunc = np.empty(count)
    second = np.empty(count)
    bar = np.empty(count)
    for i, occ in enumerate(states):
        tails = occ.tail_counts()
        key = _truncated_key(tails[1:], n)
        x = _key_to_shifted(key, M, star)
        lhs[i] = float((x * x).sum())
        s_next = tails[n + 1] / M if tails.size > n + 1 else 0.0
        ge = _cached_value(cache, key, M, star, lam, cfg)
        span = 1.5 * ge.settle_time + 10.0
        grad_n = _cached_gradient(cache, key, n - 1, M, star, lam, cfg, span)
        trunc[i] = -grad_n * (s_next - star_ext[n])
        acc_second = 0.0
        acc_bar = 0.0
        for rate, nbr in generator_neighbors(_full_tail(occ), params):
            nk = _truncated_key(np.rint(nbr.s * M).astype(np.int64), n)
            if nk == key:
                continue
            diff = np.subtract(nk, key)
            coord = int(np.nonzero(diff)[0][0])
            step = diff[coord] / M
            gy = _cached_value(cache, nk, M, star, lam, cfg).value
            grad_k = _cached_gradient(cache, key, coord, M, star, lam, cfg, span)
            acc_bar += rate * (gy - ge.value)
            acc_second -= rate * (gy - ge.value - grad_k * step)
        second[i] = acc_second
        bar[i] = acc_bar

    B = sim_config.batches
    lhs_m, lhs_c = _batch_ci(lhs, B)
    tr_m, tr_c = _batch_ci(trunc, B)
    so_m, so_c = _batch_ci(second, B)
    bar_m, bar_c = _batch_ci(bar, B)
    id_m, id_c = _batch_ci(lhs - trunc - second, B)
    return SteinReport(
        lhs_mse=lhs_m,
        lhs_ci=lhs_c,
        truncation_term=tr_m,
        truncation_ci=tr_c,
        second_order_term=so_m,
        second_order_ci=so_c,
        bar_residual=bar_m,
        bar_ci=bar_c,
        identity_residual=id_m,
        identity_ci=id_c,
        n_states=count,
        meta={
            "lam": lam,
            "M": M,
            "d": params.d,
            "n": n,
            "budget": budget,
            "seed": sim_config.seed,
            "cache_entries": len(cache),
            "cache_hits": cache.hits,
            "cache_misses": cache.misses,
        },
    )
