"""Weighted-l1 decay certificates for the truncated mean-field flow.

A certificate is a weight ladder w_1..w_n (geometric ramp up to a pivot
level, then a linear extension) together with a rate delta such that
V(t) = sum_k w_k |x_k(t)| contracts like V(0) * exp(-delta * t).  The
"tilde" variant certifies the linearized (sensitivity) flow after a
threshold time t_tilde with its own pivot, weights, and rate.

Certificates here are *checked*, not assumed: the constructor evaluates
the sufficient per-level inequalities that make the contraction argument
close, and flags the (lambda, n) pair as outside the certified regime if
any fails.  verify_decay measures the contraction on an actual trajectory
regardless of the flag.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import _check_lambda, equilibrium

__all__ = [
    "LyapunovCert",
    "DecayReport",
    "k_lambda",
    "k_tilde",
    "base_weights",
    "tilde_weights",
    "verify_decay",
]

_MAX_PIVOT = 64


def _tail_value(lam: float, k: int) -> float:
    """lam**(2**k - 1) with the same log-space evaluation as equilibrium()."""
    return float(equilibrium(lam, k)[-1])


def _smallest_level(k: int, holds, err: str) -> int:
    while not holds(k):
        k += 1
        if k > _MAX_PIVOT:
            raise ValueError(err)
    while k > 1 and holds(k - 1):
        k -= 1
    return k


def k_lambda(lam: float) -> int:
    """Pivot level for the base certificate.

    Smallest k >= 1 with lam * (2 * lam**(2**k - 1) + 1) <= sqrt(lam);
    the closed form ceil(log2(ln((1-sqrt(lam))/(2 sqrt(lam)))/ln(lam) + 1))
    is clamped below at 1 (its argument drops under 1 for small lam) and
    the result nudged in either direction if float rounding moved the
    ceiling off the defining inequality's true threshold.
    """
    lam = _check_lambda(lam)
    root = math.sqrt(lam)
    arg = math.log((1.0 - root) / (2.0 * root)) / math.log(lam) + 1.0
    k = 1 if arg <= 1.0 else max(1, math.ceil(math.log2(arg)))

    def holds(j: int) -> bool:
        return lam * (2.0 * _tail_value(lam, j) + 1.0) <= root

    return _smallest_level(k, holds, f"no pivot level found for lambda={lam}")


def k_tilde(lam: float) -> int:
    """Pivot level for the tilde certificate.

    Smallest k >= 1 with lam**(2**k - 1) <= 1/8, via
    ceil(log2(ln 8 / ln(1/lam) + 1)) with the same rounding guard.
    """
    lam = _check_lambda(lam)
    arg = math.log(8.0) / math.log(1.0 / lam) + 1.0
    k = 1 if arg <= 1.0 else max(1, math.ceil(math.log2(arg)))
    log_lam = math.log(lam)
    threshold = 3.0 * math.log(0.5)

    # compare in log space: exp() would smear the exact-tie cases
    def holds(j: int) -> bool:
        return (2**j - 1) * log_lam <= threshold

    return _smallest_level(k, holds, f"no tilde pivot found for lambda={lam}")


def _weight_ladder(pivot: int, n: int, ratio_base: float) -> np.ndarray:
    """w_0 = 0, w_1 = 1, geometric ramp through the pivot, linear beyond."""
    w = np.zeros(n + 1)
    w[1] = 1.0
    r = 1.0 / ratio_base
    for k in range(2, min(pivot, n) + 1):
        w[k] = 1.0 + np.sum(r ** np.arange(k)) / pivot
    for k in range(pivot + 1, n + 1):
        w[k] = (1.0 + (k - pivot) / n) * w[pivot]
    return w


@dataclass(frozen=True)
class LyapunovCert:
    """Decay certificate for one (lambda, n) pair.

    variant "base" certifies the nonlinear shifted flow with (weights,
    delta); variant "tilde" additionally carries (weights_tilde,
    delta_tilde) for the linearized flow and the threshold time t_tilde
    (expressed with the base rate).  `certified` records whether the
    sufficient inequalities behind the construction all hold; `cases`
    keeps the per-inequality results.
    """

    variant: str
    lam: float
    n: int
    k_lambda: int
    weights: np.ndarray  # indices 0..n, weights[0] == 0
    delta: float
    certified: bool
    cases: dict = field(default_factory=dict)
    k_tilde: int | None = None
    weights_tilde: np.ndarray | None = None
    delta_tilde: float | None = None
    t_tilde: float | None = None

    @property
    def active_weights(self) -> np.ndarray:
        return self.weights_tilde if self.variant == "tilde" else self.weights

    @property
    def active_delta(self) -> float:
        return self.delta_tilde if self.variant == "tilde" else self.delta


def _base_cases(lam: float, n: int, pivot: int, w: np.ndarray, delta: float) -> dict:
    m = max(1.0, 4.0 * lam)
    return {
        "ramp": all(bool(delta * w[k] * pivot * m**k <= lam) for k in range(1, pivot)),
        "extension": all(bool(w[k] <= 4.0 * w[pivot]) for k in range(pivot + 1, n + 1)),
        "junction": bool(
            math.sqrt(lam) * w[pivot]
            <= n / (pivot * m ** (pivot - 1)) - delta * w[pivot] * n
        ),
        "size": n >= 4 * pivot,
    }


def _tilde_cases(lam: float, n: int, pivot: int, w: np.ndarray, delta_t: float) -> dict:
    m = max(1.0, 5.0 * lam)
    return {
        "ramp": all(bool(delta_t * w[k] * pivot * m**k <= lam) for k in range(1, pivot)),
        "extension": all(bool(w[k] <= 4.0 * w[pivot]) for k in range(pivot + 1, n + 1)),
        "junction": bool(
            (lam / 2.0 + (2.0 - lam) / 8.0) * w[pivot] <= n / (pivot * m ** (pivot - 1))
        ),
        "size": n >= 4 * pivot,
    }


def base_weights(lam: float, n: int) -> LyapunovCert:
    """Certificate for the shifted flow: rate delta = (1 - sqrt(lam))/(4n)."""
    lam = _check_lambda(lam)
    n = int(n)
    pivot = k_lambda(lam)
    if n < pivot:
        raise ValueError(f"n={n} is below the pivot level k_lambda={pivot}")
    w = _weight_ladder(pivot, n, max(1.0, 4.0 * lam))
    delta = (1.0 - math.sqrt(lam)) / (4.0 * n)
    cases = _base_cases(lam, n, pivot, w, delta)
    return LyapunovCert(
        variant="base",
        lam=lam,
        n=n,
        k_lambda=pivot,
        weights=w,
        delta=delta,
        certified=all(cases.values()),
        cases=cases,
    )


def tilde_weights(lam: float, n: int) -> LyapunovCert:
    """Certificate for the linearized flow, plus the threshold time.

    delta_tilde = (2 - lam)/(8n); the threshold t_tilde = ln(32 n)/delta
    is expressed with the *base* rate, which is what makes the l1 norm of
    the nonlinear flow provably small (<= 1/8) beyond it.
    """
    lam = _check_lambda(lam)
    n = int(n)
    base = base_weights(lam, n)
    pivot_t = k_tilde(lam)
    if n < pivot_t:
        raise ValueError(f"n={n} is below the tilde pivot level k_tilde={pivot_t}")
    w_t = _weight_ladder(pivot_t, n, max(1.0, 5.0 * lam))
    delta_t = (2.0 - lam) / (8.0 * n)
    t_thresh = math.log(32.0 * n) / base.delta
    cases = {f"base_{k}": v for k, v in base.cases.items()}
    cases.update(_tilde_cases(lam, n, pivot_t, w_t, delta_t))
    return LyapunovCert(
        variant="tilde",
        lam=lam,
        n=n,
        k_lambda=base.k_lambda,
        weights=base.weights,
        delta=base.delta,
        certified=all(cases.values()),
        cases=cases,
        k_tilde=pivot_t,
        weights_tilde=w_t,
        delta_tilde=delta_t,
        t_tilde=t_thresh,
    )


@dataclass(frozen=True)
class DecayReport:
    """Outcome of checking one trajectory against one certificate."""

    max_ratio: float
    empirical_rate: float | None
    certified_rate: float
    grid_points: int
    grid_points_used: int
    passed: bool
    tolerance: float
    t_start: float
    t_end: float
    start_value: float

    def to_json(self) -> str:
        payload = {
            "max_ratio": self.max_ratio,
            "empirical_rate": self.empirical_rate,
            "certified_rate": self.certified_rate,
            "grid_points": self.grid_points,
            "grid_points_used": self.grid_points_used,
            "passed": self.passed,
            "tolerance": self.tolerance,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "start_value": self.start_value,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def verify_decay(
    traj,
    cert: LyapunovCert,
    t_start: float = 0.0,
    grid_points: int = 400,
    tolerance: float = 1e-6,
) -> DecayReport:
    """Check V(t) <= V(t_start) * exp(-delta (t - t_start)) on a uniform grid.

    max_ratio is the largest V(t) * exp(+delta (t - t_start)) / V(t_start)
    over the grid; the check passes when it stays below 1 + tolerance.
    The inequality is asserted only up to the point where V sinks into
    the integrator's noise floor (the true V keeps decaying there, but
    the computed one plateaus at error level, and the growing exp factor
    would amplify pure noise).  The empirical rate is a least-squares
    slope of ln V over the resolvable portion, None when the start value
    is itself at or below the floor.
    """
    w = cert.active_weights[1:]
    delta = cert.active_delta
    t_end = traj.t_end
    if not 0.0 <= t_start <= t_end:
        raise ValueError(f"t_start={t_start} outside trajectory span [0, {t_end}]")
    ts = np.linspace(t_start, t_end, grid_points)
    values = traj.at(ts)  # (n, grid)
    v = w @ np.abs(values)
    v0 = float(v[0])
    noise = 100.0 * w.sum() * traj.meta.get("abs_tol", 1e-10)
    if v0 <= noise:
        return DecayReport(
            max_ratio=0.0,
            empirical_rate=None,
            certified_rate=delta,
            grid_points=grid_points,
            grid_points_used=0,
            passed=True,
            tolerance=tolerance,
            t_start=float(t_start),
            t_end=float(t_end),
            start_value=v0,
        )
    below = np.nonzero(v <= noise)[0]
    used = int(below[0]) if below.size else grid_points
    used = max(used, 1)
    ratios = v[:used] * np.exp(delta * (ts[:used] - t_start)) / v0
    mask = v[:used] > max(noise, v0 * 1e-12)
    rate = None
    if mask.sum() >= 2:
        slope = np.polyfit(ts[:used][mask], np.log(v[:used][mask]), 1)[0]
        rate = float(-slope)
    max_ratio = float(ratios.max())
    return DecayReport(
        max_ratio=max_ratio,
        empirical_rate=rate,
        certified_rate=delta,
        grid_points=grid_points,
        grid_points_used=used,
        passed=max_ratio <= 1.0 + tolerance,
        tolerance=tolerance,
        t_start=float(t_start),
        t_end=float(t_end),
        start_value=v0,
    )
