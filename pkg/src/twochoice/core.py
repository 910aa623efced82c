"""Model parameters, state encodings, and the mean-field equilibrium.

The system is a bank of M exponential servers fed by a Poisson stream of
rate lam*M.  Each arrival samples d servers uniformly with replacement and
joins the shortest sampled queue.  States are tracked as tail fractions
s_k = fraction of servers holding at least k jobs, which is the coordinate
system the mean-field dynamics live in.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ModelParams",
    "OccupancyState",
    "TailState",
    "ShiftedState",
    "equilibrium",
    "to_tail",
    "shift",
    "unshift",
]

# tail entries are validated up to this slack; covers float round-off from
# integrators without letting real violations through
_VALIDATION_SLACK = 1e-9


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0, 1), got {lam!r}")
    return lam


@dataclass(frozen=True)
class ModelParams:
    """Finite-system parameters.

    lam: per-server arrival rate, subcritical (0 < lam < 1).
    M:   number of servers.
    d:   choices sampled per arrival (with replacement); d=2 is the headline
         model, d=1 degenerates to independent M/M/1 queues.
    mu:  service rate; the model is normalized to mu=1 and other values are
         rejected rather than silently rescaled.
    """

    lam: float
    M: int
    d: int = 2
    mu: float = 1.0

    def __post_init__(self) -> None:
        _check_lambda(self.lam)
        if int(self.M) != self.M or self.M < 1:
            raise ValueError(f"M must be a positive integer, got {self.M!r}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d!r}")
        if self.mu != 1.0:
            raise ValueError("model is normalized to unit service rate (mu=1.0)")
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "d", int(self.d))


def equilibrium(lam: float, n: int) -> np.ndarray:
    """Equilibrium tail fractions lam**(2**k - 1) for levels k = 1..n.

    Evaluated in log space as exp((2**k - 1) * ln lam) so that deep levels
    underflow to exact 0.0 instead of subnormal noise.
    """
    lam = _check_lambda(lam)
    n = int(n)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    k = np.arange(1, n + 1, dtype=np.float64)
    exponents = np.exp2(k) - 1.0
    s = np.exp(exponents * np.log(lam))
    s[s < np.finfo(np.float64).tiny] = 0.0
    return s


@dataclass(frozen=True)
class OccupancyState:
    """Exact finite-M state: counts[k] = number of servers holding exactly k jobs."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size == 0:
            raise ValueError("counts must be a non-empty 1-d integer array")
        if (counts < 0).any():
            raise ValueError("counts must be nonnegative")
        counts = counts.copy()
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def empty(cls, M: int) -> "OccupancyState":
        counts = np.zeros(1, dtype=np.int64)
        counts[0] = M
        return cls(counts)

    @classmethod
    def from_dict(cls, occupancy: dict[int, int]) -> "OccupancyState":
        if not occupancy:
            raise ValueError("occupancy dict must not be empty")
        top = max(occupancy)
        counts = np.zeros(top + 1, dtype=np.int64)
        for level, count in occupancy.items():
            if level < 0:
                raise ValueError(f"queue length must be >= 0, got {level}")
            counts[level] = count
        return cls(counts)

    @property
    def M(self) -> int:
        return int(self.counts.sum())

    @property
    def max_level(self) -> int:
        nonzero = np.nonzero(self.counts)[0]
        return int(nonzero[-1]) if nonzero.size else 0

    def tail_counts(self) -> np.ndarray:
        """T_k = number of servers with at least k jobs, k = 0..max_level."""
        rev = self.counts[::-1].cumsum()[::-1]
        return rev.astype(np.int64)


@dataclass(frozen=True)
class TailState:
    """Tail-fraction vector (s_1, ..., s_n); s_0 = 1 is implicit.

    Valid states are monotone: 1 >= s_1 >= ... >= s_n >= 0.
    """

    s: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.s, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("tail vector must be a non-empty 1-d array")
        if s[0] > 1.0 + _VALIDATION_SLACK or s[-1] < -_VALIDATION_SLACK:
            raise ValueError("tail entries must lie in [0, 1]")
        if (np.diff(s) > _VALIDATION_SLACK).any():
            raise ValueError("tail vector must be nonincreasing")
        s = s.copy()
        s.setflags(write=False)
        object.__setattr__(self, "s", s)

    @property
    def n(self) -> int:
        return self.s.size

    def is_quantized(self, M: int, tol: float = 1e-9) -> bool:
        """Whether every entry is an integer multiple of 1/M (a finite-M state)."""
        scaled = self.s * M
        return bool(np.abs(scaled - np.rint(scaled)).max() <= tol * max(M, 1))


@dataclass(frozen=True)
class ShiftedState:
    """Deviation vector x = s - s*(lam) around the equilibrium tail."""

    x: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 1 or x.size == 0:
            raise ValueError("shifted vector must be a non-empty 1-d array")
        x = x.copy()
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.x.size

    def in_box(self, lam: float, tol: float = 0.0) -> bool:
        """Componentwise -s*_k - tol <= x_k <= 1 - s*_k + tol."""
        star = equilibrium(lam, self.n)
        return bool(
            (self.x >= -star - tol).all() and (self.x <= 1.0 - star + tol).all()
        )


def to_tail(occ: OccupancyState, M: int, n: int) -> TailState:
    """Tail fractions s_k = (1/M) * #servers with >= k jobs, k = 1..n."""
    if M != occ.M:
        raise ValueError(f"M={M} does not match counts summing to {occ.M}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    tails = occ.tail_counts()
    s = np.zeros(n, dtype=np.float64)
    upto = min(n, tails.size - 1)
    if upto >= 1:
        s[:upto] = tails[1 : upto + 1] / M
    return TailState(s)


def shift(tail: TailState, lam: float) -> ShiftedState:
    """Recenter a tail state around the mean-field equilibrium."""
    star = equilibrium(lam, tail.n)
    return ShiftedState(tail.s - star)


def unshift(state: ShiftedState, lam: float) -> TailState:
    """Inverse of shift; raises if the result is not a valid tail state."""
    star = equilibrium(lam, state.n)
    return TailState(state.x + star)
