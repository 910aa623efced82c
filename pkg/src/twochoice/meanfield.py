"""Truncated mean-field dynamics of the two-choice model.

The infinite tail hierarchy

    ds_k/dt = lam * (s_{k-1}^2 - s_k^2) - (s_k - s_{k+1}),   s_0 = 1,

is closed at level n by pinning the level-(n+1) tail to its equilibrium
value.  The same flow is available recentered around the equilibrium
("shifted" coordinates x = s - s*), which is the form every certificate in
this package works with.  Integration uses an adaptive embedded
Runge-Kutta 4(5) pair with a dense (order-4) interpolant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .core import ShiftedState, TailState, _check_lambda, equilibrium

__all__ = [
    "IntegratorConfig",
    "Trajectory",
    "StiffnessError",
    "ConvergenceTimeout",
    "rhs_truncated",
    "rhs_shifted",
    "integrate",
    "solve_to_equilibrium",
    "default_truncation",
]


class StiffnessError(RuntimeError):
    """Raised when the adaptive integrator underflows its step size."""


class ConvergenceTimeout(RuntimeError):
    """Raised when a trajectory fails to settle within its time cap."""

    def __init__(self, message: str, residual: float, t_end: float):
        super().__init__(message)
        self.residual = residual
        self.t_end = t_end


@dataclass(frozen=True)
class IntegratorConfig:
    """Tolerances and caps shared by every ODE solve in the package."""

    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    t_max: float | None = None
    settle_tol: float = 1e-10

    def __post_init__(self) -> None:
        if self.rel_tol <= 0 or self.abs_tol <= 0 or self.settle_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.t_max is not None and self.t_max <= 0:
            raise ValueError("t_max must be positive when given")


def default_truncation(lam: float, M: int) -> int:
    """Default closure depth ceil(3 ln M / ln(1/lam)) used across the package."""
    lam = _check_lambda(lam)
    if M < 2:
        return 1
    return max(1, math.ceil(3.0 * math.log(M) / math.log(1.0 / lam)))


def _as_vector(x: ShiftedState | TailState | Sequence[float] | np.ndarray) -> np.ndarray:
    if isinstance(x, ShiftedState):
        return np.array(x.x, dtype=np.float64)
    if isinstance(x, TailState):
        return np.array(x.s, dtype=np.float64)
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("state must be a non-empty 1-d vector")
    return arr.copy()


def rhs_truncated(s_t, lam: float) -> np.ndarray:
    """Right-hand side of the level-n closure in tail coordinates.

    Interior levels follow the exact hierarchy; the boundary level n sees
    the equilibrium value of the level-(n+1) tail in its departure term.
    """
    lam = _check_lambda(lam)
    s = np.asarray(s_t.s if isinstance(s_t, TailState) else s_t, dtype=np.float64)
    n = s.size
    star_next = equilibrium(lam, n + 1)[-1]
    s_prev = np.empty(n)
    s_prev[0] = 1.0
    s_prev[1:] = s[:-1]
    s_next = np.empty(n)
    s_next[:-1] = s[1:]
    s_next[-1] = star_next
    return lam * (s_prev**2 - s**2) - (s - s_next)


def rhs_shifted(x, lam: float) -> np.ndarray:
    """Same flow recentered at the equilibrium: the field in x = s - s*.

    Writing u_k = x_k^2 + 2 s*_k x_k (with u_0 = 0), component k is
    lam*(u_{k-1} - u_k) - (x_k - x_{k+1}) and the boundary drops the
    x_{n+1} coupling.  Vanishes identically at x = 0.
    """
    lam = _check_lambda(lam)
    x = np.asarray(x.x if isinstance(x, ShiftedState) else x, dtype=np.float64)
    n = x.size
    star = equilibrium(lam, n)
    u = x * (x + 2.0 * star)
    u_prev = np.empty(n)
    u_prev[0] = 0.0
    u_prev[1:] = u[:-1]
    x_next = np.empty(n)
    x_next[:-1] = x[1:]
    x_next[-1] = 0.0
    return lam * (u_prev - u) - (x - x_next)


def _shifted_field(lam: float, n: int) -> Callable[[float, np.ndarray], np.ndarray]:
    """Closure over precomputed equilibrium; avoids re-deriving s* per call."""
    star = equilibrium(lam, n)
    two_star = 2.0 * star

    def field(t: float, x: np.ndarray) -> np.ndarray:
        u = x * (x + two_star)
        out = np.empty(n)
        out[0] = -lam * u[0]
        out[1:] = lam * (u[:-1] - u[1:])
        out[:-1] -= x[:-1] - x[1:]
        out[-1] -= x[-1]
        return out

    return field


@dataclass(frozen=True)
class Trajectory:
    """Solution of one ODE run: checkpoint states plus a dense interpolant."""

    times: np.ndarray
    states: np.ndarray  # shape (len(times), n)
    dense: object  # callable t -> state vector, vectorized over t
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def at(self, t) -> np.ndarray:
        """Dense-output state; shape (n,) for scalar t, (n, len(t)) otherwise."""
        return self.dense(t)

    def l1(self, t=None) -> np.ndarray | float:
        if t is None:
            return np.abs(self.states).sum(axis=1)
        vals = self.dense(t)
        if np.ndim(t) == 0:
            return float(np.abs(vals).sum())
        return np.abs(vals).sum(axis=0)


def _run_solver(field, y0, t_span, cfg: IntegratorConfig, events=None):
    sol = solve_ivp(
        field,
        t_span,
        y0,
        method="RK45",
        rtol=cfg.rel_tol,
        atol=cfg.abs_tol,
        dense_output=True,
        events=events,
    )
    if sol.status == -1:
        raise StiffnessError(f"integrator failed: {sol.message}")
    return sol


def _traj_meta(sol, cfg: IntegratorConfig, lam: float) -> dict:
    return {
        "lam": lam,
        "rel_tol": cfg.rel_tol,
        "abs_tol": cfg.abs_tol,
        "rhs_evals": int(sol.nfev),
        "steps": int(sol.t.size - 1),
    }


def _require_valid_start(x0: np.ndarray, lam: float) -> None:
    # the comparison-function arguments need a monotone tail behind x0
    TailState(x0 + equilibrium(lam, x0.size))


def _default_t_cap(lam: float, n: int, settle_tol: float) -> float:
    delta = (1.0 - math.sqrt(lam)) / (4.0 * n)
    return (20.0 / delta) * max(1.0, math.log(n / settle_tol))


def integrate(
    x0,
    lam: float,
    cfg: IntegratorConfig | None = None,
    t_max: float | None = None,
) -> Trajectory:
    """Integrate the shifted flow on [0, t_max].

    The initial condition must unshift to a valid monotone tail.  t_max
    falls back to cfg.t_max and then to a conservative settling envelope.
    """
    cfg = cfg or IntegratorConfig()
    lam = _check_lambda(lam)
    x0 = _as_vector(x0)
    _require_valid_start(x0, lam)
    n = x0.size
    if t_max is None:
        t_max = cfg.t_max if cfg.t_max is not None else _default_t_cap(lam, n, cfg.settle_tol)
    sol = _run_solver(_shifted_field(lam, n), x0, (0.0, float(t_max)), cfg)
    return Trajectory(sol.t, sol.y.T, sol.sol, _traj_meta(sol, cfg, lam))


def solve_to_equilibrium(
    x0,
    lam: float,
    cfg: IntegratorConfig | None = None,
) -> tuple[Trajectory, float]:
    """Integrate until the l1 norm first drops below cfg.settle_tol.

    Returns the trajectory up to the settling time.  Raises
    ConvergenceTimeout (carrying the terminal residual) if the norm stays
    above the threshold for the whole time cap.

    The solver's absolute tolerance is capped well below the settle
    threshold for this call: otherwise the numerical solution floors at
    abs_tol-level noise and the crossing is undetectable.
    """
    cfg = cfg or IntegratorConfig()
    lam = _check_lambda(lam)
    x0 = _as_vector(x0)
    _require_valid_start(x0, lam)
    n = x0.size
    if cfg.abs_tol > cfg.settle_tol / (100.0 * n):
        cfg = replace(cfg, abs_tol=cfg.settle_tol / (100.0 * n))
    if float(np.abs(x0).sum()) <= cfg.settle_tol:
        times = np.array([0.0])
        states = x0[np.newaxis, :].copy()

        def dense(t):
            t_arr = np.asarray(t, dtype=np.float64)
            if t_arr.ndim == 0:
                return x0.copy()
            return np.repeat(x0[:, None], t_arr.size, axis=1)

        return Trajectory(times, states, dense, {"lam": lam, "settled": True}), 0.0

    t_cap = cfg.t_max if cfg.t_max is not None else _default_t_cap(lam, n, cfg.settle_tol)

    def settled(t, x):
        return float(np.abs(x).sum()) - cfg.settle_tol

    settled.terminal = True
    settled.direction = -1

    sol = _run_solver(_shifted_field(lam, n), x0, (0.0, float(t_cap)), cfg, events=settled)
    if sol.status != 1:
        residual = float(np.abs(sol.y[:, -1]).sum())
        raise ConvergenceTimeout(
            f"l1 residual {residual:.3e} above settle_tol {cfg.settle_tol:.1e} "
            f"after t={t_cap:.6g}",
            residual=residual,
            t_end=float(t_cap),
        )
    settle_time = float(sol.t_events[0][0])
    return Trajectory(sol.t, sol.y.T, sol.sol, _traj_meta(sol, cfg, lam)), settle_time
