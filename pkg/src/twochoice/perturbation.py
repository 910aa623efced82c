"""First-order sensitivity flow and its Taylor remainder.

Perturb the shifted flow's initial condition by eps*z.  The solution
splits as x(t, eps) = x0(t) + eps*x1(t) + e(t), where x1 solves the
variational (linearized) system along x0 and the remainder e is second
order in eps.  This module co-integrates the three pieces in one
augmented system so the subtraction defining e(t) cancels shared
integration error, and provides the checks used on them: an l1 envelope
for x1, an early-time sup bound and a late-time decaying envelope for e,
and the quadrature of |e(t)|_1 used in integral-bound comparisons.

Late-time checks carry an explicit solver-noise allowance: past the
mixing time both x1 and e sit at the integrator's error floor, so
envelope inequalities are asserted up to that floor rather than exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import _check_lambda, equilibrium
from .lyapunov import LyapunovCert
from .meanfield import (
    IntegratorConfig,
    Trajectory,
    _as_vector,
    _require_valid_start,
    _run_solver,
    _shifted_field,
    _traj_meta,
)

__all__ = [
    "SensitivitySetup",
    "AugmentedTrajectory",
    "EnvelopeReport",
    "RemainderReport",
    "jacobian",
    "integrate_sensitivity",
    "sensitivity_envelope_check",
    "envelope_l1_integral",
    "remainder",
    "remainder_bound_check",
]

# e(t) is O(eps^2) and computed by cancellation, so the shared tolerances
# are tightened well past the plain-integration defaults
_SENS_CFG = IntegratorConfig(rel_tol=1e-11, abs_tol=1e-13)


def jacobian(x, lam: float) -> np.ndarray:
    """Jacobian of the shifted RHS at x: tridiagonal, returned dense.

    Row k has subdiagonal 2*lam*(x_{k-1} + s*_{k-1}), diagonal
    -2*lam*(x_k + s*_k) - 1, and superdiagonal +1 (absent at k = n).
    """
    lam = _check_lambda(lam)
    xv = _as_vector(x)
    n = xv.size
    a = 2.0 * lam * (xv + equilibrium(lam, n))
    jac = np.diag(-(a + 1.0))
    if n > 1:
        jac += np.diag(a[:-1], -1) + np.diag(np.ones(n - 1), 1)
    return jac


@dataclass(frozen=True)
class SensitivitySetup:
    """Initial data for a sensitivity run.

    x0 is the nominal shifted initial condition, z the perturbation
    direction (x1(0) = z).  When epsilon is set, the perturbed solution
    from x0 + epsilon*z is co-integrated and the remainder becomes
    available.  CTMC-derived directions have |z|_1 in {0, 1}; arbitrary
    directions are allowed.
    """

    x0: np.ndarray
    z: np.ndarray
    epsilon: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "x0", _as_vector(self.x0))
        object.__setattr__(self, "z", np.asarray(self.z, dtype=np.float64).copy())
        if self.z.shape != self.x0.shape:
            raise ValueError(
                f"direction shape {self.z.shape} != state shape {self.x0.shape}"
            )
        if self.epsilon is not None and not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def n(self) -> int:
        return self.x0.size


@dataclass(frozen=True)
class AugmentedTrajectory:
    """Jointly integrated (x0, x1[, perturbed]) solution.

    The dense interpolant covers the stacked system; accessors slice out
    the blocks.  err_at reconstructs e(t) = perturbed - x0 - eps*x1 and
    returns exact zeros at t = 0.
    """

    times: np.ndarray
    states: np.ndarray  # (len(times), blocks*n)
    dense: object
    n: int
    epsilon: float | None
    meta: dict = field(default_factory=dict)

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    @property
    def has_perturbed(self) -> bool:
        return self.epsilon is not None

    def x0_at(self, t) -> np.ndarray:
        return self.dense(t)[: self.n]

    def x1_at(self, t) -> np.ndarray:
        return self.dense(t)[self.n : 2 * self.n]

    def perturbed_at(self, t) -> np.ndarray:
        if not self.has_perturbed:
            raise ValueError("trajectory was integrated without a perturbed block")
        return self.dense(t)[2 * self.n :]

    def err_at(self, t) -> np.ndarray:
        """Remainder e(t); exactly zero at t = 0 by definition."""
        if not self.has_perturbed:
            raise ValueError("trajectory was integrated without a perturbed block")
        if np.ndim(t) == 0:
            if float(t) == 0.0:
                return np.zeros(self.n)
            vals = self.dense(t)
            return vals[2 * self.n :] - vals[: self.n] - self.epsilon * vals[self.n : 2 * self.n]
        vals = self.dense(t)
        e = vals[2 * self.n :] - vals[: self.n] - self.epsilon * vals[self.n : 2 * self.n]
        e[:, np.asarray(t) == 0.0] = 0.0
        return e

    def _block_trajectory(self, lo: int, hi: int, cols) -> Trajectory:
        def dense(t):
            return self.dense(t)[lo:hi]

        return Trajectory(self.times.copy(), self.states[:, cols], dense, dict(self.meta))

    def base_trajectory(self) -> Trajectory:
        return self._block_trajectory(0, self.n, slice(0, self.n))

    def sensitivity_trajectory(self) -> Trajectory:
        return self._block_trajectory(self.n, 2 * self.n, slice(self.n, 2 * self.n))


def _default_span(lam: float, n: int) -> float:
    # 1.25x the threshold time ln(32n)/delta: covers the early regime,
    # the junction, and a stretch of the late envelope
    delta = (1.0 - math.sqrt(lam)) / (4.0 * n)
    return 1.25 * math.log(32.0 * n) / delta


def integrate_sensitivity(
    setup: SensitivitySetup,
    lam: float,
    cfg: IntegratorConfig | None = None,
    t_span: float | None = None,
) -> AugmentedTrajectory:
    """Integrate the augmented system (x0, x1[, x0 + eps*z perturbed]).

    x1 obeys the variational equation dx1/dt = J(x0(t)) x1 with
    x1(0) = z, evaluated matrix-free alongside the base flow.
    """
    lam = _check_lambda(lam)
    cfg = cfg or _SENS_CFG
    n = setup.n
    _require_valid_start(setup.x0, lam)
    base = _shifted_field(lam, n)
    star = equilibrium(lam, n)
    with_perturbed = setup.epsilon is not None
    if with_perturbed:
        _require_valid_start(setup.x0 + setup.epsilon * setup.z, lam)
    if t_span is None:
        t_span = cfg.t_max if cfg.t_max is not None else _default_span(lam, n)

    def field_fn(t, y):
        x = y[:n]
        v = y[n : 2 * n]
        a = 2.0 * lam * (x + star)
        jv = -(a + 1.0) * v
        jv[1:] += a[:-1] * v[:-1]
        jv[:-1] += v[1:]
        if with_perturbed:
            return np.concatenate([base(t, x), jv, base(t, y[2 * n :])])
        return np.concatenate([base(t, x), jv])

    y0 = np.concatenate(
        [setup.x0, setup.z, setup.x0 + setup.epsilon * setup.z]
        if with_perturbed
        else [setup.x0, setup.z]
    )
    sol = _run_solver(field_fn, y0, (0.0, float(t_span)), cfg)
    meta = _traj_meta(sol, cfg, lam)
    return AugmentedTrajectory(
        times=sol.t.copy(),
        states=sol.y.T.copy(),
        dense=sol.sol,
        n=n,
        epsilon=setup.epsilon,
        meta=meta,
    )


def envelope_l1_integral(cert: LyapunovCert) -> float:
    """Integral of the sensitivity envelope: t_tilde + 4/delta_tilde.

    Bounds int_0^inf |x1(t)|_1 dt for unit directions, which is what
    caps the flow's partial derivatives in aggregate.
    """
    if cert.variant != "tilde":
        raise ValueError("envelope integral needs a tilde-variant certificate")
    return cert.t_tilde + 4.0 / cert.delta_tilde


@dataclass(frozen=True)
class EnvelopeReport:
    """Grid check of |x1(t)|_1 against 1 (early) and 4 exp(-delta_tilde (t - t_tilde)) (late)."""

    max_excess: float
    passed: bool
    t_tilde: float
    delta_tilde: float
    envelope_integral: float
    grid_points: int
    tolerance: float


def sensitivity_envelope_check(
    traj: AugmentedTrajectory,
    cert: LyapunovCert,
    grid_points: int = 400,
    tolerance: float = 1e-6,
) -> EnvelopeReport:
    """Verify |x1(t)|_1 <= min(1, 4 exp(-delta_tilde (t - t_tilde))).

    Requires a unit-or-smaller starting direction; unit coordinate
    directions realize the flow's partial derivatives, so the same check
    covers those.
    """
    if cert.variant != "tilde":
        raise ValueError("envelope check needs a tilde-variant certificate")
    z_norm = float(np.abs(traj.x1_at(0.0)).sum())
    if z_norm > 1.0 + 1e-12:
        raise ValueError(f"|z|_1 = {z_norm} exceeds 1; envelope does not apply")
    ts = np.linspace(0.0, traj.t_end, grid_points)
    v1 = np.abs(traj.x1_at(ts)).sum(axis=0)
    env = np.minimum(1.0, 4.0 * np.exp(-cert.delta_tilde * (ts - cert.t_tilde)))
    max_excess = float((v1 - env).max())
    return EnvelopeReport(
        max_excess=max_excess,
        passed=max_excess <= tolerance,
        t_tilde=cert.t_tilde,
        delta_tilde=cert.delta_tilde,
        envelope_integral=envelope_l1_integral(cert),
        grid_points=grid_points,
        tolerance=tolerance,
    )


def _adaptive_simpson(f, a: float, b: float, tol: float, max_depth: int = 40) -> float:
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    return _simpson_step(f, a, b, fa, fm, fb, whole, tol, max_depth)


def _panel_quadrature(f, knots: np.ndarray, tol: float) -> float:
    """Adaptive Simpson applied per panel between consecutive knots.

    A single adaptive pass over a long span can step right over a feature
    much narrower than the span; seeding panels from the solver's own
    checkpoints guarantees the initial sampling resolves everything the
    solver resolved.  tol is the total budget, split by panel width.
    """
    knots = np.asarray(knots, dtype=np.float64)
    widths = np.diff(knots)
    total = float(widths.sum())
    if total <= 0.0:
        return 0.0
    out = 0.0
    for a, b, w in zip(knots[:-1], knots[1:], widths):
        if w > 0.0:
            out += _adaptive_simpson(f, float(a), float(b), tol * (w / total))
    return out


def _simpson_step(f, a, b, fa, fm, fb, whole, tol, depth):
    m = 0.5 * (a + b)
    flm, frm = f(0.5 * (a + m)), f(0.5 * (m + b))
    left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
    right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
    err = left + right - whole
    if depth <= 0 or abs(err) <= 15.0 * tol:
        return left + right + err / 15.0
    return _simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + _simpson_step(
        f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1
    )


def _fitted_tail(traj: AugmentedTrajectory, t_end: float) -> float:
    """Bound on int_{t_end}^inf |e|_1 dt from the fitted terminal decay rate."""
    ts = np.linspace(0.75 * t_end, t_end, 64)
    v = np.abs(traj.err_at(ts)).sum(axis=0)
    v_end = float(v[-1])
    if v_end == 0.0:
        return 0.0
    fallback = (2.0 - traj.meta["lam"]) / (8.0 * traj.n)
    mask = v > 0.0
    rate = fallback
    if mask.sum() >= 2:
        slope = np.polyfit(ts[mask], np.log(v[mask]), 1)[0]
        if slope < 0.0:
            rate = max(-float(slope), fallback)
    return v_end / rate


def remainder(
    setup: SensitivitySetup,
    lam: float,
    cfg: IntegratorConfig | None = None,
    t_span: float | None = None,
) -> tuple[AugmentedTrajectory, float]:
    """Co-integrate the remainder and return (trajectory, int |e(t)|_1 dt).

    The quadrature is adaptive Simpson run panel-by-panel between the
    solver's accepted steps (so narrow features cannot be skipped), plus
    a fitted exponential-tail bound for the part past the span.
    """
    if setup.epsilon is None:
        raise ValueError("remainder needs a setup with epsilon set")
    traj = integrate_sensitivity(setup, lam, cfg=cfg, t_span=t_span)

    def integrand(t: float) -> float:
        return float(np.abs(traj.err_at(t)).sum())

    t_end = traj.t_end
    integral = _panel_quadrature(integrand, traj.times, tol=1e-14 * t_end)
    return traj, float(integral + _fitted_tail(traj, t_end))


@dataclass(frozen=True)
class RemainderReport:
    """Remainder checks against a tilde certificate at perturbation 1/M.

    early: sup_{t <= t_tilde} |e|_1 against 2 t_tilde / M^2.  late: |e|_1
    against 4|e(t_tilde)|_1 exp(-delta_tilde (t - t_tilde)) plus the
    accumulated forcing 128 lam eps^2 exp(-delta_tilde (t + t_tilde))
    (1 - exp(-delta_tilde (t - t_tilde)))/delta_tilde, with the late
    envelope's rate taken as delta_tilde for both terms.  integral:
    the quadrature against 2 t_tilde^2/M^2 + 8 t_tilde/(delta_tilde M^2)
    + 128 lam eps^2/delta_tilde^2.  Late comparisons allow noise_floor,
    the integrator's error scale, since past mixing e(t) is pure solver
    noise.
    """

    sup_early: float
    early_bound: float
    early_passed: bool
    late_max_excess: float
    late_passed: bool
    l1_integral: float | None
    integral_bound: float
    integral_passed: bool | None
    noise_floor: float
    t_tilde: float
    delta_tilde: float
    epsilon: float
    big_m: int
    grid_points: int


def remainder_bound_check(
    traj: AugmentedTrajectory,
    cert: LyapunovCert,
    big_m: int,
    l1_integral: float | None = None,
    grid_points: int = 600,
) -> RemainderReport:
    if cert.variant != "tilde":
        raise ValueError("remainder check needs a tilde-variant certificate")
    if not traj.has_perturbed:
        raise ValueError("trajectory carries no remainder block")
    t_tilde, delta_t = cert.t_tilde, cert.delta_tilde
    if traj.t_end < t_tilde:
        raise ValueError(f"trajectory ends at {traj.t_end}, before t_tilde={t_tilde}")
    eps = traj.epsilon
    lam = traj.meta["lam"]
    noise_floor = 100.0 * traj.n * traj.meta.get("abs_tol", _SENS_CFG.abs_tol)

    ts_early = np.linspace(0.0, t_tilde, grid_points)
    sup_early = float(np.abs(traj.err_at(ts_early)).sum(axis=0).max())
    early_bound = 2.0 * t_tilde / big_m**2

    ts_late = np.linspace(t_tilde, traj.t_end, grid_points)
    v_late = np.abs(traj.err_at(ts_late)).sum(axis=0)
    v_at_tilde = float(np.abs(traj.err_at(t_tilde)).sum())
    decay = np.exp(-delta_t * (ts_late - t_tilde))
    forcing = (
        128.0 * lam * eps**2
        * np.exp(-delta_t * (ts_late + t_tilde))
        * (1.0 - decay) / delta_t
    )
    env = 4.0 * v_at_tilde * decay + forcing
    late_max_excess = float((v_late - env).max())

    integral_bound = (
        2.0 * t_tilde**2 / big_m**2
        + 8.0 * t_tilde / (delta_t * big_m**2)
        + 128.0 * lam * eps**2 / delta_t**2
    )
    return RemainderReport(
        sup_early=sup_early,
        early_bound=early_bound,
        early_passed=sup_early <= early_bound + noise_floor,
        late_max_excess=late_max_excess,
        late_passed=late_max_excess <= noise_floor,
        l1_integral=l1_integral,
        integral_bound=integral_bound,
        integral_passed=None if l1_integral is None else l1_integral <= integral_bound,
        noise_floor=noise_floor,
        t_tilde=t_tilde,
        delta_tilde=delta_t,
        epsilon=eps,
        big_m=big_m,
        grid_points=grid_points,
    )
