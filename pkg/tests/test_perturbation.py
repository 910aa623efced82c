"""Sensitivity flow, envelopes, and the second-order remainder.

Finite-difference oracles: the analytic Jacobian against central
differences of the drift, and the sensitivity block against central
differences of the full nonlinear flow.  The frozen 2x2 Jacobian at the
fixed point for lam = 0.5 is a hand calculation:
    diag  = -2*0.5*(0.5, 0.125) - 1 = (-1.5, -1.125)
    sub   =  2*0.5*0.5           = 0.5
    super =  1
"""
import numpy as np
import pytest

from twochoice.harness import random_shifted_start
from twochoice.lyapunov import base_weights, tilde_weights
from twochoice.meanfield import rhs_shifted
from twochoice.perturbation import (
    SensitivitySetup,
    envelope_l1_integral,
    integrate_sensitivity,
    jacobian,
    remainder,
    remainder_bound_check,
    sensitivity_envelope_check,
)


def fd_jacobian(x, lam, h=1e-6):
    n = x.size
    out = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        out[:, j] = (rhs_shifted(x + e, lam) - rhs_shifted(x - e, lam)) / (2 * h)
    return out


class TestJacobian:
    def test_frozen_two_level_fixed_point(self):
        got = jacobian(np.zeros(2), 0.5)
        assert np.allclose(got, [[-1.5, 1.0], [0.5, -1.125]], rtol=1e-14)

    def test_matches_central_differences(self, rng):
        for lam in (0.3, 0.8):
            for _ in range(10):
                x = random_shifted_start(lam, 7, rng)
                assert np.allclose(
                    jacobian(x, lam), fd_jacobian(x, lam), rtol=0, atol=1e-6
                )

    def test_tridiagonal_structure(self):
        jac = jacobian(np.zeros(5), 0.7)
        mask = np.abs(np.subtract.outer(np.arange(5), np.arange(5))) > 1
        assert (jac[mask] == 0).all()
        assert np.array_equal(np.diag(jac, 1), np.ones(4))


class TestSensitivitySetup:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            SensitivitySetup(x0=np.zeros(3), z=np.zeros(4))

    def test_epsilon_must_be_positive(self):
        with pytest.raises(ValueError):
            SensitivitySetup(x0=np.zeros(3), z=np.ones(3), epsilon=0.0)


@pytest.fixture(scope="module")
def aug():
    x0 = random_shifted_start(0.5, 6, 4)
    z = np.zeros(6)
    z[0] = 1.0
    setup = SensitivitySetup(x0=x0, z=z, epsilon=1e-3)
    return integrate_sensitivity(setup, 0.5, t_span=80.0)


class TestSensitivityFlow:
    def test_initial_blocks(self, aug):
        x0 = random_shifted_start(0.5, 6, 4)
        assert np.allclose(aug.x0_at(0.0).ravel(), x0, atol=1e-13)
        assert aug.x1_at(0.0).ravel()[0] == pytest.approx(1.0, abs=1e-13)
        assert np.array_equal(aug.err_at(0.0), np.zeros(6))

    def test_x1_matches_flow_differences(self):
        # central difference of the nonlinear flow map in direction z
        lam, n, h = 0.5, 6, 1e-5
        x0 = random_shifted_start(lam, n, 4)
        z = np.zeros(n)
        z[0] = 1.0
        aug = integrate_sensitivity(SensitivitySetup(x0, z), lam, t_span=30.0)
        up = integrate_sensitivity(SensitivitySetup(x0 + h * z, z), lam, t_span=30.0)
        dn = integrate_sensitivity(SensitivitySetup(x0 - h * z, z), lam, t_span=30.0)
        for t in (1.0, 5.0, 20.0):
            fd = (up.x0_at(t) - dn.x0_at(t)) / (2 * h)
            x1 = aug.x1_at(t)
            scale = max(np.abs(x1).max(), 1e-12)
            assert np.abs(fd - x1).max() <= 1e-4 * scale

    def test_sensitivity_is_linear_in_direction(self):
        lam, n = 0.5, 5
        x0 = random_shifted_start(lam, n, 9)
        z = np.zeros(n)
        z[1] = 1.0
        a = integrate_sensitivity(SensitivitySetup(x0, z), lam, t_span=40.0)
        b = integrate_sensitivity(SensitivitySetup(x0, 0.5 * z), lam, t_span=40.0)
        ts = np.linspace(0, 40, 9)
        assert np.allclose(a.x1_at(ts) * 0.5, b.x1_at(ts), atol=1e-8)

    def test_without_epsilon_no_perturbed_block(self):
        setup = SensitivitySetup(np.zeros(4), np.ones(4))
        aug = integrate_sensitivity(setup, 0.5, t_span=10.0)
        assert not aug.has_perturbed
        with pytest.raises(ValueError):
            aug.err_at(1.0)


class TestEnvelope:
    def test_unit_direction_stays_under_envelope(self, aug):
        cert = tilde_weights(0.5, 6)
        report = sensitivity_envelope_check(aug, cert)
        assert report.passed
        assert report.max_excess <= report.tolerance

    def test_oversized_direction_rejected(self):
        setup = SensitivitySetup(np.zeros(4), np.full(4, 0.5))
        aug2 = integrate_sensitivity(setup, 0.5, t_span=5.0)
        with pytest.raises(ValueError):
            sensitivity_envelope_check(aug2, tilde_weights(0.5, 4))

    def test_requires_tilde_variant(self, aug):
        with pytest.raises(ValueError):
            sensitivity_envelope_check(aug, base_weights(0.5, 6))

    def test_frozen_envelope_integral(self):
        # t_tilde + 4/delta_tilde at (0.5, 10)
        got = envelope_l1_integral(tilde_weights(0.5, 10))
        assert got == pytest.approx(787.771191038423 + 4.0 / 0.01875, rel=1e-13)


@pytest.fixture(scope="module")
def runs():
    lam, n = 0.5, 6
    x0 = random_shifted_start(lam, n, 4)
    z = np.zeros(n)
    z[0] = 1.0
    out = {}
    for eps in (1e-2, 1e-3):
        setup = SensitivitySetup(x0, z, epsilon=eps)
        out[eps] = remainder(setup, lam)
    return out


class TestRemainder:
    def test_integral_scales_quadratically(self, runs):
        ratio = runs[1e-2][1] / runs[1e-3][1]
        assert 80.0 <= ratio <= 120.0

    def test_bounds_hold_at_matched_system_size(self, runs):
        cert = tilde_weights(0.5, 6)
        traj, integral = runs[1e-3]
        report = remainder_bound_check(traj, cert, big_m=1000, l1_integral=integral)
        assert report.early_passed
        assert report.late_passed
        assert report.integral_passed

    def test_requires_epsilon(self):
        setup = SensitivitySetup(np.zeros(3), np.ones(3))
        with pytest.raises(ValueError):
            remainder(setup, 0.5)

    def test_check_requires_perturbed_block(self):
        setup = SensitivitySetup(np.zeros(6), np.ones(6))
        aug2 = integrate_sensitivity(setup, 0.5, t_span=5.0)
        with pytest.raises(ValueError):
            remainder_bound_check(aug2, tilde_weights(0.5, 6), big_m=100)

    def test_check_requires_span_past_threshold(self, runs):
        lam, n = 0.5, 6
        x0 = random_shifted_start(lam, n, 4)
        z = np.zeros(n)
        z[0] = 1.0
        short = integrate_sensitivity(
            SensitivitySetup(x0, z, epsilon=1e-3), lam, t_span=10.0
        )
        with pytest.raises(ValueError):
            remainder_bound_check(short, tilde_weights(lam, n), big_m=100)
