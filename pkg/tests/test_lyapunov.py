"""Weighted-l1 decay certificates and the trajectory verifier.

Pivot levels are cross-checked against a brute-force scan of the
defining inequalities written in plain float arithmetic; ladder values,
rates, and thresholds are frozen from a hand calculation:
  delta(0.25, 10)        = (1 - 0.5)/40 = 0.0125
  w(0.25, 10)[1:4]       = 1, 1.1, 1.2  (ratio max(1, 4*0.25) = 1, so the
                           ramp is flat and the linear extension starts
                           right after the pivot k=1)
  delta_tilde(0.5, 10)   = (2 - 0.5)/80 = 0.01875
  t_tilde(0.5, 10)       = ln(320)/delta(0.5, 10) = 787.771191038423
"""
import math

import numpy as np
import pytest

from twochoice.harness import random_shifted_start
from twochoice.lyapunov import (
    base_weights,
    k_lambda,
    k_tilde,
    tilde_weights,
    verify_decay,
)
from twochoice.meanfield import integrate, solve_to_equilibrium


def brute_k_lambda(lam: float) -> int:
    k = 1
    while not lam * (2 * lam ** (2**k - 1) + 1) <= math.sqrt(lam):
        k += 1
    return k


def brute_k_tilde(lam: float) -> int:
    k = 1
    while not (2**k - 1) * math.log(lam) <= math.log(1 / 8):
        k += 1
    return k


class TestPivotLevels:
    def test_frozen_base_pivots(self):
        assert {l: k_lambda(l) for l in (0.25, 0.3, 0.5, 0.7, 0.81, 0.9)} == {
            0.25: 1, 0.3: 1, 0.5: 2, 0.7: 3, 0.81: 4, 0.9: 6,
        }

    def test_frozen_tilde_pivots(self):
        assert {l: k_tilde(l) for l in (0.25, 0.5, 0.7, 0.9)} == {
            0.25: 2, 0.5: 2, 0.7: 3, 0.9: 5,
        }

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_brute_force_scan(self, seed):
        rng = np.random.default_rng(100 + seed)
        for lam in rng.uniform(0.02, 0.98, 50):
            assert k_lambda(lam) == brute_k_lambda(lam)
            assert k_tilde(lam) == brute_k_tilde(lam)

    def test_exact_tie_at_half(self):
        # 0.5**(2**2 - 1) equals 1/8 exactly; the boundary case must count
        assert k_tilde(0.5) == 2


class TestCertificates:
    def test_frozen_ladder_and_rate(self):
        cert = base_weights(0.25, 10)
        assert cert.weights[0] == 0.0
        assert np.allclose(cert.weights[1:4], [1.0, 1.1, 1.2], rtol=1e-14)
        assert cert.delta == pytest.approx(0.0125, rel=1e-15)

    def test_frozen_tilde_quantities(self):
        cert = tilde_weights(0.5, 10)
        assert cert.delta_tilde == pytest.approx(0.01875, rel=1e-15)
        assert cert.t_tilde == pytest.approx(787.771191038423, rel=1e-13)
        cert25 = tilde_weights(0.25, 10)
        assert cert25.t_tilde == pytest.approx(461.46567966350176, rel=1e-13)

    def test_weights_start_at_one_and_grow(self):
        for lam, n in [(0.3, 10), (0.7, 40), (0.9, 25)]:
            cert = base_weights(lam, n)
            w = cert.weights
            assert w[0] == 0.0 and w[1] == 1.0
            assert (np.diff(w[1:]) >= -1e-12).all()

    def test_certified_pairs_frozen(self):
        certified = {
            (l, n): base_weights(l, n).certified
            for l in (0.3, 0.5, 0.7, 0.9)
            for n in (10, 20, 40)
        }
        assert certified == {
            (0.3, 10): True, (0.3, 20): True, (0.3, 40): True,
            (0.5, 10): True, (0.5, 20): True, (0.5, 40): True,
            (0.7, 10): False, (0.7, 20): False, (0.7, 40): True,
            (0.9, 10): False, (0.9, 20): False, (0.9, 40): False,
        }

    def test_failing_cases_are_named(self):
        cases = base_weights(0.7, 10).cases
        assert cases["junction"] is False and cases["size"] is False
        assert cases["ramp"] is True and cases["extension"] is True
        assert base_weights(0.7, 20).cases["junction"] is False

    def test_tilde_collects_both_case_families(self):
        cert = tilde_weights(0.5, 12)
        assert {"ramp", "junction", "size", "base_ramp", "base_junction"} <= set(
            cert.cases
        )
        assert cert.certified

    def test_rejects_truncation_below_pivot(self):
        with pytest.raises(ValueError):
            base_weights(0.9, 4)  # pivot is 6


@pytest.fixture(scope="module")
def settled():
    x0 = random_shifted_start(0.5, 10, 5)
    traj, _ = solve_to_equilibrium(x0, 0.5)
    return traj


class TestVerifyDecay:
    def test_certified_envelope_holds(self, settled):
        report = verify_decay(settled, base_weights(0.5, 10))
        assert report.passed
        assert report.max_ratio <= 1 + 1e-6
        assert report.empirical_rate >= report.certified_rate

    def test_weighted_norm_sandwiches_l1(self, settled):
        cert = base_weights(0.5, 10)
        w = cert.weights[1:]
        ts = np.linspace(0, settled.t_end, 50)
        l1 = np.abs(settled.at(ts)).sum(axis=0)
        v = w @ np.abs(settled.at(ts))
        assert (v >= l1 * (1 - 1e-12)).all()
        assert (v <= w.max() * l1 * (1 + 1e-12)).all()

    def test_impossible_rate_fails(self, settled):
        cert = base_weights(0.5, 10)
        fake = type(cert)(
            variant="base",
            lam=cert.lam,
            n=cert.n,
            k_lambda=cert.k_lambda,
            weights=cert.weights,
            delta=50.0 * cert.delta,
            certified=False,
            cases=dict(cert.cases),
        )
        report = verify_decay(settled, fake)
        assert not report.passed
        assert report.max_ratio > 1 + 1e-6

    def test_noise_floor_truncates_grid(self, settled):
        report = verify_decay(settled, base_weights(0.5, 10))
        assert 0 < report.grid_points_used <= report.grid_points

    def test_start_inside_noise_floor_passes_vacuously(self):
        traj, _ = solve_to_equilibrium(np.zeros(6), 0.5)
        report = verify_decay(traj, base_weights(0.5, 6))
        assert report.passed and report.grid_points_used == 0

    def test_rejects_bad_start_time(self, settled):
        with pytest.raises(ValueError):
            verify_decay(settled, base_weights(0.5, 10), t_start=settled.t_end + 1)

    def test_report_serializes(self, settled):
        import json

        report = verify_decay(settled, base_weights(0.5, 10))
        payload = json.loads(report.to_json())
        assert payload["passed"] is True
        assert payload["certified_rate"] == pytest.approx(report.certified_rate)


class TestThresholdTime:
    @pytest.mark.parametrize("lam,n", [(0.3, 10), (0.5, 20), (0.7, 40)])
    def test_l1_small_beyond_threshold(self, lam, n):
        # by construction the l1 norm from any valid start is <= 1/8
        # once t passes t_tilde; check from a worst-case-ish random start
        cert = tilde_weights(lam, n)
        x0 = random_shifted_start(lam, n, 2)
        traj = integrate(x0, lam, t_max=cert.t_tilde * 1.01)
        assert np.abs(traj.at(cert.t_tilde)).sum() <= 1.0 / 8.0
