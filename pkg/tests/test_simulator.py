"""Event-level and stationary-law checks for the exact simulator.

Oracles: hand-enumerated transition rates for a four-server state, the
closed-form M/M/1 stationary tail for d = 1 (each queue is independent
with geometric occupancy, P[len >= k] = lam**k), and exact utilization
lam for any d by flow balance.
"""
import numpy as np
import pytest

from twochoice.core import ModelParams, OccupancyState, to_tail
from twochoice.simulator import (
    Event,
    SimConfig,
    apply_event,
    estimate_mse,
    next_event,
    sample_stationary_states,
    simulate,
)


class TestEvent:
    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            Event("service", 1)

    def test_rejects_nonpositive_level(self):
        with pytest.raises(ValueError):
            Event("arrival", 0)


class TestApplyEvent:
    # four servers with queue lengths 0, 1, 1, 2
    state = OccupancyState.from_dict({0: 1, 1: 2, 2: 1})

    def test_arrival_moves_one_server_up(self):
        got = apply_event(self.state, Event("arrival", 1))
        assert list(got.counts) == [0, 3, 1]

    def test_arrival_extends_support(self):
        got = apply_event(self.state, Event("arrival", 3))
        assert list(got.counts) == [1, 2, 0, 1]

    def test_departure_moves_one_server_down(self):
        got = apply_event(self.state, Event("departure", 2))
        assert list(got.counts) == [1, 3, 0]

    def test_infeasible_events_raise(self):
        with pytest.raises(RuntimeError):
            apply_event(self.state, Event("arrival", 4))
        with pytest.raises(RuntimeError):
            apply_event(self.state, Event("departure", 3))

    def test_total_jobs_conserved_up_to_event(self):
        jobs = (self.state.counts * np.arange(3)).sum()
        up = apply_event(self.state, Event("arrival", 2))
        dn = apply_event(self.state, Event("departure", 1))
        assert (up.counts * np.arange(up.counts.size)).sum() == jobs + 1
        assert (dn.counts * np.arange(dn.counts.size)).sum() == jobs - 1


class TestNextEvent:
    def test_transition_law_matches_enumeration(self, rng):
        # state (0,1,1,2), lam=0.5, d=2: arrival rate 2, departure rate 3
        # P[arrival -> level k] = (T_{k-1}^2 - T_k^2)/16 for T = (4,3,1,0)
        # P[departure -> level k] proportional to T_k - T_{k+1}
        state = OccupancyState.from_dict({0: 1, 1: 2, 2: 1})
        params = ModelParams(lam=0.5, M=4)
        want = {
            ("arrival", 1): 0.4 * 7 / 16,
            ("arrival", 2): 0.4 * 8 / 16,
            ("arrival", 3): 0.4 * 1 / 16,
            ("departure", 1): 0.6 * 2 / 3,
            ("departure", 2): 0.6 * 1 / 3,
        }
        draws = 40_000
        counts = {}
        dts = np.empty(draws)
        for i in range(draws):
            dts[i], ev = next_event(state, params, rng)
            counts[(ev.kind, ev.level)] = counts.get((ev.kind, ev.level), 0) + 1
        assert set(counts) == set(want)
        for key, p in want.items():
            sigma = (p * (1 - p) / draws) ** 0.5
            assert abs(counts[key] / draws - p) <= 5 * sigma
        # holding time is exponential with the total rate 5
        assert abs(dts.mean() - 0.2) <= 5 * 0.2 / draws**0.5

    def test_state_params_mismatch(self, rng):
        with pytest.raises(ValueError):
            next_event(OccupancyState.empty(3), ModelParams(lam=0.5, M=4), rng)


@pytest.fixture(scope="module")
def est_d1():
    return simulate(ModelParams(lam=0.5, M=200, d=1), SimConfig(seed=42))


@pytest.fixture(scope="module")
def est_d2():
    return simulate(ModelParams(lam=0.7, M=100, d=2), SimConfig(seed=42))


class TestStationaryLaw:
    def test_level_zero_is_pinned(self, est_d2):
        assert est_d2.mean_tail[0] == 1.0
        assert est_d2.tail_ci[0] == 0.0

    def test_tails_are_monotone(self, est_d2):
        assert (np.diff(est_d2.mean_tail) <= 0).all()

    def test_single_choice_matches_mm1(self, est_d1):
        for k in range(1, 6):
            want = 0.5**k
            assert abs(est_d1.mean_tail[k] - want) <= 3 * est_d1.tail_ci[k]

    def test_utilization_is_lambda(self, est_d2):
        assert abs(est_d2.mean_tail[1] - 0.7) <= 3 * est_d2.tail_ci[1]

    def test_two_choices_dominate_one(self):
        one = simulate(ModelParams(lam=0.7, M=100, d=1), SimConfig(seed=7))
        two = simulate(ModelParams(lam=0.7, M=100, d=2), SimConfig(seed=7))
        # doubly-exponential vs geometric tail, far beyond CI widths
        assert two.mean_tail[2] < one.mean_tail[2] - 5 * one.tail_ci[2]
        assert two.mean_tail[3] < one.mean_tail[3] - 5 * one.tail_ci[3]

    def test_estimate_tracks_squared_deviation(self, est_d2):
        assert 0 < est_d2.mean_square_error < 0.05
        assert est_d2.mse_ci < est_d2.mean_square_error


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        params = ModelParams(lam=0.6, M=50)
        a = simulate(params, SimConfig(seed=123))
        b = simulate(params, SimConfig(seed=123))
        assert np.array_equal(a.mean_tail, b.mean_tail)
        assert a.mean_square_error == b.mean_square_error
        assert a.total_events == b.total_events

    def test_streams_decorrelate(self):
        params = ModelParams(lam=0.6, M=50)
        a = simulate(params, SimConfig(seed=123), stream=0)
        b = simulate(params, SimConfig(seed=123), stream=1)
        assert a.total_events != b.total_events or not np.array_equal(
            a.mean_tail, b.mean_tail
        )


class TestEstimateMse:
    def test_value_does_not_depend_on_truncation(self):
        params = ModelParams(lam=0.5, M=50)
        a = estimate_mse(params, SimConfig(seed=5), 3)
        b = estimate_mse(params, SimConfig(seed=5), 12)
        assert a == b

    def test_rejects_bad_truncation(self):
        with pytest.raises(ValueError):
            estimate_mse(ModelParams(lam=0.5, M=50), SimConfig(seed=5), 0)

    def test_shrinks_with_system_size(self):
        small, _ = estimate_mse(ModelParams(lam=0.7, M=25), SimConfig(seed=9), 10)
        large, _ = estimate_mse(ModelParams(lam=0.7, M=400), SimConfig(seed=9), 10)
        assert large < small / 4


class TestConfigValidation:
    def test_horizon_must_exceed_warmup(self):
        cfg = SimConfig(seed=1, warmup_time=100.0, horizon_time=50.0)
        with pytest.raises(ValueError):
            simulate(ModelParams(lam=0.5, M=10), cfg)

    def test_seed_range(self):
        with pytest.raises(ValueError):
            SimConfig(seed=-1)
        with pytest.raises(ValueError):
            SimConfig(seed=2**64)

    def test_batch_minimum(self):
        with pytest.raises(ValueError):
            SimConfig(seed=1, batches=1)


class TestStationarySampling:
    params = ModelParams(lam=0.5, M=30)

    def test_snapshots_are_quantized_states(self):
        states = sample_stationary_states(self.params, SimConfig(seed=31), budget=60)
        assert 35 <= len(states) <= 75
        for occ in states[:10]:
            assert occ.M == 30
            assert to_tail(occ, 30, 5).is_quantized(30)

    def test_count_scales_with_horizon(self):
        # half the default window -> about half the draws
        short = SimConfig(seed=31, horizon_time=5050.0)
        states = sample_stationary_states(self.params, short, budget=60)
        assert 10 <= len(states) <= 55

    def test_budget_cap_warns_and_truncates(self):
        double = SimConfig(seed=31, horizon_time=20_000.0)
        with pytest.warns(UserWarning, match="budget exhausted"):
            states = sample_stationary_states(self.params, double, budget=60)
        assert len(states) == 75

    def test_deterministic_given_seed(self):
        a = sample_stationary_states(self.params, SimConfig(seed=8), budget=40)
        b = sample_stationary_states(self.params, SimConfig(seed=8), budget=40)
        assert len(a) == len(b)
        assert all(np.array_equal(x.counts, y.counts) for x, y in zip(a, b))
