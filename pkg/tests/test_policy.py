"""Steady state, rate estimation, priority coefficients, and the power rule."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import exp1

from mecoffload.params import SystemParams, constrained_preset, sufficient_preset
from mecoffload.policy import (
    CONSTRAINED,
    SUFFICIENT,
    InfeasibleLoadError,
    PriorityCoeffs,
    RateEstimate,
    RateWindow,
    ScenarioInconsistencyError,
    SteadyState,
    decide,
    estimate_from_diffs,
    estimate_rates,
    gradients,
    priority_coeffs,
    priority_value,
    solve_steady_state,
)
from mecoffload.rates import expected_tx_power, expected_tx_rate

SUFF = sufficient_preset()
CONS = constrained_preset()
LN2 = math.log(2.0)


def oracle_rate(x, params):
    """Vectorized independent reimplementation of the expected transmit rate."""
    x = np.asarray(x, dtype=float)
    a = params.power_weight * params.noise_power / (x * params.packet_bandwidth * params.mean_channel_gain)
    return params.packet_bandwidth / LN2 * exp1(a)


def grid_scan_root(target, params, total=1_000_000):
    """Dense-grid root of target = rate(v) + slope*v, independent of the solver.

    A coarse log scan brackets the root, then a linear scan with the full
    point budget pins it inside the bracketing cell.
    """
    slope = params.local_rate_slope
    coarse = np.logspace(-10, 2, 10_000)
    values = oracle_rate(coarse, params) + slope * coarse
    idx = int(np.searchsorted(values, target))
    assert 0 < idx < coarse.size, "root not bracketed by the coarse scan"
    fine = np.linspace(coarse[idx - 1], coarse[idx], total - 10_000)
    fidx = int(np.argmin(np.abs(oracle_rate(fine, params) + slope * fine - target)))
    return float(fine[fidx])


class TestSteadyState:
    def test_vanishing_load(self):
        # Gradient and cost collapse with the load (down to solver tolerance).
        values = [solve_steady_state(SUFF.with_(arrival_rate=lam))
                  for lam in (1.0, 1e-3, 1e-9)]
        assert values[0].v_l > values[1].v_l > values[2].v_l
        assert values[2].v_l < 1e-6
        assert values[2].cost < 1e-15

    def test_default_preset_is_sufficient(self):
        assert solve_steady_state(SUFF).scenario == SUFFICIENT

    def test_reduced_server_preset_is_constrained(self):
        assert solve_steady_state(CONS).scenario == CONSTRAINED

    def test_flow_balance_residuals(self):
        for params in (SUFF, CONS):
            ss = solve_steady_state(params)
            residual = expected_tx_rate(ss.x, params) + params.local_rate_slope * ss.v_l \
                - params.arrival_rate
            assert abs(residual) < 1e-9
            if ss.scenario == CONSTRAINED:
                assert abs(expected_tx_rate(ss.x, params) - params.remote_rate) < 1e-9
                assert ss.x == ss.x_eq
            else:
                assert ss.x == ss.v_l

    def test_cost_matches_definition(self):
        ss = solve_steady_state(SUFF)
        quad = SUFF.compute_scale**2 / (4 * SUFF.switched_capacitance * SUFF.power_weight)
        expected = SUFF.power_weight * expected_tx_power(ss.x, SUFF) + quad * ss.v_l**2
        assert ss.cost == pytest.approx(expected, rel=1e-12)

    def test_root_matches_grid_scan(self):
        ss = solve_steady_state(SUFF)
        oracle = grid_scan_root(SUFF.arrival_rate, SUFF)
        assert ss.v_l == pytest.approx(oracle, rel=1e-6)

    def test_scenario_flips_exactly_once(self):
        threshold_params = SUFF
        flips = 0
        last = None
        for lam in np.linspace(2.0, 20.0, 61):
            scenario = solve_steady_state(threshold_params.with_(arrival_rate=float(lam))).scenario
            if last is not None and scenario != last:
                flips += 1
            last = scenario
        assert flips == 1

    def test_infeasible_without_server_under_cap(self):
        params = SUFF.with_(remote_rate=0.0, p_max=1.0)
        with pytest.raises(InfeasibleLoadError):
            solve_steady_state(params)

    def test_local_only_without_cap_is_solvable(self):
        ss = solve_steady_state(SUFF.with_(remote_rate=0.0))
        assert ss.scenario == CONSTRAINED
        assert ss.v_l == pytest.approx(SUFF.arrival_rate / SUFF.local_rate_slope, rel=1e-9)


class TestRateEstimate:
    def test_balanced_window_floors(self):
        ss = solve_steady_state(SUFF)
        window = RateWindow(SUFF, 10)
        for _ in range(10):
            window.record(0.5, 0.5, 1.3, 0.5)  # served exactly what arrived
        est = estimate_rates(window, SUFF, ss)
        assert est.eps == SUFF.eps_floor
        # remote capacity exceeded transfers here, so only eps floors
        assert est.delta == pytest.approx((1.3 - 0.5) / SUFF.slot_duration)

    def test_negative_measurement_floors(self):
        ss = solve_steady_state(SUFF)
        est = estimate_from_diffs(-3.0, -1.0, SUFF, ss)
        assert est.eps == SUFF.eps_floor
        assert est.delta == SUFF.delta_floor

    def test_window_contract(self):
        with pytest.raises(ValueError):
            RateWindow(SUFF, 0)

    def test_sufficient_solution_matches_grid_scan(self):
        ss = solve_steady_state(SUFF)
        est = estimate_from_diffs(0.0, 0.0, SUFF, ss)  # floors to eps_floor
        oracle = grid_scan_root(SUFF.arrival_rate + SUFF.eps_floor, SUFF)
        assert est.v_l == pytest.approx(oracle, rel=1e-6)

    def test_local_balance_identity(self):
        ss = solve_steady_state(SUFF)
        est = estimate_from_diffs(2.0, 1.0, SUFF, ss)
        residual = expected_tx_rate(est.x, SUFF) + SUFF.local_rate_slope * est.v_l \
            - SUFF.arrival_rate - est.eps
        assert abs(residual) < 1e-8

    def test_constrained_remote_identity(self):
        ss = solve_steady_state(CONS)
        est = estimate_from_diffs(1.0, 0.5, CONS, ss)
        assert abs(CONS.remote_rate - expected_tx_rate(est.x, CONS) - est.delta) < 1e-8
        residual = expected_tx_rate(est.x, CONS) + CONS.local_rate_slope * est.v_l \
            - CONS.arrival_rate - est.eps
        assert abs(residual) < 1e-10

    def test_saturating_delta_pins_gradient_gap_to_zero(self):
        ss = solve_steady_state(CONS)
        est = estimate_from_diffs(0.5, CONS.remote_rate + 1.0, CONS, ss)
        assert est.x == 0.0


class TestPriorityCoeffs:
    def test_zero_queues_zero_priority(self):
        for params in (SUFF, CONS):
            ss = solve_steady_state(params)
            est = estimate_from_diffs(1.0, 1.0, params, ss)
            coeffs = priority_coeffs(est, ss, params)
            assert priority_value(coeffs, 0.0, 0.0) == 0.0

    def test_sufficient_formulas(self):
        ss = solve_steady_state(SUFF)
        est = estimate_from_diffs(1.5, 0.0, SUFF, ss)
        coeffs = priority_coeffs(est, ss, SUFF)
        assert coeffs.a_l == pytest.approx(SUFF.delay_weight / (2 * SUFF.arrival_rate * est.eps))
        assert coeffs.b_l == pytest.approx((est.cost - ss.cost) / est.eps)
        drain = SUFF.remote_rate - expected_tx_rate(est.v_l, SUFF)
        assert coeffs.a_r == pytest.approx(SUFF.delay_weight / (2 * SUFF.arrival_rate * drain))
        assert coeffs.b_r == 0.0
        assert coeffs.gamma == 1.0

    def test_sufficient_scenario_inconsistency(self):
        # An estimate whose gradient sits past the server equilibrium point
        # cannot be priced with the sufficient-scenario coefficients.
        ss = solve_steady_state(SUFF)
        est = RateEstimate(eps=10.0, delta=SUFF.delta_floor, v_l=10.0 * ss.x_eq,
                           x=10.0 * ss.x_eq, cost=2.0 * ss.cost, window=1)
        with pytest.raises(ScenarioInconsistencyError):
            priority_coeffs(est, ss, SUFF)

    def test_estimator_respects_scenario_margin(self):
        # Transiently huge measured surpluses pin to the classification
        # boundary instead of leaving the sufficient-scenario domain.
        ss = solve_steady_state(SUFF)
        est = estimate_from_diffs(1e4, 0.0, SUFF, ss)
        assert est.v_l <= ss.x_eq
        coeffs = priority_coeffs(est, ss, SUFF)
        assert coeffs.a_r > 0.0

    def test_constrained_gamma_extreme_matches_algebra(self):
        # Synthetic non-binding instance: the interval works out to
        # [0.55, 0.625] and the equal-difference extreme point lands inside,
        # where it must equal eps*(x_s + 2 v_ls)/(4 gap) + 1/4.
        steady = SteadyState(v_l=1.0, x=0.5, cost=1.0, scenario=CONSTRAINED, x_eq=0.5)
        est = RateEstimate(eps=0.1, delta=0.1, v_l=1.3, x=0.2, cost=1.2, window=1)
        coeffs = priority_coeffs(est, steady, CONS)
        gap = est.cost - steady.cost
        expected = est.eps * (steady.x + 2 * steady.v_l) / (4 * gap) + 0.25
        assert not coeffs.gamma_fallback
        assert coeffs.gamma == pytest.approx(expected, rel=1e-12)

    def test_constrained_linear_terms_split_by_gamma(self):
        ss = solve_steady_state(CONS)
        est = estimate_from_diffs(0.08, 0.08, CONS, ss)
        coeffs = priority_coeffs(est, ss, CONS)
        gap = est.cost - ss.cost
        assert coeffs.a_l == pytest.approx(CONS.delay_weight / (2 * CONS.arrival_rate * est.eps))
        assert coeffs.a_r == pytest.approx(CONS.delay_weight / (2 * CONS.arrival_rate * est.delta))
        assert coeffs.b_l == pytest.approx(coeffs.gamma * gap / est.eps)
        assert coeffs.b_r == pytest.approx((1 - coeffs.gamma) * gap / est.delta)

    def test_projection_clamps_to_upper_bound(self):
        # Synthetic operating point whose extreme sits above the unit bound.
        steady = SteadyState(v_l=0.2, x=0.5, cost=1.0, scenario=CONSTRAINED, x_eq=0.5)
        est = RateEstimate(eps=0.2, delta=0.2, v_l=0.3, x=0.0, cost=1.0343, window=1)
        coeffs = priority_coeffs(est, steady, CONS)
        assert coeffs.gamma == 1.0

    def test_empty_intersection_falls_back_to_unit_clamp(self):
        steady = SteadyState(v_l=0.25, x=0.5, cost=1.0, scenario=CONSTRAINED, x_eq=0.5)
        est = RateEstimate(eps=0.2, delta=0.2, v_l=0.26, x=0.0, cost=1.0476, window=1)
        coeffs = priority_coeffs(est, steady, CONS)
        assert coeffs.gamma_fallback
        assert 0.0 <= coeffs.gamma <= 1.0

    @settings(max_examples=60, deadline=None)
    @given(st.floats(min_value=-5.0, max_value=2.5),
           st.floats(min_value=-5.0, max_value=2.5))
    def test_weights_always_positive(self, eps_hat, delta_hat):
        ss = solve_steady_state(CONS)
        est = estimate_from_diffs(eps_hat, delta_hat, CONS, ss)
        coeffs = priority_coeffs(est, ss, CONS)
        assert coeffs.a_l > 0.0 and coeffs.a_r > 0.0
        assert coeffs.b_l >= 0.0
        assert 0.0 <= coeffs.gamma <= 1.0


class TestGradients:
    def _coeffs(self):
        ss = solve_steady_state(SUFF)
        est = estimate_from_diffs(1.0, 0.0, SUFF, ss)
        return priority_coeffs(est, ss, SUFF)

    def test_origin(self):
        coeffs = self._coeffs()
        assert gradients(coeffs, 0.0, 0.0) == (coeffs.b_l, coeffs.b_r)

    def test_increasing_in_local_queue(self):
        coeffs = self._coeffs()
        assert gradients(coeffs, 10.0, 0.0)[0] > gradients(coeffs, 5.0, 0.0)[0]

    def test_negative_queue_rejected(self):
        with pytest.raises(ValueError):
            gradients(self._coeffs(), -1.0, 0.0)

    def test_matches_finite_differences(self):
        coeffs = self._coeffs()
        h = 1e-6
        for q_l in (0.5, 2.0, 7.5):
            for q_r in (0.25, 1.0, 4.0):
                v_l, v_r = gradients(coeffs, q_l, q_r)
                fd_l = (priority_value(coeffs, q_l + h, q_r)
                        - priority_value(coeffs, q_l - h, q_r)) / (2 * h)
                fd_r = (priority_value(coeffs, q_l, q_r + h)
                        - priority_value(coeffs, q_l, q_r - h)) / (2 * h)
                assert fd_l == pytest.approx(v_l, rel=1e-6)
                assert fd_r == pytest.approx(v_r, rel=1e-6)


class TestDecide:
    def test_zero_gradient_zero_local_power(self):
        d = decide(0.0, 0.0, SUFF.mean_channel_gain, SUFF)
        assert d.p_local == 0.0
        assert d.p_tx == 0.0

    def test_no_transmission_when_remote_dominates(self):
        for gain in np.logspace(-12, -6, 8):
            assert decide(1.0, 1.0, float(gain), SUFF).p_tx == 0.0
            assert decide(0.5, 1.0, float(gain), SUFF).p_tx == 0.0

    def test_water_level_boundary_is_exact(self):
        x = 3e-4
        gain = SUFF.noise_power / (SUFF.packet_bandwidth * x / SUFF.power_weight)
        assert decide(x, 0.0, gain, SUFF).p_tx == 0.0

    def test_local_power_formula(self):
        v_l = 2.5e-3
        d = decide(v_l, 0.0, SUFF.mean_channel_gain, SUFF)
        expected = SUFF.compute_scale**2 * v_l**2 / (4 * SUFF.switched_capacitance * SUFF.power_weight**2)
        assert d.p_local == pytest.approx(expected, rel=1e-12)

    def test_power_cap_flags(self):
        params = SUFF.with_(p_max=1e-6)
        d = decide(1.0, 0.0, params.mean_channel_gain, params)
        assert d.capped
        assert d.p_local <= 1e-6 and d.p_tx <= 1e-6

    @settings(max_examples=80, deadline=None)
    @given(st.floats(min_value=1e-6, max_value=1.0),
           st.floats(min_value=0.0, max_value=1.0),
           st.floats(min_value=0.1, max_value=10.0))
    def test_water_filling_monotone(self, v_l, v_r, gain_scale):
        gain = SUFF.mean_channel_gain * gain_scale
        base = decide(v_l, v_r, gain, SUFF).p_tx
        assert decide(v_l, v_r, gain * 1.5, SUFF).p_tx >= base
        assert decide(v_l * 1.5, v_r, gain, SUFF).p_tx >= base
        assert decide(v_l, v_r * 1.5, gain, SUFF).p_tx <= base

    def test_threshold_consistency_with_remote_backlog(self):
        # Transmission happens exactly while the remote backlog sits below
        # the explicit water-level threshold.
        ss = solve_steady_state(SUFF)
        est = estimate_from_diffs(1.0, 0.0, SUFF, ss)
        coeffs = priority_coeffs(est, ss, SUFF)
        rng = np.random.default_rng(3)
        for _ in range(200):
            q_l = float(rng.uniform(0.0, 5.0))
            q_r = float(rng.uniform(0.0, 5.0))
            gain = float(rng.exponential(SUFF.mean_channel_gain))
            v_l, v_r = gradients(coeffs, q_l, q_r)
            p_tx = decide(v_l, v_r, gain, SUFF).p_tx
            bound = (v_l - SUFF.power_weight * SUFF.noise_power
                     / (SUFF.packet_bandwidth * gain)) / (2 * coeffs.a_r)
            assert (p_tx > 0.0) == (q_r < bound)


class TestFloorApproximationTrend:
    def test_floor_estimate_converges_linearly(self):
        # As the floor shrinks, the zero-queue gradient b_l/gamma approaches
        # its limit at a linear rate; under the base-2 rate convention the
        # limit sits between ln2 * v_ls and v_ls (exact equality with v_ls
        # holds only in the natural-log convention).
        ss = solve_steady_state(SUFF)

        def b_over_gamma(floor: float) -> float:
            params = SUFF.with_(eps_floor=floor)
            est = estimate_from_diffs(0.0, 0.0, params, ss)
            coeffs = priority_coeffs(est, ss, params)
            return coeffs.b_l / coeffs.gamma

        # Floors kept large enough that the linear term dominates the 1e-9
        # residual tolerance of the bracketed bisection.
        floors = [1.0, 0.1, 0.01, 0.001]
        values = [b_over_gamma(f) for f in floors]
        # Richardson extrapolation to the zero-floor limit from the two
        # smallest floors (independent of any closed-form claim).
        limit = (floors[-2] * values[-1] - floors[-1] * values[-2]) / (floors[-2] - floors[-1])
        errors = [abs(v - limit) for v in values[:-1]]
        for bigger, smaller in zip(errors, errors[1:]):
            assert smaller <= bigger / 5.0  # at least linear over each decade
        assert LN2 * ss.v_l * (1 - 1e-3) <= limit <= ss.v_l * (1 + 1e-3)
