"""Rate laws and channel-averaged expectations vs Monte Carlo oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mecoffload.params import SystemParams, sufficient_preset
from mecoffload.rates import (
    expected_clipped_power,
    expected_tx_power,
    expected_tx_rate,
    local_rate,
    tx_rate,
)

PARAMS = sufficient_preset()


def mc_channel_draws(params: SystemParams, n: int = 1_000_000, seed: int = 20240611):
    rng = np.random.default_rng(seed)
    return rng.exponential(params.mean_channel_gain, size=n)


def mc_water_filling(x: float, params: SystemParams, gains: np.ndarray):
    """Monte Carlo oracle for the water-filling expectations.

    Draws the optimal power (B*x/beta - N0/H)^+ per channel sample and the
    base-2 Shannon rate it realizes; returns (mean, se) pairs for both.
    """
    level = params.packet_bandwidth * x / params.power_weight
    power = np.maximum(level - params.noise_power / gains, 0.0)
    rate = np.where(power > 0.0,
                    params.packet_bandwidth * np.log2(1.0 + power * gains / params.noise_power),
                    0.0)
    n = gains.size
    return ((power.mean(), power.std(ddof=1) / math.sqrt(n)),
            (rate.mean(), rate.std(ddof=1) / math.sqrt(n)))


class TestLocalRate:
    def test_zero_power(self):
        assert local_rate(0.0, PARAMS) == 0.0

    def test_unit_frequency_point(self):
        # At p = c the CPU runs at unit frequency, so the rate equals the scale.
        p = PARAMS.switched_capacitance
        assert local_rate(p, PARAMS) == pytest.approx(PARAMS.compute_scale, rel=1e-12)

    def test_direct_evaluation(self):
        got = local_rate(0.1, PARAMS)
        assert got == pytest.approx(1e-7 * math.sqrt(0.1 / 3.5e-12), rel=1e-12)

    def test_negative_power_rejected(self):
        with pytest.raises(ValueError):
            local_rate(-1e-9, PARAMS)

    @given(st.floats(min_value=1e-12, max_value=1e3))
    def test_power_round_trip(self, p):
        # Invert the rate law: v^2 * c / k^2 recovers the power.
        v = local_rate(p, PARAMS)
        back = v**2 * PARAMS.switched_capacitance / PARAMS.compute_scale**2
        assert back == pytest.approx(p, rel=1e-12)


class TestTxRate:
    def test_zero_power(self):
        assert tx_rate(0.0, PARAMS.mean_channel_gain, PARAMS) == 0.0

    def test_unit_snr(self):
        p = PARAMS.noise_power / PARAMS.mean_channel_gain
        assert tx_rate(p, PARAMS.mean_channel_gain, PARAMS) == pytest.approx(
            PARAMS.packet_bandwidth, rel=1e-12)

    def test_independent_reimplementation(self):
        p, h = 0.2, PARAMS.mean_channel_gain
        expected = (PARAMS.packet_bandwidth
                    * math.log(1.0 + p * h / PARAMS.noise_power) / math.log(2.0))
        assert tx_rate(p, h, PARAMS) == pytest.approx(expected, rel=1e-12)

    def test_bad_gain_rejected(self):
        with pytest.raises(ValueError):
            tx_rate(0.1, 0.0, PARAMS)
        with pytest.raises(ValueError):
            tx_rate(0.1, -1.0, PARAMS)


class TestExpectations:
    def test_vanish_at_zero(self):
        assert expected_tx_power(0.0, PARAMS) == 0.0
        assert expected_tx_rate(0.0, PARAMS) == 0.0

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            expected_tx_power(-1e-9, PARAMS)
        with pytest.raises(ValueError):
            expected_tx_rate(-1e-9, PARAMS)

    def test_monotone(self):
        for x in np.logspace(-6, 3, 12):
            assert expected_tx_power(2.0 * x, PARAMS) >= expected_tx_power(x, PARAMS)
        assert expected_tx_rate(1.0, PARAMS) < expected_tx_rate(2.0, PARAMS)

    def test_monte_carlo_at_unit_gradient(self):
        gains = mc_channel_draws(PARAMS)
        (p_mean, p_se), (r_mean, r_se) = mc_water_filling(1.0, PARAMS, gains)
        assert abs(expected_tx_power(1.0, PARAMS) - p_mean) <= 3.0 * p_se
        assert abs(expected_tx_rate(1.0, PARAMS) - r_mean) <= 3.0 * r_se

    def test_monte_carlo_grid(self):
        # Full fidelity sweep: 20 log-spaced gradients within 3 SEs each.
        gains = mc_channel_draws(PARAMS)
        for x in np.logspace(-6, 3, 20):
            x = float(x)
            (p_mean, p_se), (r_mean, r_se) = mc_water_filling(x, PARAMS, gains)
            assert abs(expected_tx_power(x, PARAMS) - p_mean) <= 3.0 * p_se, f"power at x={x}"
            assert abs(expected_tx_rate(x, PARAMS) - r_mean) <= 3.0 * r_se, f"rate at x={x}"

    def test_clipped_power_matches_water_filling(self):
        # Same integral, parameterized by the level directly.
        x = 0.37
        level = PARAMS.packet_bandwidth * x / PARAMS.power_weight
        assert expected_clipped_power(level, PARAMS) == pytest.approx(
            expected_tx_power(x, PARAMS), rel=1e-12)
