"""Service-rate physics and the channel-averaged water-filling expectations.

local_rate and tx_rate map spent power to packets/s.  expected_tx_power and
expected_tx_rate average the optimal transmit rule (water level w = B*x/beta,
power (w - N0/H)^+) over the exponential gain distribution; both vanish as
the gradient difference x goes to 0 and grow monotonically in x.

Note on logarithm bases: tx_rate is a base-2 Shannon rate, so the expected
rate produced by the water-filling rule carries a 1/ln 2 factor relative to
the expected power, which has none.  Both expectations below are the exact
channel averages of the implemented rule, which is what the Monte Carlo
fidelity checks pin down.
"""

import math

from .expint import e1
from .params import SystemParams

__all__ = [
    "local_rate",
    "tx_rate",
    "expected_tx_power",
    "expected_tx_rate",
    "expected_clipped_power",
]

_LN2 = math.log(2.0)


def local_rate(p_local: float, params: SystemParams, compute_scale: float = None) -> float:
    """Local computation rate (packets/s) at CPU power p_local watts."""
    if p_local < 0.0:
        raise ValueError(f"local power must be nonnegative, got {p_local!r}")
    k = params.compute_scale if compute_scale is None else compute_scale
    return k / math.sqrt(params.switched_capacitance) * math.sqrt(p_local)


def tx_rate(p_tx: float, gain: float, params: SystemParams) -> float:
    """Transmission rate (packets/s) at power p_tx watts over linear gain."""
    if p_tx < 0.0:
        raise ValueError(f"transmit power must be nonnegative, got {p_tx!r}")
    if not gain > 0.0:
        raise ValueError(f"channel gain must be positive, got {gain!r}")
    return params.packet_bandwidth * math.log2(1.0 + p_tx * gain / params.noise_power)


def _e1_argument(x: float, params: SystemParams) -> float:
    return params.power_weight * params.noise_power / (x * params.packet_bandwidth * params.mean_channel_gain)


def expected_tx_power(x: float, params: SystemParams) -> float:
    """Mean transmit power of the water-filling rule at gradient difference x.

    Continuously extended to 0 at x = 0 (water level below every channel).
    """
    if x < 0.0:
        raise ValueError(f"gradient difference must be nonnegative, got {x!r}")
    if x == 0.0:
        return 0.0
    a = _e1_argument(x, params)
    if a > 700.0:
        return 0.0
    b, beta = params.packet_bandwidth, params.power_weight
    return (b * x / beta) * math.exp(-a) - (params.noise_power / params.mean_channel_gain) * e1(a)


def expected_tx_rate(x: float, params: SystemParams) -> float:
    """Mean transmission rate (packets/s) of the water-filling rule at x.

    Strictly increasing for x > 0; continuously extended to 0 at x = 0.
    """
    if x < 0.0:
        raise ValueError(f"gradient difference must be nonnegative, got {x!r}")
    if x == 0.0:
        return 0.0
    a = _e1_argument(x, params)
    if a > 700.0:
        return 0.0
    return params.packet_bandwidth / _LN2 * e1(a)


def expected_clipped_power(level: float, params: SystemParams) -> float:
    """Mean of (level - N0/H)^+ over the gain distribution, for fixed water levels."""
    if level <= 0.0:
        return 0.0
    a = params.noise_power / (level * params.mean_channel_gain)
    if a > 700.0:
        return 0.0
    return level * math.exp(-a) - (params.noise_power / params.mean_channel_gain) * e1(a)
