"""System parameters and scenario presets.

All queue quantities are packets.  The over-the-air bandwidth is folded
into a packet bandwidth B = bandwidth_hz / bits_per_packet so that the
Shannon rate comes out directly in packets/s; the paper-style radio
constants (noise density in dBm/Hz, log-distance path gain) are converted
once in :meth:`SystemParams.from_radio`.
"""

import math
from dataclasses import dataclass, replace
from typing import Optional

__all__ = ["SystemParams", "sufficient_preset", "constrained_preset"]

# Radio defaults used by the presets: 10 MHz carrier at 100 m with 1 Mbit
# packets, -174 dBm/Hz noise density.
DEFAULT_BANDWIDTH_HZ = 10e6
DEFAULT_BITS_PER_PACKET = 1e6
DEFAULT_DISTANCE_M = 100.0
DEFAULT_NOISE_DBM_PER_HZ = -174.0


def path_gain_linear(distance_m: float) -> float:
    """Mean linear channel gain from the log-distance model 15.3 + 37.6 log10(d) dB."""
    loss_db = 15.3 + 37.6 * math.log10(distance_m)
    return 10.0 ** (-loss_db / 10.0)


def noise_power_watts(bandwidth_hz: float, noise_dbm_per_hz: float = DEFAULT_NOISE_DBM_PER_HZ) -> float:
    """Integrated AWGN power in watts over the given bandwidth."""
    return 10.0 ** ((noise_dbm_per_hz + 10.0 * math.log10(bandwidth_hz)) / 10.0 - 3.0)


@dataclass(frozen=True)
class SystemParams:
    """Physical and economic constants of one terminal/server pair.

    Attributes:
        slot_duration: slot length tau in seconds.
        packet_bandwidth: B in packets/s (bandwidth_hz / bits_per_packet).
        noise_power: N0 in watts over the whole band.
        mean_channel_gain: mean of the exponential linear gain.
        compute_scale: packets produced per CPU cycle.
        switched_capacitance: CPU power coefficient, watts.s^2/cycles^2.
        remote_rate: mean server computation rate, packets/s.
        arrival_rate: mean task arrival rate, packets/s.
        delay_weight: weight on queueing delay in the running cost.
        power_weight: weight on spent power in the running cost.
        eps_floor: lower floor for the local rate-difference estimate.
        delta_floor: lower floor for the remote rate-difference estimate.
        p_max: optional hard cap applied to both powers after the
            closed-form rule (None reproduces the uncapped rule).
    """

    slot_duration: float = 0.1
    packet_bandwidth: float = DEFAULT_BANDWIDTH_HZ / DEFAULT_BITS_PER_PACKET
    noise_power: float = noise_power_watts(DEFAULT_BANDWIDTH_HZ)
    mean_channel_gain: float = path_gain_linear(DEFAULT_DISTANCE_M)
    compute_scale: float = 1e-7
    switched_capacitance: float = 3.5e-12
    remote_rate: float = 13.0
    arrival_rate: float = 5.0
    delay_weight: float = 1.0
    power_weight: float = 1.0
    eps_floor: float = 1e-3
    delta_floor: float = 1e-3
    p_max: Optional[float] = None

    def __post_init__(self):
        positive = [
            ("slot_duration", self.slot_duration),
            ("packet_bandwidth", self.packet_bandwidth),
            ("noise_power", self.noise_power),
            ("mean_channel_gain", self.mean_channel_gain),
            ("compute_scale", self.compute_scale),
            ("switched_capacitance", self.switched_capacitance),
            ("arrival_rate", self.arrival_rate),
            ("delay_weight", self.delay_weight),
            ("power_weight", self.power_weight),
            ("eps_floor", self.eps_floor),
            ("delta_floor", self.delta_floor),
        ]
        for name, value in positive:
            if not value > 0.0:
                raise ValueError(f"{name} must be strictly positive, got {value!r}")
        if self.remote_rate < 0.0:
            raise ValueError(f"remote_rate must be nonnegative, got {self.remote_rate!r}")
        if self.p_max is not None and not self.p_max > 0.0:
            raise ValueError(f"p_max must be positive when set, got {self.p_max!r}")

    @classmethod
    def from_radio(
        cls,
        bandwidth_hz: float = DEFAULT_BANDWIDTH_HZ,
        bits_per_packet: float = DEFAULT_BITS_PER_PACKET,
        distance_m: float = DEFAULT_DISTANCE_M,
        noise_dbm_per_hz: float = DEFAULT_NOISE_DBM_PER_HZ,
        **overrides,
    ) -> "SystemParams":
        """Build params from raw radio constants.

        packet_bandwidth is bandwidth_hz / bits_per_packet exactly; noise is
        the density integrated over the band; the mean channel gain follows
        the log-distance model with unit-mean exponential fading on top.
        """
        return cls(
            packet_bandwidth=bandwidth_hz / bits_per_packet,
            noise_power=noise_power_watts(bandwidth_hz, noise_dbm_per_hz),
            mean_channel_gain=path_gain_linear(distance_m),
            **overrides,
        )

    def with_(self, **changes) -> "SystemParams":
        """Copy with selected fields replaced."""
        return replace(self, **changes)

    @property
    def local_rate_slope(self) -> float:
        """Packets/s of local service per unit of the local queue gradient."""
        return self.compute_scale**2 / (2.0 * self.switched_capacitance * self.power_weight)


def sufficient_preset(**overrides) -> SystemParams:
    """Default operating point where the server outruns the offered load."""
    return SystemParams.from_radio(**{"arrival_rate": 5.0, "remote_rate": 13.0, **overrides})


def constrained_preset(**overrides) -> SystemParams:
    """Operating point where the server is the bottleneck."""
    return SystemParams.from_radio(**{"arrival_rate": 8.0, "remote_rate": 3.0, **overrides})


def oracle_preset(**overrides) -> SystemParams:
    """Desk-scale brute-force comparison instance.

    Rates sit ten times higher than the default preset so several packets
    arrive per slot: the closed forms come from a fluid limit, and comparing
    against the discretized optimum is meaningful when queue content is
    large relative to one slot's quantum.
    """
    return SystemParams.from_radio(**{"arrival_rate": 50.0, "remote_rate": 130.0, **overrides})
