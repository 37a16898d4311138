"""Stochastic environment: channel, arrivals, server rate, CSI staleness.

Channel gains are exponential with the configured mean (unit-mean Rayleigh
fading power on top of the distance-based gain).  Arrivals are Poisson by
default, with constant-rate and trace-driven alternatives.  Each source
draws from its own generator so the three streams stay independent and a
trajectory is a pure function of (params, seed).
"""

import math
from dataclasses import dataclass, field
from collections import deque
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .params import SystemParams

__all__ = [
    "ArrivalProcess",
    "RemoteServiceProcess",
    "SlotDraws",
    "Environment",
    "EnvSpec",
    "TraceError",
    "TraceExhausted",
    "load_trace",
    "stale_channel",
    "make_stream",
]

# Sub-stream ids; member distinguishes terminals/servers in fleet runs.
CHANNEL_STREAM = 0
ARRIVAL_STREAM = 1
SERVICE_STREAM = 2


class TraceError(Exception):
    """Malformed or invalid arrival trace file."""


class TraceExhausted(Exception):
    """Trace ran out of slots with wraparound disabled."""


def make_stream(seed: int, member: int, stream: int) -> np.random.Generator:
    """Independent generator for one (seed, member, stream) triple."""
    return np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), int(member), int(stream))))


@dataclass
class ArrivalProcess:
    """Per-slot packet arrivals: poisson | constant | trace."""

    kind: str = "poisson"
    rate: float = 5.0
    trace: Optional[np.ndarray] = None
    wrap: bool = True

    def __post_init__(self):
        if self.kind not in ("poisson", "constant", "trace"):
            raise ValueError(f"unknown arrival kind {self.kind!r}")
        if self.rate < 0.0:
            raise ValueError(f"arrival rate must be nonnegative, got {self.rate!r}")
        if self.kind == "trace" and (self.trace is None or len(self.trace) == 0):
            raise ValueError("trace arrivals need a nonempty trace")

    def sample(self, slot: int, tau: float, rng: np.random.Generator) -> float:
        """Packets arriving at the end of the given slot."""
        if self.kind == "poisson":
            return float(rng.poisson(self.rate * tau))
        if self.kind == "constant":
            return self.rate * tau
        if slot >= len(self.trace):
            if not self.wrap:
                raise TraceExhausted(f"trace has {len(self.trace)} slots, asked for slot {slot}")
            slot %= len(self.trace)
        return float(self.trace[slot])

    def rescaled(self, target_rate: float, tau: float) -> "ArrivalProcess":
        """Trace emulating a different mean rate (counts scaled uniformly)."""
        if self.kind != "trace":
            return ArrivalProcess(kind=self.kind, rate=target_rate, wrap=self.wrap)
        factor = target_rate * tau * len(self.trace) / float(np.sum(self.trace))
        return ArrivalProcess(kind="trace", rate=target_rate, trace=self.trace * factor, wrap=self.wrap)


@dataclass
class RemoteServiceProcess:
    """Server computation rate: constant, or rescaled by a random cycle factor."""

    kind: str = "constant"
    mean: float = 13.0

    def __post_init__(self):
        if self.kind not in ("constant", "scaled-by-k"):
            raise ValueError(f"unknown service kind {self.kind!r}")
        if self.mean < 0.0:
            raise ValueError(f"service mean must be nonnegative, got {self.mean!r}")

    def sample(self, rng: np.random.Generator):
        """(v_out, cycle scale factor relative to the mean) for one slot."""
        if self.kind == "constant":
            return self.mean, 1.0
        factor = float(rng.uniform(0.5, 1.5))
        return self.mean * factor, factor


def load_trace(path, tau: float, rescale_to: Optional[float] = None) -> ArrivalProcess:
    """Load a single-column CSV of per-slot packet counts.

    An optional first line "arrivals" is accepted as a header.  Values must
    be nonnegative numbers, one per line; the reported rate is the empirical
    per-second mean at the given slot duration.
    """
    lines = Path(path).read_text().splitlines()
    values = []
    for lineno, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text:
            continue
        if lineno == 1 and text.lower() == "arrivals":
            continue
        try:
            value = float(text)
        except ValueError:
            raise TraceError(f"{path}:{lineno}: not a number: {text!r}") from None
        if value < 0.0:
            raise TraceError(f"{path}:{lineno}: negative arrival count {value!r}")
        values.append(value)
    if not values:
        raise TraceError(f"{path}: empty trace")
    trace = np.asarray(values, dtype=float)
    proc = ArrivalProcess(kind="trace", rate=float(trace.mean()) / tau, trace=trace)
    if rescale_to is not None:
        proc = proc.rescaled(rescale_to, tau)
    return proc


def stale_channel(true_gain: float, delay: int, history: Sequence[float]):
    """Channel state as seen with a decision lag of ``delay`` slots.

    Returns (gain, fell_back): the gain observed ``delay`` slots ago, or the
    current one with fell_back=True when the history is still too short.
    """
    if delay == 0:
        return true_gain, False
    if len(history) < delay:
        return true_gain, True
    return history[-delay], False


@dataclass(frozen=True)
class SlotDraws:
    """Everything the environment produces for one slot."""

    gain: float
    observed_gain: float
    arrivals: float
    v_out: float
    compute_scale: float
    stale_fallback: bool = False


class Environment:
    """Single terminal/server stochastic environment, one owner per instance."""

    def __init__(self, params: SystemParams, seed: int,
                 arrivals: Optional[ArrivalProcess] = None,
                 service: Optional[RemoteServiceProcess] = None,
                 csi_delay: int = 0, random_compute_scale: bool = False,
                 member: int = 0):
        if csi_delay < 0:
            raise ValueError(f"csi delay must be nonnegative, got {csi_delay!r}")
        self.params = params
        self.seed = int(seed)
        self.member = member
        self.arrivals = arrivals if arrivals is not None else ArrivalProcess(rate=params.arrival_rate)
        self.service = service if service is not None else RemoteServiceProcess(mean=params.remote_rate)
        self.csi_delay = csi_delay
        self.random_compute_scale = random_compute_scale
        self.reset()

    def reset(self) -> None:
        self._channel_rng = make_stream(self.seed, self.member, CHANNEL_STREAM)
        self._arrival_rng = make_stream(self.seed, self.member, ARRIVAL_STREAM)
        self._service_rng = make_stream(self.seed, self.member, SERVICE_STREAM)
        self._history: deque = deque(maxlen=max(self.csi_delay, 1))

    def sample_channel(self) -> float:
        """One exponential gain draw with the configured mean."""
        return float(self._channel_rng.exponential(self.params.mean_channel_gain))

    def slot(self, n: int) -> SlotDraws:
        gain = self.sample_channel()
        observed, fell_back = stale_channel(gain, self.csi_delay, self._history)
        self._history.append(gain)
        arrived = self.arrivals.sample(n, self.params.slot_duration, self._arrival_rng)
        v_out, factor = self.service.sample(self._service_rng)
        scale = self.params.compute_scale
        if self.random_compute_scale:
            if self.service.kind == "scaled-by-k":
                scale = scale * factor
            else:
                scale = scale * float(self._service_rng.uniform(0.5, 1.5))
        return SlotDraws(gain=gain, observed_gain=observed, arrivals=arrived,
                         v_out=v_out, compute_scale=scale, stale_fallback=fell_back)


@dataclass
class EnvSpec:
    """Recipe for building per-seed environments (Monte Carlo replication)."""

    arrivals: Optional[ArrivalProcess] = None
    service: Optional[RemoteServiceProcess] = None
    csi_delay: int = 0
    random_compute_scale: bool = False

    def build(self, params: SystemParams, seed: int) -> Environment:
        arrivals = self.arrivals
        if arrivals is None:
            arrivals = ArrivalProcess(rate=params.arrival_rate)
        elif arrivals.kind != "trace" and arrivals.rate != params.arrival_rate:
            arrivals = ArrivalProcess(kind=arrivals.kind, rate=params.arrival_rate, wrap=arrivals.wrap)
        service = self.service
        if service is None:
            service = RemoteServiceProcess(mean=params.remote_rate)
        elif service.mean != params.remote_rate:
            service = RemoteServiceProcess(kind=service.kind, mean=params.remote_rate)
        return Environment(params, seed, arrivals=arrivals, service=service,
                           csi_delay=self.csi_delay,
                           random_compute_scale=self.random_compute_scale)
