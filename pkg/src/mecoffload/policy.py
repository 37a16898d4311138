"""Closed-form delay-optimal offloading policy.

The pipeline per slot is: measure short-term in/out rate differences of the
two queues, floor them, solve the operating point they imply (gradients of
the quadratic priority surface), and turn the gradients into powers with the
multi-level water-filling rule

    p_local = kbar^2 / (4 c beta^2) * V_l^2
    p_tx    = (B / beta * (V_l - V_r) - N0 / H)^+

The steady-state solver classifies the system as computation "sufficient"
(server outruns the equilibrium offload rate) or "constrained" (server is
the bottleneck) and anchors the priority coefficients accordingly.
"""

import math
from collections import deque
from dataclasses import dataclass
from typing import Optional

from .params import SystemParams
from .rates import expected_tx_power, expected_tx_rate

__all__ = [
    "SUFFICIENT",
    "CONSTRAINED",
    "Decision",
    "SteadyState",
    "RateEstimate",
    "PriorityCoeffs",
    "RateWindow",
    "InfeasibleLoadError",
    "ScenarioInconsistencyError",
    "solve_steady_state",
    "estimate_rates",
    "estimate_from_diffs",
    "priority_coeffs",
    "gradients",
    "priority_value",
    "decide",
    "WaterFillingPolicy",
]

SUFFICIENT = "sufficient"
CONSTRAINED = "constrained"

# All scalar roots are bracketed bisections on monotone maps.
BISECT_TOL = 1e-9
BISECT_MAX_ITER = 200
_BRACKET_CAP = 1e15

# In the sufficient scenario the measured local surplus is capped at this
# fraction of the classification margin, keeping the implied gradient
# strictly inside the scenario's validity region (the remote-queue weight
# diverges as the gradient reaches the server equilibrium point).
SCENARIO_MARGIN = 0.9


class InfeasibleLoadError(Exception):
    """The offered load cannot be served at any gradient within bounds."""


class ScenarioInconsistencyError(Exception):
    """A sufficient-scenario operating point implies a saturated server."""


@dataclass(frozen=True)
class Decision:
    """Per-slot power pair, watts."""

    p_local: float
    p_tx: float
    capped: bool = False


@dataclass(frozen=True)
class SteadyState:
    """Long-run operating point (local gradient, gradient difference, cost rate)."""

    v_l: float
    x: float
    cost: float
    scenario: str
    x_eq: float
    threshold: float = math.inf
    rate_scale: float = 1.0
    power_scale: float = 1.0


@dataclass(frozen=True)
class RateEstimate:
    """Floored instantaneous rate differences and the operating point they imply."""

    eps: float
    delta: float
    v_l: float
    x: float
    cost: float
    window: int


@dataclass(frozen=True)
class PriorityCoeffs:
    """Quadratic priority surface a_l*ql^2 + b_l*ql + a_r*qr^2 + b_r*qr."""

    a_l: float
    b_l: float
    a_r: float
    b_r: float
    gamma: float
    gamma_fallback: bool = False


def _bisect_increasing(fn, target: float, lo: float, hi: float,
                       tol: float = BISECT_TOL, max_iter: int = BISECT_MAX_ITER) -> float:
    """Root of fn(z) = target for nondecreasing fn on an expandable bracket."""
    while fn(hi) < target:
        hi *= 4.0
        if hi > _BRACKET_CAP:
            raise InfeasibleLoadError(
                f"target {target!r} unreachable within bisection bracket (cap {_BRACKET_CAP:g})")
    if fn(lo) > target:
        return lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        val = fn(mid)
        if abs(val - target) < tol:
            return mid
        if val < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _local_capacity(params: SystemParams) -> float:
    """Max local service rate under the optional power cap (inf when uncapped)."""
    if params.p_max is None:
        return math.inf
    return params.compute_scale / math.sqrt(params.switched_capacitance) * math.sqrt(params.p_max)


def solve_steady_state(params: SystemParams, rate_scale: float = 1.0,
                       power_scale: float = 1.0) -> SteadyState:
    """Solve the long-run flow-balance equations for the operating gradients.

    rate_scale / power_scale discount the channel-averaged transmit rate and
    power (used by the multi-terminal extension to account for the learned
    access frequency); both default to 1 for a dedicated server.

    Raises:
        InfeasibleLoadError: the load exceeds what transmission plus capped
            local computation can carry.
    """
    lam = params.arrival_rate
    slope = params.local_rate_slope
    vout = params.remote_rate

    def scaled_rate(x: float) -> float:
        return rate_scale * expected_tx_rate(x, params)

    if rate_scale > 0.0 and vout > 0.0:
        x_eq = _bisect_increasing(scaled_rate, vout, 1e-30, max(1.0, vout))
        threshold = scaled_rate(x_eq) + slope * x_eq
    else:
        # No usable offload path: everything must be computed locally.
        x_eq = 0.0
        threshold = 0.0

    if lam < threshold:
        scenario = SUFFICIENT
        v_l = _bisect_increasing(lambda v: scaled_rate(v) + slope * v, lam, 1e-30, max(1.0, lam))
        x = v_l
    else:
        scenario = CONSTRAINED
        x = x_eq
        v_l = (lam - scaled_rate(x)) / slope
    if v_l * slope > _local_capacity(params) + BISECT_TOL:
        raise InfeasibleLoadError(
            f"load {lam} packets/s needs local rate {v_l * slope:.3g} beyond the cap "
            f"{_local_capacity(params):.3g}")

    cost = _cost_rate(v_l, x, params, power_scale)
    return SteadyState(v_l=v_l, x=x, cost=cost, scenario=scenario, x_eq=x_eq,
                       threshold=threshold, rate_scale=rate_scale, power_scale=power_scale)


def _cost_rate(v_l: float, x: float, params: SystemParams, power_scale: float = 1.0) -> float:
    beta = params.power_weight
    quad = params.compute_scale**2 / (4.0 * params.switched_capacitance * beta)
    return beta * power_scale * expected_tx_power(x, params) + quad * v_l**2


class RateWindow:
    """Sliding window of per-slot queue flow measurements.

    Tracks what the policy offered to serve (rates it provisioned, converted
    to packets) against what actually arrived, for both queues.  Differences
    are per-second rates over the filled part of the window.
    """

    def __init__(self, params: SystemParams, window: int = 10):
        if window < 1:
            raise ValueError(f"window must cover at least one slot, got {window!r}")
        self.window = window
        self._tau = params.slot_duration
        self._slots = deque(maxlen=window)

    def record(self, arrived: float, local_offered: float,
               remote_capacity: float, remote_arrived: float) -> None:
        """Append one slot of packet counts (not rates)."""
        self._slots.append((arrived, local_offered, remote_capacity, remote_arrived))

    def reset(self) -> None:
        self._slots.clear()

    def local_diff(self) -> float:
        """(offered local service - arrivals) per second; 0 on an empty window."""
        if not self._slots:
            return 0.0
        span = len(self._slots) * self._tau
        return sum(s[1] - s[0] for s in self._slots) / span

    def remote_diff(self) -> float:
        """(offered server capacity - transfers in) per second; 0 on an empty window."""
        if not self._slots:
            return 0.0
        span = len(self._slots) * self._tau
        return sum(s[2] - s[3] for s in self._slots) / span


def estimate_from_diffs(eps_hat: float, delta_hat: float, params: SystemParams,
                        steady: SteadyState, window: int = 1) -> RateEstimate:
    """Solve the operating point implied by measured rate differences.

    Both differences are floored at their configured positive floors before
    solving, so a drained or perfectly balanced queue never produces a
    degenerate (or negative) priority weight.  In the sufficient scenario the
    local surplus is additionally capped at the classification margin: the
    closed form is only valid while the implied gradient stays below the
    server equilibrium point, so a transient measurement beyond it pins the
    estimate to the scenario boundary instead of leaving the valid domain.
    """
    eps = max(eps_hat, params.eps_floor)
    if steady.scenario == SUFFICIENT and math.isfinite(steady.threshold):
        # the margin cap wins over the floor when the load sits right at the
        # classification boundary: a finite remote weight needs eps strictly
        # inside the margin
        eps = min(eps, (steady.threshold - params.arrival_rate) * SCENARIO_MARGIN)
    delta = max(delta_hat, params.delta_floor)
    slope = params.local_rate_slope
    scale = steady.rate_scale

    def scaled_rate(x: float) -> float:
        return scale * expected_tx_rate(x, params)

    if steady.scenario == SUFFICIENT:
        v_l = _bisect_increasing(lambda v: scaled_rate(v) + slope * v,
                                 params.arrival_rate + eps, 1e-30, max(1.0, steady.v_l))
        x = v_l
    else:
        residual = params.remote_rate - delta
        if residual <= 0.0:
            x = 0.0
        else:
            x = _bisect_increasing(scaled_rate, residual, 1e-30, max(1.0, steady.x_eq))
        v_l = (params.arrival_rate + eps - scaled_rate(x)) / slope
    cost = _cost_rate(v_l, x, params, steady.power_scale)
    return RateEstimate(eps=eps, delta=delta, v_l=v_l, x=x, cost=cost, window=window)


def estimate_rates(stats: RateWindow, params: SystemParams, steady: SteadyState) -> RateEstimate:
    """Estimate the instantaneous operating point from a measurement window."""
    if stats.window < 1:
        raise ValueError("measurement window shorter than one slot")
    return estimate_from_diffs(stats.local_diff(), stats.remote_diff(), params,
                               steady, window=stats.window)


def _gamma_extreme(est: RateEstimate, steady: SteadyState) -> float:
    eps, delta = est.eps, est.delta
    gap = est.cost - steady.cost
    return ((steady.x + steady.v_l) * eps * delta + steady.v_l * eps**2) \
        / (2.0 * (eps + delta) * gap) + eps / (2.0 * (eps + delta))


def _gamma_interval(est: RateEstimate, steady: SteadyState):
    """Intersection of the three linear-in-gamma constraint intervals."""
    gap = est.cost - steady.cost
    a = gap / est.eps
    b = gap / est.delta
    lo, hi = 0.0, 1.0
    # x-window: x_c <= gamma*a - (1-gamma)*b <= x_s
    lo = max(lo, (est.x + b) / (a + b))
    hi = min(hi, (steady.x + b) / (a + b))
    # local-gradient window: v_ls <= gamma*a <= v_lc
    lo = max(lo, steady.v_l / a)
    hi = min(hi, est.v_l / a)
    return lo, hi


def priority_coeffs(est: RateEstimate, steady: SteadyState, params: SystemParams) -> PriorityCoeffs:
    """Coefficients of the quadratic priority surface at the estimated point.

    Raises:
        ScenarioInconsistencyError: in the sufficient scenario when the
            estimated local gradient already saturates the server (the
            system should have been classified constrained).
    """
    alpha, lam = params.delay_weight, params.arrival_rate
    gap = est.cost - steady.cost
    a_l = alpha / (2.0 * lam * est.eps)

    if steady.scenario == SUFFICIENT:
        drain = params.remote_rate - steady.rate_scale * expected_tx_rate(est.v_l, params)
        if drain <= 0.0:
            raise ScenarioInconsistencyError(
                f"server drain margin {drain:.3g} <= 0 at local gradient {est.v_l:.3g}; "
                "operating point belongs to the constrained scenario")
        return PriorityCoeffs(a_l=a_l, b_l=gap / est.eps,
                              a_r=alpha / (2.0 * lam * drain), b_r=0.0, gamma=1.0)

    a_r = alpha / (2.0 * lam * est.delta)
    fallback = False
    if gap <= 0.0:
        # Degenerate window (estimate at or below the steady point); the
        # constraint set is empty, fall back to the unit-interval clamp.
        gamma = min(max(_gamma_extreme(est, steady), 0.0), 1.0) if gap != 0.0 else 1.0
        fallback = True
    else:
        lo, hi = _gamma_interval(est, steady)
        if lo > hi:
            lo, hi = 0.0, 1.0
            fallback = True
        gamma = min(max(_gamma_extreme(est, steady), lo), hi)
    return PriorityCoeffs(a_l=a_l, b_l=gamma * gap / est.eps, a_r=a_r,
                          b_r=(1.0 - gamma) * gap / est.delta, gamma=gamma,
                          gamma_fallback=fallback)


def gradients(coeffs: PriorityCoeffs, q_local: float, q_remote: float):
    """Partial gradients (V_l, V_r) of the priority surface at the backlogs."""
    if q_local < 0.0 or q_remote < 0.0:
        raise ValueError(f"backlogs must be nonnegative, got ({q_local!r}, {q_remote!r})")
    return (2.0 * coeffs.a_l * q_local + coeffs.b_l,
            2.0 * coeffs.a_r * q_remote + coeffs.b_r)


def priority_value(coeffs: PriorityCoeffs, q_local: float, q_remote: float) -> float:
    """Priority surface value at the backlogs."""
    return (coeffs.a_l * q_local**2 + coeffs.b_l * q_local
            + coeffs.a_r * q_remote**2 + coeffs.b_r * q_remote)


def decide(v_l: float, v_r: float, gain: float, params: SystemParams) -> Decision:
    """Power pair for the current gradients and channel draw.

    Local power is quadratic in the local gradient; transmit power fills
    water up to B*(V_l - V_r)/beta over the inverted channel floor N0/H.
    The optional hard cap clamps both components afterwards.
    """
    if not gain > 0.0:
        raise ValueError(f"channel gain must be positive, got {gain!r}")
    beta = params.power_weight
    p_local = params.compute_scale**2 / (4.0 * params.switched_capacitance * beta**2) * v_l**2
    p_tx = max(params.packet_bandwidth / beta * (v_l - v_r) - params.noise_power / gain, 0.0)
    if params.p_max is not None and (p_local > params.p_max or p_tx > params.p_max):
        return Decision(min(p_local, params.p_max), min(p_tx, params.p_max), capped=True)
    return Decision(p_local, p_tx)


class WaterFillingPolicy:
    """Stateful closed-form policy: rate estimation plus water-filling powers.

    The per-slot flow measurements are fed back through ``observe``; until
    the window has any samples the estimate sits at the configured floors,
    which is also where it lands at a perfectly balanced steady state.

    The remote gradient is evaluated at the post-service backlog
    [Q_r - v_out*tau]^+: the server drains before this slot's transfer
    lands, so packets certain to be gone on arrival are in-flight work, not
    congestion (the fluid model has no such one-slot transit).
    """

    name = "proposed"

    def __init__(self, params: SystemParams, steady: Optional[SteadyState] = None,
                 window: int = 10, ema: Optional[float] = None):
        self.params = params
        self.steady = steady if steady is not None else solve_steady_state(params)
        self._window_len = window
        self._ema = ema
        self.window = RateWindow(params, window)
        self._ema_local: Optional[float] = None
        self._ema_remote: Optional[float] = None
        self.gamma_fallbacks = 0
        self.last_estimate: Optional[RateEstimate] = None

    def reset(self) -> None:
        self.window.reset()
        self._ema_local = None
        self._ema_remote = None
        self.gamma_fallbacks = 0
        self.last_estimate = None

    def _diffs(self):
        if self._ema is not None and self._ema_local is not None:
            return self._ema_local, self._ema_remote
        return self.window.local_diff(), self.window.remote_diff()

    def decide(self, q_local: float, q_remote: float, gain: float) -> Decision:
        eps_hat, delta_hat = self._diffs()
        est = estimate_from_diffs(eps_hat, delta_hat, self.params, self.steady,
                                  window=self._window_len)
        self.last_estimate = est
        coeffs = priority_coeffs(est, self.steady, self.params)
        if coeffs.gamma_fallback:
            self.gamma_fallbacks += 1
        congestion = max(q_remote - self.params.remote_rate * self.params.slot_duration, 0.0)
        v_l, v_r = gradients(coeffs, q_local, congestion)
        return decide(v_l, v_r, gain, self.params)

    def observe(self, arrived: float, local_offered: float,
                remote_capacity: float, remote_arrived: float) -> None:
        self.window.record(arrived, local_offered, remote_capacity, remote_arrived)
        if self._ema is not None:
            tau = self.params.slot_duration
            local = (local_offered - arrived) / tau
            remote = (remote_capacity - remote_arrived) / tau
            if self._ema_local is None:
                self._ema_local, self._ema_remote = local, remote
            else:
                w = self._ema
                self._ema_local = (1.0 - w) * self._ema_local + w * local
                self._ema_remote = (1.0 - w) * self._ema_remote + w * remote
