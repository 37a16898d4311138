"""Comparison policies behind the same decide/observe interface.

Five conventional schemes: a fixed-budget greedy throughput split (gt), a
CSI-only water filler (cowf), a local-queue-weighted water filler (qwwf), a
drift-plus-penalty controller (lodco), and a one-dimensional backlog-split
search (tso).  Only lodco looks at the remote queue.  Water levels and the
drift-penalty weight are calibrated offline so every scheme can be compared
at the same measured average power.
"""

import math
from dataclasses import dataclass, replace
from typing import Optional

from .params import SystemParams
from .policy import Decision
from .rates import expected_clipped_power, local_rate, tx_rate

__all__ = [
    "BaselineConfig",
    "UncalibratedError",
    "gt_decide",
    "cowf_decide",
    "qwwf_decide",
    "lodco_decide",
    "tso_decide",
    "make_baseline",
    "calibrate_cowf_level",
    "BASELINE_KINDS",
]

BASELINE_KINDS = ("gt", "cowf", "qwwf", "lodco", "tso")


class UncalibratedError(Exception):
    """A water-filling baseline was used before its level was calibrated."""


@dataclass(frozen=True)
class BaselineConfig:
    """Knobs for the comparison policies.

    power_budget is the per-slot budget for gt and the cap/inversion budget
    for tso; water_level drives cowf/qwwf and must be calibrated first;
    lyapunov_v trades queue pressure against power for lodco.
    """

    kind: str
    power_budget: float = 1e-4
    fixed_p_local: float = 0.0
    water_level: Optional[float] = None
    lyapunov_v: float = 1.0
    search_grid: int = 33
    queue_scale: float = 1.0
    queue_cap: float = 10.0
    refine_rounds: int = 3
    grid_p_max: float = 1.0

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if self.power_budget < 0.0 or self.fixed_p_local < 0.0:
            raise ValueError("budgets and fixed powers must be nonnegative")
        if self.search_grid < 2:
            raise ValueError(f"search grid needs >= 2 points, got {self.search_grid!r}")
        if self.lyapunov_v <= 0.0:
            raise ValueError(f"lyapunov weight must be positive, got {self.lyapunov_v!r}")


def _refined_argmin(objective, lo: float, hi: float, points: int, rounds: int) -> float:
    """Grid argmin with successive bracketing refinements (unimodal targets)."""
    best = lo
    for _ in range(rounds):
        width = (hi - lo) / (points - 1)
        values = [(objective(lo + i * width), lo + i * width) for i in range(points)]
        best = min(values)[1]
        lo, hi = max(best - width, lo), min(best + width, hi)
        if hi <= lo:
            break
    return best


def gt_decide(state, gain: float, cfg: BaselineConfig, params: SystemParams) -> Decision:
    """Split a fixed per-slot budget to maximize instantaneous throughput."""
    budget = cfg.power_budget
    if budget == 0.0:
        return Decision(0.0, 0.0)

    def neg_throughput(p_local: float) -> float:
        return -(local_rate(p_local, params) + tx_rate(budget - p_local, gain, params))

    p_local = _refined_argmin(neg_throughput, 0.0, budget, cfg.search_grid, cfg.refine_rounds)
    return Decision(p_local, budget - p_local)


def cowf_decide(state, gain: float, cfg: BaselineConfig, params: SystemParams) -> Decision:
    """Channel-only water filling at a pre-calibrated level."""
    if cfg.water_level is None:
        raise UncalibratedError("cowf needs a calibrated water level")
    p_tx = max(cfg.water_level - params.noise_power / gain, 0.0)
    return Decision(cfg.fixed_p_local, p_tx)


def qwwf_decide(state, gain: float, cfg: BaselineConfig, params: SystemParams) -> Decision:
    """Water filling with the level scaled by the local backlog."""
    if cfg.water_level is None:
        raise UncalibratedError("qwwf needs a calibrated water level")
    q_local = state[0]
    weight = min(q_local / cfg.queue_scale, cfg.queue_cap)
    p_tx = max(cfg.water_level * weight - params.noise_power / gain, 0.0)
    return Decision(cfg.fixed_p_local, p_tx)


def _power_grid(p_max: float, points: int):
    if points < 2:
        return [0.0, p_max]
    grid = [0.0]
    lo = p_max * 1e-6
    for i in range(points - 1):
        grid.append(lo * (p_max / lo) ** (i / max(points - 2, 1)))
    return grid


def lodco_decide(state, gain: float, cfg: BaselineConfig, params: SystemParams) -> Decision:
    """Drift-plus-penalty power pick over a log-spaced grid.

    Minimizes V*(P_l + P_t) - Q_l*v_l*tau - (Q_l - Q_r)*v_t*tau, the one-slot
    drift of the quadratic backlog plus a power penalty.  Task dropping from
    the original scheme is omitted.
    """
    q_local, q_remote = state[0], state[1]
    tau = params.slot_duration
    grid = _power_grid(cfg.grid_p_max, cfg.search_grid)

    def objective(p_local: float, p_tx: float) -> float:
        return (cfg.lyapunov_v * (p_local + p_tx)
                - q_local * local_rate(p_local, params) * tau
                - (q_local - q_remote) * tx_rate(p_tx, gain, params) * tau)

    best = (objective(0.0, 0.0), 0.0, 0.0)
    for p_l in grid:
        for p_t in grid:
            value = (objective(p_l, p_t), p_l, p_t)
            if value < best:
                best = value
    return Decision(best[1], best[2])


def _tso_powers(local_amount: float, offload_amount: float, gain: float,
                params: SystemParams) -> float:
    """Total power to clear the given packet amounts within one slot."""
    tau = params.slot_duration
    v_l = local_amount / tau
    v_t = offload_amount / tau
    p_local = params.switched_capacitance * (v_l / params.compute_scale) ** 2
    p_tx = (2.0 ** (v_t / params.packet_bandwidth) - 1.0) * params.noise_power / gain
    return p_local + p_tx


def tso_decide(state, gain: float, cfg: BaselineConfig, params: SystemParams) -> Decision:
    """One-dimensional search over the local/offload split of the backlog.

    For each offload fraction r the powers are recovered by inverting the
    rate laws for the implied per-slot amounts; amounts are scaled down when
    the budget cannot clear the whole backlog, and the split with the least
    unserved backlog (then least power) wins.
    """
    q_local = state[0]
    if q_local <= 0.0:
        return Decision(0.0, 0.0)
    budget = cfg.power_budget
    tau = params.slot_duration

    def feasible_scale(r: float) -> float:
        if _tso_powers(q_local * (1.0 - r), q_local * r, gain, params) <= budget:
            return 1.0
        lo, hi = 0.0, 1.0
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if _tso_powers(mid * q_local * (1.0 - r), mid * q_local * r, gain, params) <= budget:
                lo = mid
            else:
                hi = mid
        return lo

    best = None
    for i in range(cfg.search_grid):
        r = i / (cfg.search_grid - 1)
        scale = feasible_scale(r)
        local_amount = scale * q_local * (1.0 - r)
        offload_amount = scale * q_local * r
        power = _tso_powers(local_amount, offload_amount, gain, params)
        unserved = q_local - local_amount - offload_amount
        key = (unserved, power)
        if best is None or key < best[0]:
            v_l = local_amount / tau
            p_local = params.switched_capacitance * (v_l / params.compute_scale) ** 2
            best = (key, Decision(p_local, power - p_local))
    return best[1]


_DECIDERS = {
    "gt": gt_decide,
    "cowf": cowf_decide,
    "qwwf": qwwf_decide,
    "lodco": lodco_decide,
    "tso": tso_decide,
}


class BaselinePolicy:
    """Adapter giving the baseline rules the simulator's policy interface."""

    def __init__(self, cfg: BaselineConfig, params: SystemParams):
        self.cfg = cfg
        self.params = params
        self.name = cfg.kind
        self._decider = _DECIDERS[cfg.kind]

    def reset(self) -> None:
        pass

    def decide(self, q_local: float, q_remote: float, gain: float) -> Decision:
        return self._decider((q_local, q_remote), gain, self.cfg, self.params)

    def observe(self, arrived, local_offered, remote_capacity, remote_arrived) -> None:
        pass


def make_baseline(cfg: BaselineConfig, params: SystemParams) -> BaselinePolicy:
    return BaselinePolicy(cfg, params)


def calibrate_cowf_level(params: SystemParams, budget: float,
                         fixed_p_local: float = 0.0, tol: float = 1e-12) -> float:
    """Water level whose channel-average transmit power meets the budget.

    Uses the closed-form mean of (level - N0/H)^+ under the exponential
    gain, bisected to the requested tolerance; simulation then lands within
    sampling error of the budget.
    """
    target = budget - fixed_p_local
    if target <= 0.0:
        raise ValueError(f"budget {budget!r} does not cover the fixed local power")
    lo, hi = 0.0, max(target, 1e-9)
    while expected_clipped_power(hi, params) < target:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if abs(expected_clipped_power(mid, params) - target) < tol * max(target, 1.0):
            return mid
        if expected_clipped_power(mid, params) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
