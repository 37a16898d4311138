"""Multi-terminal multi-server extension with learned access ratios.

Each terminal prices every server with the single-pair closed form, but the
channel-averaged transmit power and rate are discounted by exponentially
averaged access frequencies (a terminal granted a server only part of the
time sees proportionally less expected service).  Per slot, terminals post
candidate powers for every server, and a central assignment grants at most
one terminal per server and one server per terminal by minimizing the total
access benefit score.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .env import ARRIVAL_STREAM, CHANNEL_STREAM, SERVICE_STREAM, make_stream
from .params import SystemParams
from .policy import (
    Decision,
    RateWindow,
    decide,
    estimate_from_diffs,
    gradients,
    priority_coeffs,
    solve_steady_state,
)
from .rates import local_rate, tx_rate

__all__ = [
    "FleetConfig",
    "FleetState",
    "AccessRatios",
    "FleetEnvironment",
    "FleetPolicy",
    "FleetMetrics",
    "update_ratios",
    "per_pair_coeffs",
    "assign",
    "fleet_step",
    "run_fleet",
]

# access-ratio scales are quantized for the steady-state cache; the priority
# surface is smooth in the ratio so 1e-3 granularity is below estimation noise
_RATIO_QUANTUM = 1e-3


@dataclass(frozen=True)
class FleetConfig:
    """Shared terminal parameters plus fleet shape and learning knobs."""

    params: SystemParams
    terminals: int
    servers: int
    server_rate: Optional[float] = None  # defaults to params.remote_rate
    smoothing: float = 0.05
    window: int = 10
    learning: bool = True
    control_delay: float = 0.0
    attribute_remote_share: bool = False

    def __post_init__(self):
        if self.terminals < 1 or self.servers < 1:
            raise ValueError("fleet needs at least one terminal and one server")
        if not 0.0 < self.smoothing <= 1.0:
            raise ValueError(f"smoothing must be in (0, 1], got {self.smoothing!r}")

    @property
    def rate_per_server(self) -> float:
        return self.params.remote_rate if self.server_rate is None else self.server_rate


@dataclass
class FleetState:
    q_local: np.ndarray
    q_remote: np.ndarray


@dataclass
class AccessRatios:
    """EMA access frequencies scaling expected power (hat) and rate (tilde)."""

    power_share: np.ndarray
    rate_share: np.ndarray
    smoothing: float = 0.05

    @classmethod
    def optimistic(cls, terminals: int, servers: int, smoothing: float = 0.05) -> "AccessRatios":
        shape = (terminals, servers)
        return cls(np.ones(shape), np.ones(shape), smoothing)


def update_ratios(ratios: AccessRatios, granted: np.ndarray,
                  realized_power: Optional[np.ndarray] = None,
                  realized_rate: Optional[np.ndarray] = None) -> AccessRatios:
    """EMA step toward this slot's access indicators.

    When realized powers/rates are supplied, a grant that moved no power
    (respectively no packets) does not count toward that share: the ratios
    discount the channel-average expectations, so only exercised access
    matters.
    """
    grant = np.asarray(granted, dtype=float)
    power_grant = grant if realized_power is None else grant * (np.asarray(realized_power) > 0.0)
    rate_grant = grant if realized_rate is None else grant * (np.asarray(realized_rate) > 0.0)
    eta = ratios.smoothing
    return AccessRatios(
        power_share=(1.0 - eta) * ratios.power_share + eta * power_grant,
        rate_share=(1.0 - eta) * ratios.rate_share + eta * rate_grant,
        smoothing=eta,
    )


def per_pair_coeffs(params: SystemParams, power_share: float, rate_share: float,
                    eps_hat: float, delta_hat: float, cache: Optional[Dict] = None):
    """Priority coefficients of one terminal/server pair at learned ratios.

    Raises InfeasibleLoadError (from the steady-state solver) when the
    discounted offload path cannot carry the load, e.g. a vanishing rate
    share against a capped local CPU.
    """
    hat = round(power_share / _RATIO_QUANTUM) * _RATIO_QUANTUM
    tilde = round(rate_share / _RATIO_QUANTUM) * _RATIO_QUANTUM
    key = (hat, tilde)
    steady = None if cache is None else cache.get(key)
    if steady is None:
        steady = solve_steady_state(params, rate_scale=tilde, power_scale=hat)
        if cache is not None:
            cache[key] = steady
    est = estimate_from_diffs(eps_hat, delta_hat, params, steady)
    return priority_coeffs(est, steady, params), steady, est


def _enumerate_assignments(scores: np.ndarray) -> np.ndarray:
    """Exact argmin over feasible grant matrices (row/column sums <= 1).

    Deterministic: candidates are explored in lexicographic terminal order
    and a new optimum must be strictly better, so the empty grant wins ties
    and earlier pairs win among equal-score matchings.
    """
    terminals, servers = scores.shape
    best_total = [0.0]
    best = [np.zeros_like(scores, dtype=int)]

    def explore(i: int, used: int, total: float, chosen: List[Tuple[int, int]]):
        if i == terminals:
            if total < best_total[0] - 0.0:
                best_total[0] = total
                grid = np.zeros_like(scores, dtype=int)
                for a, b in chosen:
                    grid[a, b] = 1
                best[0] = grid
            return
        explore(i + 1, used, total, chosen)  # terminal i skips this slot
        for j in range(servers):
            if not used & (1 << j):
                chosen.append((i, j))
                explore(i + 1, used | (1 << j), total + scores[i, j], chosen)
                chosen.pop()

    explore(0, 0, 0.0, [])
    return best[0]


def assign(scores: np.ndarray) -> np.ndarray:
    """Minimum-total-score access grant under one-to-one feasibility.

    Scores are access deltas (cost with the grant minus cost without), so
    pairs with nonnegative scores are never granted.  Exhaustive enumeration
    up to 20 pairs, optimal bipartite matching with skip columns beyond.
    """
    scores = np.asarray(scores, dtype=float)
    terminals, servers = scores.shape
    if terminals * servers <= 20:
        return _enumerate_assignments(scores)
    # pad with per-terminal skip columns, nudge ties toward low indices
    scale = float(np.max(np.abs(scores))) or 1.0
    tie = (np.arange(terminals)[:, None] * servers
           + np.arange(servers)[None, :] + 1.0) * (1e-12 * scale)
    padded = np.hstack([np.minimum(scores, 0.0) + tie, np.zeros((terminals, terminals))])
    rows, cols = linear_sum_assignment(padded)
    grant = np.zeros((terminals, servers), dtype=int)
    for r, c in zip(rows, cols):
        if c < servers and scores[r, c] < 0.0:
            grant[r, c] = 1
    return grant


@dataclass
class FleetDraws:
    gains: np.ndarray
    arrivals: np.ndarray
    v_out: np.ndarray


class FleetEnvironment:
    """Per-terminal arrival/channel streams and per-server service streams.

    Stream layout matches the single-pair environment member-wise, so a
    1x1 fleet consumes exactly the draws a single-terminal run would.
    """

    def __init__(self, config: FleetConfig, seed: int):
        self.config = config
        self.seed = int(seed)
        self.reset()

    def reset(self) -> None:
        cfg = self.config
        self._channel = [make_stream(self.seed, i, CHANNEL_STREAM) for i in range(cfg.terminals)]
        self._arrival = [make_stream(self.seed, i, ARRIVAL_STREAM) for i in range(cfg.terminals)]
        self._service = [make_stream(self.seed, j, SERVICE_STREAM) for j in range(cfg.servers)]

    def slot(self, n: int) -> FleetDraws:
        cfg = self.config
        gains = np.empty((cfg.terminals, cfg.servers))
        for i in range(cfg.terminals):
            gains[i] = self._channel[i].exponential(cfg.params.mean_channel_gain,
                                                    size=cfg.servers)
        tau = cfg.params.slot_duration
        arrivals = np.array([float(self._arrival[i].poisson(cfg.params.arrival_rate * tau))
                             for i in range(cfg.terminals)])
        v_out = np.full(cfg.servers, cfg.rate_per_server)
        return FleetDraws(gains=gains, arrivals=arrivals, v_out=v_out)


def fleet_step(state: FleetState, p_local: np.ndarray, p_tx: np.ndarray,
               grant: np.ndarray, draws: FleetDraws, params: SystemParams):
    """Advance all queues one slot under the granted transfers.

    Feasibility (at most one server per terminal) means each terminal's
    transfer cap applies to a single granted link.
    """
    tau = params.slot_duration
    terminals, servers = grant.shape
    next_local = state.q_local.copy()
    inflow = np.zeros(servers)
    tx_amounts = np.zeros((terminals, servers))
    served_local = np.zeros(terminals)
    for i in range(terminals):
        v_l = local_rate(p_local[i], params)
        v_t_total = 0.0
        for j in range(servers):
            if grant[i, j]:
                v_t_total += tx_rate(p_tx[i, j], draws.gains[i, j], params)
        drained = max(state.q_local[i] - v_t_total * tau - v_l * tau, 0.0)
        actual_tx = min(v_t_total * tau, max(state.q_local[i] - v_l * tau, 0.0))
        served_local[i] = state.q_local[i] - drained - actual_tx
        next_local[i] = drained + draws.arrivals[i]
        for j in range(servers):
            if grant[i, j]:
                tx_amounts[i, j] = actual_tx
                inflow[j] += actual_tx
    next_remote = np.maximum(state.q_remote - draws.v_out * tau, 0.0) + inflow
    return FleetState(next_local, next_remote), tx_amounts, served_local


@dataclass
class FleetMetrics:
    avg_delay: float
    per_terminal_delay: np.ndarray
    avg_power: float
    per_terminal_power: np.ndarray
    max_q_local: float
    max_q_remote: float
    q_local_series: np.ndarray = field(repr=False)
    q_remote_series: np.ndarray = field(repr=False)
    attributed_delay: Optional[np.ndarray] = None
    seed: int = 0


class FleetPolicy:
    """Closed-form water filling across a fleet with learned access ratios."""

    def __init__(self, config: FleetConfig):
        self.config = config
        params = config.params
        self.pair_params = params if config.server_rate is None \
            else params.with_(remote_rate=config.server_rate)
        self.reset()

    def reset(self) -> None:
        cfg = self.config
        self.ratios = AccessRatios.optimistic(cfg.terminals, cfg.servers, cfg.smoothing)
        self._steady_cache: Dict = {}
        self._local_windows = [RateWindow(cfg.params, cfg.window) for _ in range(cfg.terminals)]
        self._remote_windows = [RateWindow(cfg.params, cfg.window) for _ in range(cfg.servers)]

    def decide(self, state: FleetState, gains: np.ndarray):
        """Candidate powers per pair plus the grant matrix for this slot."""
        cfg = self.config
        params = self.pair_params
        I, J = cfg.terminals, cfg.servers
        p_tx = np.zeros((I, J))
        p_local_cand = np.zeros((I, J))
        scores = np.zeros((I, J))
        for i in range(I):
            eps_hat = self._local_windows[i].local_diff()
            for j in range(J):
                delta_hat = self._remote_windows[j].remote_diff()
                coeffs, steady, est = per_pair_coeffs(
                    params, float(self.ratios.power_share[i, j]),
                    float(self.ratios.rate_share[i, j]), eps_hat, delta_hat,
                    cache=self._steady_cache)
                congestion = max(float(state.q_remote[j])
                                 - params.remote_rate * params.slot_duration, 0.0)
                v_l, v_r = gradients(coeffs, float(state.q_local[i]), congestion)
                d = decide(v_l, v_r, float(gains[i, j]), params)
                p_tx[i, j] = d.p_tx
                p_local_cand[i, j] = d.p_local
                rate = tx_rate(d.p_tx, float(gains[i, j]), params)
                scores[i, j] = params.power_weight * d.p_tx - (v_l - v_r) * rate
        grant = assign(scores)
        p_local = np.zeros(I)
        for i in range(I):
            granted = np.nonzero(grant[i])[0]
            # local power follows the pair this terminal acts on this slot
            j_star = granted[0] if granted.size else int(np.argmin(scores[i]))
            p_local[i] = p_local_cand[i, j_star]
        return p_local, p_tx * grant, grant

    def observe(self, draws: FleetDraws, served_local: np.ndarray,
                tx_amounts: np.ndarray, grant: np.ndarray,
                p_tx: np.ndarray) -> None:
        cfg = self.config
        params = self.pair_params
        tau = params.slot_duration
        for i in range(cfg.terminals):
            # packets that actually left this terminal's queue, as in the
            # single-pair loop
            served = served_local[i] + tx_amounts[i].sum()
            self._local_windows[i].record(float(draws.arrivals[i]), float(served), 0.0, 0.0)
        for j in range(cfg.servers):
            self._remote_windows[j].record(0.0, 0.0, float(draws.v_out[j]) * tau,
                                           float(tx_amounts[:, j].sum()))
        if cfg.learning:
            self.ratios = update_ratios(self.ratios, grant, realized_power=p_tx,
                                        realized_rate=p_tx)


def run_fleet(config: FleetConfig, seed: int, horizon: int,
              policy: Optional[FleetPolicy] = None) -> FleetMetrics:
    """Closed-loop fleet simulation, deterministic per seed."""
    if policy is None:
        policy = FleetPolicy(config)
    policy.reset()
    env = FleetEnvironment(config, seed)
    params = config.params
    I, J = config.terminals, config.servers
    state = FleetState(np.zeros(I), np.zeros(J))
    q_l = np.empty((horizon, I))
    q_r = np.empty((horizon, J))
    delay = np.zeros((horizon, I))
    power = np.zeros((horizon, I))
    share_num = np.zeros((I, J))  # cumulative transfers for attribution
    attributed = np.zeros((horizon, I)) if config.attribute_remote_share else None

    for n in range(horizon):
        draws = env.slot(n)
        p_local, p_tx, grant = policy.decide(state, draws.gains)
        q_l[n] = state.q_local
        q_r[n] = state.q_remote
        remote_total = float(state.q_remote.sum())
        delay[n] = (state.q_local + remote_total) / params.arrival_rate + config.control_delay
        power[n] = p_local + p_tx.sum(axis=1)
        if attributed is not None:
            totals = share_num.sum(axis=0)
            share = np.divide(share_num, totals, out=np.full_like(share_num, 1.0 / I),
                              where=totals > 0.0)
            attributed[n] = (state.q_local + share @ state.q_remote) / params.arrival_rate
        state, tx_amounts, served_local = fleet_step(state, p_local, p_tx, grant,
                                                     draws, params)
        share_num += tx_amounts
        policy.observe(draws, served_local, tx_amounts, grant, p_tx)

    per_delay = delay.mean(axis=0)
    per_power = power.mean(axis=0)
    return FleetMetrics(
        avg_delay=float(per_delay.mean()),
        per_terminal_delay=per_delay,
        avg_power=float(per_power.mean()),
        per_terminal_power=per_power,
        max_q_local=float(q_l.max()),
        max_q_remote=float(q_r.max()),
        q_local_series=q_l,
        q_remote_series=q_r,
        attributed_delay=attributed.mean(axis=0) if attributed is not None else None,
        seed=seed,
    )
