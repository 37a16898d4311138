"""Discrete-time slot engine: exact queue dynamics, runs, and replication.

One slot: observe (Q_l, Q_r, H), decide powers, serve, then append the
end-of-slot arrivals.  The local queue update is

    Q_l' = [Q_l - v_t*tau - v_l*tau]^+ + arrivals

and the remote queue drains before the slot's transfer lands,

    Q_r' = [Q_r - v_out*tau]^+ + actual_tx .

In the default "capped" transfer mode actual_tx = min(v_t*tau,
[Q_l - v_l*tau]^+), so transmission never moves packets the local queue does
not hold; "strict" mode credits v_t*tau unconditionally for oracle
comparisons against the uncapped recursion.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional

import numpy as np
from scipy import stats as _scipy_stats

from .env import Environment, EnvSpec
from .params import SystemParams
from .policy import Decision
from .rates import local_rate, tx_rate

__all__ = [
    "QueueState",
    "SlotRecord",
    "RunMetrics",
    "MonteCarloStats",
    "PolicyContractError",
    "step",
    "run",
    "monte_carlo",
    "stability_probe",
    "StabilityVerdict",
    "SLOT_RECORD_COLUMNS",
]


class PolicyContractError(Exception):
    """A policy produced an out-of-contract decision (negative/NaN power)."""


class QueueState(NamedTuple):
    local: float
    remote: float


@dataclass(frozen=True)
class SlotRecord:
    """One slot of the closed loop; queues are the start-of-slot backlogs."""

    slot: int
    gain: float
    arrivals: float
    p_local: float
    p_tx: float
    served_local: float
    served_tx: float
    served_remote: float
    q_local: float
    q_remote: float
    cost: float


SLOT_RECORD_COLUMNS = ("slot", "gain", "arrivals", "p_local", "p_tx", "served_local",
                       "served_tx", "served_remote", "q_local", "q_remote", "cost")


def step(state: QueueState, decision: Decision, gain: float, arrivals: float,
         v_out: float, params: SystemParams, compute_scale: Optional[float] = None,
         transfer: str = "capped", slot: int = 0):
    """Advance the cascade queues by one slot.

    Returns (next_state, record).  Total on finite nonnegative inputs; the
    transfer mode only changes what lands in the remote queue.
    """
    tau = params.slot_duration
    v_l = local_rate(decision.p_local, params, compute_scale)
    v_t = tx_rate(decision.p_tx, gain, params)

    drained = max(state.local - v_t * tau - v_l * tau, 0.0)
    next_local = drained + arrivals
    if transfer == "capped":
        actual_tx = min(v_t * tau, max(state.local - v_l * tau, 0.0))
    elif transfer == "strict":
        actual_tx = v_t * tau
    else:
        raise ValueError(f"unknown transfer mode {transfer!r}")
    served_remote = min(v_out * tau, state.remote)
    next_remote = max(state.remote - v_out * tau, 0.0) + actual_tx
    served_local = state.local - drained - actual_tx

    cost = (params.delay_weight / params.arrival_rate) * (state.local + state.remote) \
        + params.power_weight * (decision.p_local + decision.p_tx)
    record = SlotRecord(slot=slot, gain=gain, arrivals=arrivals,
                        p_local=decision.p_local, p_tx=decision.p_tx,
                        served_local=served_local, served_tx=actual_tx,
                        served_remote=served_remote, q_local=state.local,
                        q_remote=state.remote, cost=cost)
    return QueueState(next_local, next_remote), record


@dataclass
class RunMetrics:
    """Aggregates of one closed-loop run (after the warm-up prefix)."""

    avg_delay: float
    avg_power: float
    avg_cost: float
    max_q_local: float
    max_q_remote: float
    q_local_series: np.ndarray
    q_remote_series: np.ndarray
    final_q_local: float
    final_q_remote: float
    seed: int
    arrival_rate: float
    capped_slots: int = 0
    stale_fallbacks: int = 0
    records: Optional[List[SlotRecord]] = None


def run(params: SystemParams, policy, env: Environment, horizon: int,
        warmup: int = 0, keep_records: bool = False,
        transfer: str = "capped") -> RunMetrics:
    """Simulate the closed loop for ``horizon`` slots.

    The policy sees the observed (possibly stale) gain; realized service
    always uses the true draw.  Deterministic given (params, env seed).
    """
    if horizon < 1:
        raise ValueError(f"horizon must be at least one slot, got {horizon!r}")
    policy.reset()
    env.reset()
    tau = params.slot_duration
    state = QueueState(0.0, 0.0)
    q_l = np.empty(horizon)
    q_r = np.empty(horizon)
    power = np.empty(horizon)
    cost = np.empty(horizon)
    records: Optional[List[SlotRecord]] = [] if keep_records else None
    capped = 0
    fallbacks = 0

    for n in range(horizon):
        draws = env.slot(n)
        decision = policy.decide(state.local, state.remote, draws.observed_gain)
        if not (decision.p_local >= 0.0 and decision.p_tx >= 0.0) \
                or not (math.isfinite(decision.p_local) and math.isfinite(decision.p_tx)):
            raise PolicyContractError(
                f"{getattr(policy, 'name', type(policy).__name__)} returned powers "
                f"({decision.p_local!r}, {decision.p_tx!r}) at slot {n}")
        state, record = step(state, decision, draws.gain, draws.arrivals,
                             draws.v_out, params, compute_scale=draws.compute_scale,
                             transfer=transfer, slot=n)
        # rate-difference feedback: packets that actually left the local
        # queue vs packets that arrived; offered server capacity vs transfers
        served_local = record.served_local + record.served_tx
        policy.observe(draws.arrivals, served_local, draws.v_out * tau, record.served_tx)
        q_l[n] = record.q_local
        q_r[n] = record.q_remote
        power[n] = decision.p_local + decision.p_tx
        cost[n] = record.cost
        capped += int(decision.capped)
        fallbacks += int(draws.stale_fallback)
        if records is not None:
            records.append(record)

    sl = slice(warmup, None)
    rate = env.arrivals.rate
    mean_backlog = float(np.mean(q_l[sl] + q_r[sl]))
    return RunMetrics(
        avg_delay=mean_backlog / rate if rate > 0.0 else 0.0,
        avg_power=float(np.mean(power[sl])),
        avg_cost=float(np.mean(cost[sl])),
        max_q_local=float(np.max(q_l[sl])),
        max_q_remote=float(np.max(q_r[sl])),
        q_local_series=q_l[sl],
        q_remote_series=q_r[sl],
        final_q_local=state.local,
        final_q_remote=state.remote,
        seed=env.seed,
        arrival_rate=rate,
        capped_slots=capped,
        stale_fallbacks=fallbacks,
        records=records,
    )


def _mean_ci(values: np.ndarray, level: float = 0.95):
    mean = float(np.mean(values))
    if values.size < 2:
        return mean, 0.0
    half = float(_scipy_stats.t.ppf(0.5 + level / 2.0, values.size - 1)
                 * np.std(values, ddof=1) / math.sqrt(values.size))
    return mean, half


@dataclass
class MonteCarloStats:
    """Across-seed aggregates; CI fields are 95% half-widths."""

    runs: int
    delay_mean: float
    delay_ci: float
    power_mean: float
    power_ci: float
    cost_mean: float
    cost_ci: float
    per_run: List[RunMetrics] = field(repr=False, default_factory=list)

    @property
    def delays(self) -> np.ndarray:
        return np.array([m.avg_delay for m in self.per_run])

    @property
    def powers(self) -> np.ndarray:
        return np.array([m.avg_power for m in self.per_run])


def monte_carlo(params: SystemParams, policy_factory: Callable[[], object],
                env_spec: EnvSpec, runs: int, horizon: int, base_seed: int,
                warmup: int = 0) -> MonteCarloStats:
    """Replicate a run over seeds base_seed..base_seed+runs-1.

    Reusing the same seed range across policies gives common random numbers
    for paired comparisons.
    """
    if runs < 1:
        raise ValueError(f"need at least one run, got {runs!r}")
    metrics = []
    for s in range(runs):
        policy = policy_factory()
        env = env_spec.build(params, base_seed + s)
        metrics.append(run(params, policy, env, horizon, warmup=warmup))
    delays = np.array([m.avg_delay for m in metrics])
    powers = np.array([m.avg_power for m in metrics])
    costs = np.array([m.avg_cost for m in metrics])
    d_mean, d_ci = _mean_ci(delays)
    p_mean, p_ci = _mean_ci(powers)
    c_mean, c_ci = _mean_ci(costs)
    return MonteCarloStats(runs=runs, delay_mean=d_mean, delay_ci=d_ci,
                           power_mean=p_mean, power_ci=p_ci,
                           cost_mean=c_mean, cost_ci=c_ci, per_run=metrics)


@dataclass(frozen=True)
class StabilityVerdict:
    verdict: str
    local_drift: float
    remote_drift: float

    def __bool__(self) -> bool:
        return self.verdict == "stable"


def stability_probe(metrics: RunMetrics, min_slots: int = 100_000) -> StabilityVerdict:
    """Plateau test on the running second moments of both backlogs.

    Splits the series into thirds and compares the mean of Q^2 over the
    final third against the middle third; a relative change below 10% on
    both queues reads as stable.
    """
    n = metrics.q_local_series.size
    if n < min_slots:
        raise ValueError(f"stability probe needs >= {min_slots} slots, got {n}")

    def drift(series: np.ndarray) -> float:
        sq = series.astype(float) ** 2
        middle = float(np.mean(sq[n // 3: 2 * n // 3]))
        final = float(np.mean(sq[2 * n // 3:]))
        if middle == 0.0 and final == 0.0:
            return 0.0
        return abs(final - middle) / max(middle, 1e-300)

    local = drift(metrics.q_local_series)
    remote = drift(metrics.q_remote_series)
    verdict = "stable" if (local < 0.10 and remote < 0.10) else "suspect"
    return StabilityVerdict(verdict=verdict, local_drift=local, remote_drift=remote)
