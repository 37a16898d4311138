"""Brute-force oracle: discretized average-cost MDP solved exactly.

The continuous-state control problem is quantized onto an integer queue
grid with equiprobable channel levels and a finite power grid, giving a
7-8k state unichain MDP.  Relative value iteration then produces the
optimal average cost, which serves as the yardstick the closed-form policy
is measured against.  Real-valued queue updates spread their probability
mass over the two adjacent grid points (mean-preserving rounding), and the
grid is clipped at q_max with a boundary-occupancy diagnostic.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.stats import poisson as _poisson

from .params import SystemParams
from .policy import (
    SteadyState,
    decide,
    estimate_from_diffs,
    gradients,
    priority_coeffs,
    solve_steady_state,
)
from .rates import local_rate, tx_rate

__all__ = [
    "DiscreteMDP",
    "RviResult",
    "PolicyEvaluation",
    "RviConvergenceError",
    "build_mdp",
    "default_action_grid",
    "channel_levels",
    "relative_value_iteration",
    "evaluate_policy_on_mdp",
    "stationary_water_filling",
    "near_optimality_report",
]


class RviConvergenceError(Exception):
    """Relative value iteration failed to reach the span tolerance."""

    def __init__(self, message: str, span_trace: Sequence[float]):
        super().__init__(message)
        self.span_trace = list(span_trace)


def channel_levels(params: SystemParams, count: int) -> np.ndarray:
    """Equal-probability exponential quantiles, one conditional mean per bin."""
    edges = -np.log(1.0 - np.arange(count) / count)  # last bin edge is +inf
    lower = np.exp(-edges) * (1.0 + edges)
    upper = np.append(lower[1:], 0.0)
    return params.mean_channel_gain * count * (lower - upper)


def default_action_grid(p_max: float = 1.0, points: int = 9,
                        p_min: float = 1e-6) -> List[Tuple[float, float]]:
    """Cartesian grid of (p_local, p_tx) pairs: zero plus log-spaced powers."""
    axis = [0.0] + list(np.geomspace(p_min, p_max, points - 1))
    return [(pl, pt) for pl in axis for pt in axis]


def poisson_arrival_dist(mean_packets: float, tail: float = 1e-12):
    """Truncated Poisson pmf with the tail mass lumped into the last atom."""
    k_max = int(_poisson.ppf(1.0 - tail, mean_packets)) if mean_packets > 0 else 0
    values = np.arange(k_max + 1, dtype=float)
    probs = _poisson.pmf(values, mean_packets)
    probs[-1] += 1.0 - probs.sum()
    return values, probs


@dataclass
class DiscreteMDP:
    """Quantized control problem plus its assembled transition kernel.

    ``kernel`` maps rows ordered (action, state) with state = (ql*n_q + qr)*M
    + h to a distribution over next queue pairs; the channel level is i.i.d.
    uniform and is kept factored out of the kernel.
    """

    params: SystemParams
    q_max: float
    queue_step: float
    levels: np.ndarray
    actions: List[Tuple[float, float]]
    arrival_values: np.ndarray
    arrival_probs: np.ndarray
    kernel: sparse.csr_matrix = field(repr=False)
    stage_cost: np.ndarray = field(repr=False)
    n_q: int = 0
    n_states: int = 0

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def state_index(self, ql_idx: int, qr_idx: int, h_idx: int) -> int:
        return (ql_idx * self.n_q + qr_idx) * self.n_levels + h_idx

    def queue_values(self) -> np.ndarray:
        return np.arange(self.n_q) * self.queue_step

    def boundary_mass(self, queue_dist: np.ndarray) -> float:
        """Probability mass sitting on either clipped queue boundary."""
        grid = queue_dist.reshape(self.n_q, self.n_q)
        return float(grid[-1, :].sum() + grid[:, -1].sum() - grid[-1, -1])

    def queue_transition_row(self, ql_idx: int, qr_idx: int, h_idx: int,
                             p_local: float, p_tx: float):
        """Sparse next-queue distribution for one state and arbitrary powers."""
        cols, vals = _transition_entries(
            np.array([ql_idx]), np.array([qr_idx]), p_local, p_tx,
            float(self.levels[h_idx]), self)
        return cols.ravel(), vals.ravel()


def _spread(real_idx: np.ndarray, n_q: int):
    """Mean-preserving split of fractional grid positions onto neighbours."""
    clipped = np.clip(real_idx, 0.0, n_q - 1)
    low = np.floor(clipped)
    frac = clipped - low
    high = np.minimum(low + 1, n_q - 1)
    return low.astype(np.int64), high.astype(np.int64), 1.0 - frac, frac


def _transition_entries(ql_idx: np.ndarray, qr_idx: np.ndarray, p_local: float,
                        p_tx: float, gain: float, mdp: "DiscreteMDP"):
    """Vectorized next-state columns/probabilities for a batch of queue pairs.

    Returns (cols, vals) with shape (batch, K*4): two spread points for the
    local queue per arrival atom times two for the remote queue.
    """
    params = mdp.params
    tau = params.slot_duration
    step = mdp.queue_step
    n_q = mdp.n_q
    v_l_tau = local_rate(p_local, params) * tau
    v_t_tau = tx_rate(p_tx, gain, params) * tau

    ql = ql_idx * step
    qr = qr_idx * step
    drained = np.maximum(ql - v_t_tau - v_l_tau, 0.0)
    tx = np.minimum(v_t_tau, np.maximum(ql - v_l_tau, 0.0))
    remote = np.maximum(qr - params.remote_rate * tau, 0.0) + tx

    r_lo, r_hi, r_wlo, r_whi = _spread(remote / step, n_q)
    arrivals = mdp.arrival_values[None, :]
    l_real = (drained[:, None] + arrivals) / step
    l_lo, l_hi, l_wlo, l_whi = _spread(l_real, n_q)

    # batch x K x 2 (local spread) x 2 (remote spread)
    l_cols = np.stack([l_lo, l_hi], axis=-1)
    l_vals = np.stack([l_wlo, l_whi], axis=-1) * mdp.arrival_probs[None, :, None]
    cols = l_cols[:, :, :, None] * n_q + np.stack([r_lo, r_hi], axis=-1)[:, None, None, :]
    vals = l_vals[:, :, :, None] * np.stack([r_wlo, r_whi], axis=-1)[:, None, None, :]
    batch = ql_idx.shape[0]
    return cols.reshape(batch, -1), vals.reshape(batch, -1)


def build_mdp(params: SystemParams, q_max: float = 30.0, queue_step: float = 1.0,
              levels: int = 8, actions: Optional[List[Tuple[float, float]]] = None,
              arrival_dist: Optional[Tuple[Sequence[float], Sequence[float]]] = None) -> DiscreteMDP:
    """Assemble the quantized MDP with the capped-transfer queue dynamics.

    arrival_dist overrides the default truncated Poisson(lambda*tau) with an
    explicit (values, probabilities) pair, e.g. a deterministic arrival.
    """
    if actions is None:
        actions = default_action_grid()
    if not actions:
        raise ValueError("action grid must be nonempty")
    n_q = int(round(q_max / queue_step)) + 1
    if n_q < 2:
        raise ValueError("queue grid needs at least two points")
    gains = channel_levels(params, levels)
    if arrival_dist is None:
        values, probs = poisson_arrival_dist(params.arrival_rate * params.slot_duration)
    else:
        values = np.asarray(arrival_dist[0], dtype=float)
        probs = np.asarray(arrival_dist[1], dtype=float)
        if abs(probs.sum() - 1.0) > 1e-12 or np.any(probs < 0.0):
            raise ValueError("arrival probabilities must be a distribution")

    mdp = DiscreteMDP(params=params, q_max=q_max, queue_step=queue_step,
                      levels=gains, actions=list(actions), arrival_values=values,
                      arrival_probs=probs, kernel=None, stage_cost=None,
                      n_q=n_q, n_states=n_q * n_q * levels)

    ql_grid, qr_grid = np.meshgrid(np.arange(n_q), np.arange(n_q), indexing="ij")
    ql_flat = ql_grid.ravel()
    qr_flat = qr_grid.ravel()
    n_queue_states = n_q * n_q
    nnz_per_row = len(values) * 4

    blocks = []
    for p_local, p_tx in actions:
        rows_cols = np.empty((levels, n_queue_states, nnz_per_row), dtype=np.int64)
        rows_vals = np.empty((levels, n_queue_states, nnz_per_row))
        for h_idx, gain in enumerate(gains):
            cols, vals = _transition_entries(ql_flat, qr_flat, p_local, p_tx,
                                             float(gain), mdp)
            rows_cols[h_idx] = cols
            rows_vals[h_idx] = vals
        # rows ordered to match state index (ql*n_q + qr)*levels + h
        cols = rows_cols.transpose(1, 0, 2).reshape(-1, nnz_per_row)
        vals = rows_vals.transpose(1, 0, 2).reshape(-1, nnz_per_row)
        indptr = np.arange(0, cols.size + 1, nnz_per_row)
        block = sparse.csr_matrix((vals.ravel(), cols.ravel(), indptr),
                                  shape=(n_queue_states * levels, n_queue_states))
        block.sum_duplicates()
        blocks.append(block)
    mdp.kernel = sparse.vstack(blocks, format="csr")

    queue_cost = (params.delay_weight / params.arrival_rate) \
        * (ql_flat + qr_flat) * queue_step
    per_state = np.repeat(queue_cost, levels)
    power = np.array([params.power_weight * (pl + pt) for pl, pt in actions])
    mdp.stage_cost = (power[:, None] + per_state[None, :]).ravel()
    return mdp


@dataclass
class RviResult:
    theta: float
    values: np.ndarray
    policy: np.ndarray
    sweeps: int
    span: float
    boundary_mass: Optional[float] = None


def _bellman(mdp: DiscreteMDP, v: np.ndarray):
    n_actions = len(mdp.actions)
    w = v.reshape(-1, mdp.n_levels).mean(axis=1)
    q = mdp.stage_cost + mdp.kernel @ np.repeat(w, 1)  # kernel maps to queue dist
    q = q.reshape(n_actions, mdp.n_states)
    best = q.argmin(axis=0)
    return q.min(axis=0), best


def relative_value_iteration(mdp: DiscreteMDP, tol: float = 1e-8,
                             max_sweeps: int = 100_000, anchor: int = 0) -> RviResult:
    """Average-cost optimum by anchored value iteration with span stopping.

    Raises:
        RviConvergenceError: span still above tol after max_sweeps, with the
            recent span trace attached for diagnosis.
    """
    v = np.zeros(mdp.n_states)
    span_trace: List[float] = []
    for sweep in range(1, max_sweeps + 1):
        tv, policy = _bellman(mdp, v)
        diff = tv - v
        span = float(diff.max() - diff.min())
        span_trace.append(span)
        theta = float(0.5 * (diff.max() + diff.min()))
        v = tv - tv[anchor]
        if span < tol:
            return RviResult(theta=theta, values=v, policy=policy,
                             sweeps=sweep, span=span)
    raise RviConvergenceError(
        f"span {span_trace[-1]:.3e} > {tol:g} after {max_sweeps} sweeps",
        span_trace[-200:])


@dataclass
class PolicyEvaluation:
    theta: float
    queue_dist: np.ndarray
    recurrent_classes: List[Tuple[int, float]]
    boundary_mass: float

    @property
    def reducible(self) -> bool:
        return len(self.recurrent_classes) > 1


def _induced_chain(mdp: DiscreteMDP, action_for_state: Callable[[int, int, int], Tuple[float, float]]):
    """Queue-marginal kernel and mean stage cost under a stationary policy.

    The channel level is i.i.d., so the queue pair alone is Markov once the
    per-level transitions are averaged; this keeps the chain at n_q^2 states.
    """
    n_q, levels = mdp.n_q, mdp.n_levels
    n_queue_states = n_q * n_q
    weight = 1.0 / levels
    rows, cols, vals = [], [], []
    mean_cost = np.zeros(n_queue_states)
    mean_local = np.zeros(n_queue_states)
    mean_tx_in = np.zeros(n_queue_states)
    tau = mdp.params.slot_duration
    step = mdp.queue_step
    queue_cost = mdp.params.delay_weight / mdp.params.arrival_rate
    for ql in range(n_q):
        for qr in range(n_q):
            q_idx = ql * n_q + qr
            for h_idx, gain in enumerate(mdp.levels):
                p_local, p_tx = action_for_state(ql, qr, h_idx)
                c, v = mdp.queue_transition_row(ql, qr, h_idx, p_local, p_tx)
                rows.append(np.full(c.size, q_idx))
                cols.append(c)
                vals.append(v * weight)
                v_l = local_rate(p_local, mdp.params)
                v_t = tx_rate(p_tx, float(gain), mdp.params)
                mean_cost[q_idx] += weight * (
                    queue_cost * (ql + qr) * step
                    + mdp.params.power_weight * (p_local + p_tx))
                # actually served packets per second, as the estimator sees them
                mean_local[q_idx] += weight * min((v_l + v_t) * tau, ql * step) / tau
                mean_tx_in[q_idx] += weight * min(v_t * tau, max(ql * step - v_l * tau, 0.0)) / tau
    chain = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_queue_states, n_queue_states))
    chain.eliminate_zeros()  # zero-weight spread entries are not edges
    return chain, mean_cost, mean_local, mean_tx_in


def _stationary_distribution(chain: sparse.csr_matrix, tol: float = 1e-10,
                             max_iter: int = 200_000) -> np.ndarray:
    """Damped power iteration from the empty-queues state."""
    n = chain.shape[0]
    mu = np.zeros(n)
    mu[0] = 1.0
    transpose = chain.T.tocsr()
    for _ in range(max_iter):
        nxt = 0.5 * mu + 0.5 * (transpose @ mu)
        nxt /= nxt.sum()
        if np.abs(nxt - mu).sum() < tol:
            return nxt
        mu = nxt
    return mu


def evaluate_policy_on_mdp(mdp: DiscreteMDP, policy) -> PolicyEvaluation:
    """Average cost of a stationary policy on the discretized chain.

    ``policy`` is either a callable (q_local, q_remote, gain) -> Decision or
    an RVI action-index table.  Reducible induced chains are reported with
    one (size, cost) entry per recurrent class.
    """
    if isinstance(policy, np.ndarray):
        table = policy

        def action_for_state(ql, qr, h_idx):
            return mdp.actions[table[mdp.state_index(ql, qr, h_idx)]]
    else:
        step_vals = mdp.queue_step

        def action_for_state(ql, qr, h_idx):
            decision = policy(ql * step_vals, qr * step_vals, float(mdp.levels[h_idx]))
            return decision.p_local, decision.p_tx

    chain, mean_cost, _, _ = _induced_chain(mdp, action_for_state)
    mu = _stationary_distribution(chain)
    theta = float(mu @ mean_cost)

    classes = []
    n_comp, labels = connected_components(chain, directed=True, connection="strong")
    if n_comp > 1:
        # recurrent classes are the strongly connected components without
        # outgoing probability mass
        for comp in range(n_comp):
            members = np.nonzero(labels == comp)[0]
            sub = chain[members][:, members]
            if abs(sub.sum() - len(members)) < 1e-9:
                local_mu = _stationary_distribution(sub)
                classes.append((len(members), float(local_mu @ mean_cost[members])))
    if not classes:
        classes = [(chain.shape[0], theta)]
    return PolicyEvaluation(theta=theta, queue_dist=mu,
                            recurrent_classes=classes,
                            boundary_mass=mdp.boundary_mass(mu))


def stationary_water_filling(mdp: DiscreteMDP, steady: Optional[SteadyState] = None,
                             damping: float = 0.5, tol: float = 1e-6,
                             max_rounds: int = 80):
    """Stationary surrogate of the closed-form policy on the discrete chain.

    The dynamic policy estimates its rate differences from a sliding window;
    its long-run behaviour corresponds to the fixed point where the assumed
    differences equal the stationary expectations they induce.  A damped
    iteration finds that fixed point (the estimate-to-service map is
    monotone decreasing, so the iteration contracts).
    """
    params = mdp.params
    if steady is None:
        steady = solve_steady_state(params)
    eps = max(params.eps_floor, 1.0)
    delta = max(params.delta_floor, 1.0)
    decide_fn = None
    for _ in range(max_rounds):
        est = estimate_from_diffs(eps, delta, params, steady)
        coeffs = priority_coeffs(est, steady, params)

        def decide_fn(q_local, q_remote, gain, _c=coeffs):
            congestion = max(q_remote - params.remote_rate * params.slot_duration, 0.0)
            v_l, v_r = gradients(_c, q_local, congestion)
            return decide(v_l, v_r, gain, params)

        def action_for_state(ql, qr, h_idx):
            d = decide_fn(ql * mdp.queue_step, qr * mdp.queue_step, float(mdp.levels[h_idx]))
            return d.p_local, d.p_tx

        chain, _, mean_local, mean_tx_in = _induced_chain(mdp, action_for_state)
        mu = _stationary_distribution(chain, tol=1e-9)
        eps_meas = float(mu @ mean_local) - params.arrival_rate
        delta_meas = params.remote_rate - float(mu @ mean_tx_in)
        eps_next = eps + damping * (max(eps_meas, params.eps_floor) - eps)
        delta_next = delta + damping * (max(delta_meas, params.delta_floor) - delta)
        moved = abs(eps_next - eps) / (1.0 + eps) + abs(delta_next - delta) / (1.0 + delta)
        eps, delta = eps_next, delta_next
        if moved < tol:
            break
    return decide_fn, eps, delta


def near_optimality_report(params: SystemParams, q_max: float = 30.0,
                           levels: int = 8, tol: float = 1e-8):
    """Build the default desk-scale instance and compare policy vs optimum."""
    mdp = build_mdp(params, q_max=q_max, levels=levels)
    result = relative_value_iteration(mdp, tol=tol)
    optimal_eval = evaluate_policy_on_mdp(mdp, result.policy)
    result.boundary_mass = optimal_eval.boundary_mass
    decide_fn, eps, delta = stationary_water_filling(mdp)
    policy_eval = evaluate_policy_on_mdp(mdp, decide_fn)
    gap = (policy_eval.theta - result.theta) / result.theta
    return {
        "theta_optimal": result.theta,
        "theta_policy": policy_eval.theta,
        "relative_gap": gap,
        "sweeps": result.sweeps,
        "boundary_mass_optimal": optimal_eval.boundary_mass,
        "boundary_mass_policy": policy_eval.boundary_mass,
        "fixed_point_eps": eps,
        "fixed_point_delta": delta,
        "mdp": mdp,
        "rvi": result,
    }
