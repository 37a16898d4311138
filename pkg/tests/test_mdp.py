"""Discretized MDP kernel, relative value iteration, and policy evaluation."""

import numpy as np
import pytest

from mecoffload.mdp import (
    build_mdp,
    channel_levels,
    default_action_grid,
    evaluate_policy_on_mdp,
    relative_value_iteration,
)
from mecoffload.params import sufficient_preset
from mecoffload.policy import Decision

PARAMS = sufficient_preset()

# tiny instance: 2x2 queue grid, 2 channel levels, 4 actions -> 8 states
TINY_ACTIONS = [(0.0, 0.0), (0.0, 1e-4), (1e-2, 0.0), (1e-2, 1e-4)]


def tiny_mdp(**kwargs):
    defaults = dict(q_max=1.0, queue_step=1.0, levels=2, actions=TINY_ACTIONS)
    defaults.update(kwargs)
    return build_mdp(PARAMS, **defaults)


class TestChannelLevels:
    def test_levels_average_to_mean_gain(self):
        for count in (2, 8, 16):
            levels = channel_levels(PARAMS, count)
            assert levels.mean() == pytest.approx(PARAMS.mean_channel_gain, rel=1e-12)
            assert np.all(np.diff(levels) > 0)


class TestBuild:
    def test_row_sums_are_probabilities(self):
        mdp = tiny_mdp()
        sums = np.asarray(mdp.kernel.sum(axis=1)).ravel()
        assert np.max(np.abs(sums - 1.0)) < 1e-10

    def test_row_sums_random_rows_default_instance(self):
        mdp = build_mdp(PARAMS, q_max=8.0, levels=4,
                        actions=default_action_grid(points=4))
        rng = np.random.default_rng(0)
        rows = rng.integers(0, mdp.kernel.shape[0], size=1000)
        for r in rows:
            row = mdp.kernel.getrow(int(r))
            assert abs(row.sum() - 1.0) < 1e-10

    def test_zero_arrivals_zero_actions_absorb_at_origin(self):
        mdp = tiny_mdp(arrival_dist=([0.0], [1.0]))
        row_cols, row_vals = mdp.queue_transition_row(0, 0, 0, 0.0, 0.0)
        assert row_vals.sum() == pytest.approx(1.0)
        assert set(row_cols[row_vals > 0]) == {0}

    def test_hand_computed_counting_chain(self):
        # Unit arrivals, no service anywhere: the local queue counts up and
        # pins at the top of the grid; the remote queue never moves.
        params = PARAMS.with_(remote_rate=0.0)
        mdp = build_mdp(params, q_max=2.0, levels=1, actions=[(0.0, 0.0)],
                        arrival_dist=([1.0], [1.0]))
        n_q = mdp.n_q
        for ql in range(3):
            cols, vals = mdp.queue_transition_row(ql, 0, 0, 0.0, 0.0)
            dist = {}
            for c, v in zip(cols, vals):
                if v > 0.0:
                    dist[int(c)] = dist.get(int(c), 0.0) + float(v)
            expected_ql = min(ql + 1, 2)
            assert dist == {expected_ql * n_q + 0: pytest.approx(1.0)}

    def test_hand_computed_fractional_service_split(self):
        # v_out*tau = 0.4 drains the remote queue to 0.6, which splits 40/60
        # between the neighbouring grid points.
        params = PARAMS.with_(remote_rate=4.0)  # 0.4 packets per slot
        mdp = build_mdp(params, q_max=2.0, levels=1, actions=[(0.0, 0.0)],
                        arrival_dist=([0.0], [1.0]))
        cols, vals = mdp.queue_transition_row(0, 1, 0, 0.0, 0.0)
        dist = {}
        for c, v in zip(cols, vals):
            dist[int(c)] = dist.get(int(c), 0.0) + float(v)
        assert dist[0] == pytest.approx(0.4)
        assert dist[1] == pytest.approx(0.6)


def enumerate_stationary_policies(mdp):
    """Independent oracle: evaluate every deterministic stationary policy.

    Builds each policy's queue-marginal chain from per-(state, action) rows
    and solves the stationary distribution by least squares, which is exact
    for these unichain instances.
    """
    n_q, levels = mdp.n_q, mdp.n_levels
    n_queue = n_q * n_q
    n_actions = len(mdp.actions)
    n_states = n_queue * levels

    rows = np.zeros((n_states, n_actions, n_queue))
    costs = np.zeros((n_states, n_actions))
    for ql in range(n_q):
        for qr in range(n_q):
            for h in range(levels):
                s = (ql * n_q + qr) * levels + h
                for a, (pl, pt) in enumerate(mdp.actions):
                    cols, vals = mdp.queue_transition_row(ql, qr, h, pl, pt)
                    np.add.at(rows[s, a], cols, vals)
                    costs[s, a] = mdp.stage_cost[a * n_states + s]

    best = np.inf
    ones = np.ones((1, n_queue))
    for assignment in range(n_actions ** n_states):
        actions = np.empty(n_states, dtype=int)
        rem = assignment
        for s in range(n_states):
            actions[s] = rem % n_actions
            rem //= n_actions
        chain = rows[np.arange(n_states), actions].reshape(n_queue, levels, n_queue).mean(axis=1)
        mean_cost = costs[np.arange(n_states), actions].reshape(n_queue, levels).mean(axis=1)
        system = np.vstack([chain.T - np.eye(n_queue), ones])
        rhs = np.zeros(n_queue + 1)
        rhs[-1] = 1.0
        mu = np.linalg.lstsq(system, rhs, rcond=None)[0]
        theta = float(mu @ mean_cost)
        best = min(best, theta)
    return best


class TestRvi:
    def test_idle_system_has_zero_cost(self):
        mdp = tiny_mdp(arrival_dist=([0.0], [1.0]))
        result = relative_value_iteration(mdp, tol=1e-10)
        assert abs(result.theta) < 1e-9
        # all-zero power is optimal everywhere on the reachable state
        assert result.policy[mdp.state_index(0, 0, 0)] == 0
        assert result.policy[mdp.state_index(0, 0, 1)] == 0

    def test_matches_exhaustive_policy_enumeration(self):
        mdp = tiny_mdp()
        result = relative_value_iteration(mdp, tol=1e-10)
        oracle = enumerate_stationary_policies(mdp)
        assert result.theta == pytest.approx(oracle, abs=1e-6)

    def test_anchor_invariance(self):
        mdp = tiny_mdp()
        a = relative_value_iteration(mdp, tol=1e-10, anchor=0)
        b = relative_value_iteration(mdp, tol=1e-10, anchor=5)
        assert abs(a.theta - b.theta) < 1e-8

    def test_larger_action_grid_never_costs_more(self):
        mdp_small = tiny_mdp()
        extra = TINY_ACTIONS + [(1e-3, 1e-5), (1e-4, 3e-4)]
        mdp_big = tiny_mdp(actions=extra)
        small = relative_value_iteration(mdp_small, tol=1e-10).theta
        big = relative_value_iteration(mdp_big, tol=1e-10).theta
        assert big <= small + 1e-9

    def test_values_monotone_in_backlog(self):
        mdp = build_mdp(PARAMS, q_max=6.0, levels=3, actions=default_action_grid(points=5))
        result = relative_value_iteration(mdp)
        values = result.values.reshape(mdp.n_q, mdp.n_q, mdp.n_levels).mean(axis=2)
        assert np.all(np.diff(values, axis=0) > -1e-7)
        assert np.all(np.diff(values, axis=1) > -1e-7)


class TestPolicyEvaluation:
    def test_optimal_policy_reproduces_theta(self):
        mdp = tiny_mdp()
        result = relative_value_iteration(mdp, tol=1e-10)
        evaluation = evaluate_policy_on_mdp(mdp, result.policy)
        assert abs(evaluation.theta - result.theta) < 1e-8

    def test_zero_policy_saturates_truncated_queue(self):
        mdp = build_mdp(PARAMS, q_max=10.0, levels=2, actions=[(0.0, 0.0)])
        evaluation = evaluate_policy_on_mdp(
            mdp, lambda ql, qr, h: Decision(0.0, 0.0))
        floor = 0.8 * PARAMS.delay_weight / PARAMS.arrival_rate * mdp.q_max
        assert evaluation.theta > floor
        assert evaluation.boundary_mass > 0.5

    def test_reducible_chain_reports_classes(self):
        # no arrivals, no powers, no server: every queue state is frozen in
        # place, so each is its own closed class with its own cost
        frozen = PARAMS.with_(remote_rate=0.0)
        mdp = build_mdp(frozen, q_max=1.0, queue_step=1.0, levels=2,
                        actions=TINY_ACTIONS, arrival_dist=([0.0], [1.0]))
        evaluation = evaluate_policy_on_mdp(mdp, lambda ql, qr, h: Decision(0.0, 0.0))
        assert evaluation.reducible
        assert len(evaluation.recurrent_classes) == mdp.n_q * mdp.n_q
        assert all(size == 1 for size, _ in evaluation.recurrent_classes)
