import itertools

import numpy as np
import pytest

from amplab.control.policies import StaticPriorityPolicy, UniformMqnPolicy
from amplab.errors import ContractViolation, InvalidActionError
from amplab.simulation.mqn import (
    EMPTY_STATE, MqnAction, MqnConfig, MqnEnvironment, MqnState, action_mask, mqn_step,
    simulate_mqn_episode, transition_distribution,
)
from amplab.simulation.rng import make_rng


def il_config(**overrides):
    return MqnConfig.from_regime("IL", **overrides)


def as_dict(outcomes):
    return {state: p for state, p in outcomes}


class TestMqnConfig:
    """Tests for MqnConfig validation and regime presets."""

    def test_il_preset_rates(self):
        """
        Tests that the IL preset holds the documented default rates.
        """
        cfg = il_config()
        assert (cfg.lambda1, cfg.lambda2, cfg.mu1, cfg.mu2, cfg.mu3) == (0.3, 0.3, 2.0, 2.0, 1.5)
        assert cfg.uniformization_constant == pytest.approx(6.1)

    def test_override_replaces_preset_rate(self):
        """
        Tests that an explicit rate wins over the preset.
        """
        cfg = il_config(lambda1=0.5)
        assert cfg.lambda1 == 0.5
        assert cfg.lambda2 == 0.3

    def test_nonpositive_rate_rejected(self):
        """
        Tests that every rate must be strictly positive.
        """
        with pytest.raises(ContractViolation):
            MqnConfig(0.0, 0.3, 2.0, 2.0, 1.5)

    def test_unstable_network_rejected(self):
        """
        Tests that a load of one or more at either station is rejected.
        """
        with pytest.raises(ContractViolation):
            MqnConfig(1.0, 1.0, 2.0, 2.0, 1.5)
        with pytest.raises(ContractViolation):
            MqnConfig(0.3, 0.1, 2.0, 2.0, 0.3)

    def test_unknown_regime_rejected(self):
        """
        Tests that regime_label must be a known label.
        """
        with pytest.raises(ContractViolation):
            MqnConfig(0.3, 0.3, 2.0, 2.0, 1.5, regime_label="XX")


class TestTransitionDistribution:
    """Tests for the uniformized one-step law."""

    def test_empty_state_idle(self):
        """
        Tests the empty network with server A idle: two arrivals plus a self-loop of 5.5/6.1.
        """
        dist = as_dict(transition_distribution(EMPTY_STATE, MqnAction.IDLE, il_config()))
        assert dist.keys() == {MqnState(1, 0, 0), MqnState(0, 1, 0), EMPTY_STATE}
        assert dist[MqnState(1, 0, 0)] == pytest.approx(0.3 / 6.1, abs=1e-15)
        assert dist[MqnState(0, 1, 0)] == pytest.approx(0.3 / 6.1, abs=1e-15)
        assert dist[EMPTY_STATE] == pytest.approx(5.5 / 6.1, abs=1e-15)

    def test_serve_class1_routes_to_queue3(self):
        """
        Tests that a class 1 completion moves the job to queue 3.
        """
        dist = as_dict(transition_distribution(MqnState(1, 0, 0), MqnAction.SERVE_CLASS1, il_config()))
        assert dist[MqnState(2, 0, 0)] == pytest.approx(0.3 / 6.1, abs=1e-15)
        assert dist[MqnState(1, 1, 0)] == pytest.approx(0.3 / 6.1, abs=1e-15)
        assert dist[MqnState(0, 0, 1)] == pytest.approx(2.0 / 6.1, abs=1e-15)
        assert dist[MqnState(1, 0, 0)] == pytest.approx(3.5 / 6.1, abs=1e-15)
        assert len(dist) == 4

    def test_probabilities_sum_to_one_exhaustively(self):
        """
        Tests that every valid (state, action) with queues up to 20 sums to exactly 1.
        """
        cfg = il_config()
        for q in itertools.product(range(21), repeat=3):
            state = MqnState(*q)
            for action in np.flatnonzero(action_mask(state, cfg)):
                outcomes = transition_distribution(state, MqnAction(int(action)), cfg)
                assert sum(p for _, p in outcomes) == 1.0

    def test_next_states_differ_by_one_job(self):
        """
        Tests that each outcome changes one queue by one, except class 1 completions (q1 - 1, q3 + 1).
        """
        cfg = il_config()
        state = MqnState(2, 3, 1)
        for action in (MqnAction.SERVE_CLASS1, MqnAction.SERVE_CLASS2, MqnAction.IDLE):
            for nxt, _ in transition_distribution(state, action, cfg):
                delta = np.subtract(nxt, state)
                if tuple(delta) == (-1, 0, 1):
                    continue
                assert np.abs(delta).sum() <= 1

    def test_no_duplicate_next_states(self):
        """
        Tests that next states are merged.
        """
        outcomes = transition_distribution(MqnState(0, 0, 2), MqnAction.IDLE, il_config())
        states = [s for s, _ in outcomes]
        assert len(states) == len(set(states))

    def test_serving_empty_class_rejected(self):
        """
        Tests that serving an empty class raises InvalidActionError.
        """
        with pytest.raises(InvalidActionError):
            transition_distribution(EMPTY_STATE, MqnAction.SERVE_CLASS1, il_config())

    def test_rates_scaled_leave_law_unchanged(self):
        """
        Tests that multiplying every rate by a common factor keeps the probabilities.
        """
        cfg = il_config()
        scaled = MqnConfig(0.9, 0.9, 6.0, 6.0, 4.5)
        state = MqnState(1, 2, 1)
        a = as_dict(transition_distribution(state, MqnAction.SERVE_CLASS2, cfg))
        b = as_dict(transition_distribution(state, MqnAction.SERVE_CLASS2, scaled))
        assert a.keys() == b.keys()
        for s in a:
            assert a[s] == pytest.approx(b[s], abs=1e-14)

    def test_buffer_cap_blocks_arrivals(self):
        """
        Tests that arrivals into a full buffer turn into the self-loop.
        """
        cfg = il_config(buffer_cap=1)
        dist = as_dict(transition_distribution(MqnState(1, 1, 1), MqnAction.SERVE_CLASS1, cfg))
        assert MqnState(2, 1, 1) not in dist
        assert MqnState(0, 1, 2) not in dist
        assert dist[MqnState(1, 1, 0)] == pytest.approx(1.5 / 6.1)
        assert dist[MqnState(1, 1, 1)] == pytest.approx(4.6 / 6.1)

    def test_idle_forbidden_when_configured(self):
        """
        Tests that allow_idling=False removes idling while work is waiting.
        """
        cfg = il_config(allow_idling=False)
        assert not action_mask(MqnState(1, 0, 0), cfg)[MqnAction.IDLE]
        assert action_mask(EMPTY_STATE, cfg)[MqnAction.IDLE]


class TestMqnStep:
    """Tests for mqn_step and sampling."""

    def test_cost_is_pre_transition_queue_total(self):
        """
        Tests that the cost is the holding cost before the event.
        """
        _, cost = mqn_step(MqnState(2, 1, 3), MqnAction.SERVE_CLASS2, il_config(), make_rng(0))
        assert cost == 6
        _, cost = mqn_step(EMPTY_STATE, MqnAction.IDLE, il_config(), make_rng(0))
        assert cost == 0

    def test_empirical_frequencies_match_distribution(self):
        """
        Tests that 10^5 sampled next states match the enumerated law (4 sigma per outcome).
        """
        cfg = il_config()
        state = MqnState(1, 1, 1)
        outcomes = transition_distribution(state, MqnAction.SERVE_CLASS1, cfg)
        n = 100_000
        rng = make_rng(7)
        counts = {}
        for _ in range(n):
            nxt, _ = mqn_step(state, MqnAction.SERVE_CLASS1, cfg, rng)
            counts[nxt] = counts.get(nxt, 0) + 1
        for s, p in outcomes:
            sigma = np.sqrt(p * (1 - p) / n)
            assert abs(counts.get(s, 0) / n - p) <= 4 * sigma + 1e-12


class TestSimulateMqnEpisode:
    """Tests for simulate_mqn_episode."""

    def test_zero_length_episode(self):
        """
        Tests that N = 0 gives one state, no actions and regen_indices [0].
        """
        traj = simulate_mqn_episode(StaticPriorityPolicy(1), il_config(episode_length=0), make_rng(0))
        assert traj.states == [EMPTY_STATE]
        assert traj.actions == []
        assert traj.regen_indices == [0]

    def test_lengths_and_regenerations(self):
        """
        Tests the list lengths and that regen_indices marks exactly the empty-state positions.
        """
        traj = simulate_mqn_episode(UniformMqnPolicy(il_config()), il_config(episode_length=500), make_rng(3))
        assert len(traj.states) == 501
        assert len(traj.actions) == len(traj.costs) == len(traj.log_probs) == 500
        assert traj.regen_indices == [k for k, s in enumerate(traj.states) if s == EMPTY_STATE]
        assert all(c == sum(s) for c, s in zip(traj.costs, traj.states))

    def test_same_seed_same_trajectory(self):
        """
        Tests determinism under a fixed seed.
        """
        cfg = il_config(episode_length=300)
        a = simulate_mqn_episode(StaticPriorityPolicy(1), cfg, make_rng(11))
        b = simulate_mqn_episode(StaticPriorityPolicy(1), cfg, make_rng(11))
        assert a.states == b.states
        assert a.actions == b.actions

    def test_invalid_policy_reports_step(self):
        """
        Tests that a policy serving an empty class fails with the step index.
        """
        def bad_policy(state):
            return np.array([1.0, 0.0, 0.0])

        with pytest.raises(InvalidActionError) as error:
            simulate_mqn_episode(bad_policy, il_config(episode_length=5), make_rng(0))
        assert error.value.location == "step 0"


class TestMqnEnvironment:
    """Tests for the learning-loop view of the network."""

    def test_encode_shape_and_indicators(self):
        """
        Tests the scaled queue features and the nonempty indicators.
        """
        env = MqnEnvironment(il_config())
        features = env.encode([MqnState(0, 5, 10)])
        assert features.shape == (1, env.feature_dim)
        np.testing.assert_allclose(features[0], [0.0, 0.5, 1.0, 0.0, 1.0, 1.0])

    def test_costs_are_minimised(self):
        """
        Tests that advantages are flipped for the cost-minimising environment.
        """
        assert MqnEnvironment(il_config()).objective_sign == -1.0
