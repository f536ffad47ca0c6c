"""
A discrete-time (uniformized) Criss-Cross queueing network.

Classes 1 and 2 arrive from outside and share server A. A finished class 1 job becomes a
class 3 job at server B; class 2 and class 3 jobs leave when served. Server B always works
when it has a job, so the only decision is what server A does.
"""
import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

import numpy as np

from amplab.errors import ContractViolation, InvalidActionError
from amplab.simulation.rng import sample_index
from amplab.simulation.trajectory import MqnTrajectory

logger = logging.getLogger(__name__)

REGIMES = ("IL", "IM", "BL", "BM", "custom")

# Imbalanced regimes load station A more than station B, balanced ones equalise the two loads.
REGIME_PRESETS = {
    "IL": dict(lambda1=0.3, lambda2=0.3, mu1=2.0, mu2=2.0, mu3=1.5),
    "IM": dict(lambda1=0.6, lambda2=0.6, mu1=2.0, mu2=2.0, mu3=1.5),
    "BL": dict(lambda1=0.3, lambda2=0.3, mu1=2.0, mu2=2.0, mu3=1.0),
    "BM": dict(lambda1=0.6, lambda2=0.6, mu1=2.0, mu2=2.0, mu3=1.0),
}


class MqnState(NamedTuple):
    q1: int
    q2: int
    q3: int


EMPTY_STATE = MqnState(0, 0, 0)


class MqnAction(IntEnum):
    SERVE_CLASS1 = 0
    SERVE_CLASS2 = 1
    IDLE = 2


N_ACTIONS = len(MqnAction)


@dataclass(frozen=True)
class MqnConfig:
    lambda1: float
    lambda2: float
    mu1: float
    mu2: float
    mu3: float
    regime_label: str = "custom"
    episode_length: int = 1000
    buffer_cap: int | None = None
    allow_idling: bool = True

    def __post_init__(self):
        rates = dict(lambda1=self.lambda1, lambda2=self.lambda2, mu1=self.mu1, mu2=self.mu2, mu3=self.mu3)
        for name, rate in rates.items():
            if not rate > 0:
                raise ContractViolation(f"{name} must be > 0, got {rate}")
        if self.regime_label not in REGIMES:
            raise ContractViolation(f"regime_label must be one of {REGIMES}, got {self.regime_label!r}")
        if self.episode_length < 0:
            raise ContractViolation(f"episode_length must be >= 0, got {self.episode_length}")
        if self.buffer_cap is not None and self.buffer_cap < 0:
            raise ContractViolation(f"buffer_cap must be >= 0, got {self.buffer_cap}")
        load_a = self.lambda1 / self.mu1 + self.lambda2 / self.mu2
        load_b = self.lambda1 / self.mu3
        if load_a >= 1 or load_b >= 1:
            raise ContractViolation(f"network is not stable: station loads {load_a:.3f} and {load_b:.3f} must both be < 1")

    @property
    def uniformization_constant(self):
        return self.lambda1 + self.lambda2 + self.mu1 + self.mu2 + self.mu3

    @classmethod
    def from_regime(cls, regime_label, **overrides):
        rates = dict(REGIME_PRESETS[regime_label])
        rates.update({k: v for k, v in overrides.items() if k in rates and v is not None})
        rest = {k: v for k, v in overrides.items() if k not in rates}
        return cls(regime_label=regime_label, **rates, **rest)


def holding_cost(state):
    return state.q1 + state.q2 + state.q3


def action_mask(state, cfg):
    """Boolean vector over MqnAction: serving a class needs a job of that class."""
    mask = np.zeros(N_ACTIONS, dtype=bool)
    mask[MqnAction.SERVE_CLASS1] = state.q1 > 0
    mask[MqnAction.SERVE_CLASS2] = state.q2 > 0
    mask[MqnAction.IDLE] = cfg.allow_idling or (state.q1 == 0 and state.q2 == 0)
    return mask


def check_action(state, action, cfg, location=None):
    if min(state) < 0:
        raise ContractViolation(f"queue lengths must be nonnegative, got {tuple(state)}")
    action = MqnAction(action)
    if not action_mask(state, cfg)[action]:
        raise InvalidActionError(f"action {action.name} is not valid in state {tuple(state)}", location)
    return action


def transition_distribution(state, action, cfg):
    """
    Task: Enumerate the one-step law of the uniformized chain.
    Inputs:
    - state = MqnState before the event,
    - action = what server A works on,
    - cfg = MqnConfig (rates and optional buffer cap).
    Returns a list of (next state, probability). The self-loop collects every inactive
    activity and every blocked arrival; it is listed last and computed as the remainder
    so the probabilities add up to exactly 1.
    """
    action = check_action(state, action, cfg)
    q1, q2, q3 = state
    B = cfg.uniformization_constant
    cap = cfg.buffer_cap
    moves = []

    if cap is None or q1 < cap:
        moves.append((MqnState(q1 + 1, q2, q3), cfg.lambda1 / B))
    if cap is None or q2 < cap:
        moves.append((MqnState(q1, q2 + 1, q3), cfg.lambda2 / B))
    if action == MqnAction.SERVE_CLASS1 and (cap is None or q3 < cap):
        moves.append((MqnState(q1 - 1, q2, q3 + 1), cfg.mu1 / B))
    elif action == MqnAction.SERVE_CLASS2:
        moves.append((MqnState(q1, q2 - 1, q3), cfg.mu2 / B))
    if q3 > 0:
        moves.append((MqnState(q1, q2, q3 - 1), cfg.mu3 / B))

    moved = sum(p for _, p in moves)
    moves.append((MqnState(q1, q2, q3), 1.0 - moved))
    return moves


def mqn_step(state, action, cfg, rng, location=None):
    """Sample the next state. The cost is the holding cost of the state before the event."""
    check_action(state, action, cfg, location)
    outcomes = transition_distribution(state, action, cfg)
    probs = np.array([p for _, p in outcomes])
    next_state = outcomes[sample_index(probs, rng)][0]
    return next_state, holding_cost(state)


def simulate_mqn_episode(policy, cfg, rng, initial_state=EMPTY_STATE):
    """
    Task: Roll out one episode of cfg.episode_length steps from the empty network.
    Inputs:
    - policy = callable mapping an MqnState to a probability vector over MqnAction,
    - cfg = MqnConfig,
    - rng = numpy Generator.
    """
    states = [MqnState(*initial_state)]
    actions, costs, log_probs = [], [], []
    state = states[0]
    for step in range(cfg.episode_length):
        probs = np.asarray(policy(state), dtype=float)
        action = MqnAction(sample_index(probs, rng))
        state, cost = mqn_step(state, action, cfg, rng, location=f"step {step}")
        actions.append(action)
        costs.append(cost)
        log_probs.append(float(np.log(probs[action])))
        states.append(state)

    regen_indices = [k for k, s in enumerate(states) if s == EMPTY_STATE]
    logger.debug("MQN episode: %d steps, %d regenerations", len(actions), len(regen_indices))
    return MqnTrajectory(states=states, actions=actions, costs=costs, regen_indices=regen_indices, log_probs=log_probs)


class MqnEnvironment:
    """Bundles a config with what the learning loop needs: masks, features, rollouts."""

    name = "mqn"
    n_actions = N_ACTIONS
    # costs are minimised
    objective_sign = -1.0

    def __init__(self, cfg):
        self.cfg = cfg
        self.feature_scale = float(cfg.buffer_cap) if cfg.buffer_cap else 10.0

    @property
    def feature_dim(self):
        return 6

    def encode(self, states):
        q = np.asarray(states, dtype=float).reshape(-1, 3)
        return np.hstack([q / self.feature_scale, (q > 0).astype(float)])

    def action_mask(self, state):
        return action_mask(state, self.cfg)

    def simulate(self, policy, rng):
        return simulate_mqn_episode(policy, self.cfg, rng)

    def anchor_key(self, trajectory, position):
        return tuple(trajectory.states[position])
