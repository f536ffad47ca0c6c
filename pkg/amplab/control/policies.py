"""Fixed reference policies. Each one is a picklable callable from a state to action probabilities."""
import numpy as np

from amplab.simulation import mqn, ridehail


class StaticPriorityPolicy:
    """Server A serves the priority class whenever it has a job, otherwise the other class, otherwise idles."""

    def __init__(self, first_class=1):
        if first_class not in (1, 2):
            raise ValueError(f"first_class must be 1 or 2, got {first_class}")
        self.first_class = first_class

    def __call__(self, state):
        probs = np.zeros(mqn.N_ACTIONS)
        order = ((state.q1, mqn.MqnAction.SERVE_CLASS1), (state.q2, mqn.MqnAction.SERVE_CLASS2))
        if self.first_class == 2:
            order = order[::-1]
        for queue, action in order:
            if queue > 0:
                probs[action] = 1.0
                return probs
        probs[mqn.MqnAction.IDLE] = 1.0
        return probs


class UniformMqnPolicy:

    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, state):
        mask = mqn.action_mask(state, self.cfg)
        return mask / mask.sum()


class TablePolicy:
    """Deterministic policy read from a state -> action index table."""

    def __init__(self, actions, n_actions=mqn.N_ACTIONS):
        self.actions = dict(actions)
        self.n_actions = n_actions

    def __call__(self, state):
        probs = np.zeros(self.n_actions)
        probs[self.actions[state]] = 1.0
        return probs


class GreedyRidePolicy:
    """Take the first feasible request (lowest destination) for the car under the cursor, else hold."""

    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, state):
        mask = ridehail.feasible_mask(state, self.cfg)
        probs = np.zeros(len(mask))
        probs[int(np.flatnonzero(mask)[0])] = 1.0
        return probs


class UniformRidePolicy:

    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, state):
        mask = ridehail.feasible_mask(state, self.cfg)
        return mask / mask.sum()
