"""
Exact solvers for small instances: backward induction on tiny finite-horizon MDPs, full
trajectory enumeration, and the Poisson equation / relative value iteration on a Criss-Cross
network with bounded buffers.
"""
import dataclasses
import itertools
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.csgraph import breadth_first_order
from scipy.sparse.linalg import spsolve

from amplab.control.policies import TablePolicy
from amplab.errors import ContractViolation, ConvergenceError, ReducibleChainError, ResidualError
from amplab.simulation import mqn
from amplab.simulation.rng import sample_index
from amplab.simulation.trajectory import EpisodicTrajectory

logger = logging.getLogger(__name__)

MAX_ENUMERATED_TRAJECTORIES = 100_000


@dataclass
class TinyMdp:
    """
    A finite-horizon MDP small enough to solve and enumerate exactly.
    transitions[s][a] is a list of (next state, probability); rewards[s][a] is the reward of a in s.
    Decisions happen at t = 0..horizon-1; trajectory states are (t, s) labels so values may depend on t.
    """
    n_states: int
    n_actions: int
    transitions: list
    rewards: list
    horizon: int
    initial_state: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ContractViolation(f"horizon must be >= 1, got {self.horizon}")
        for s in range(self.n_states):
            for a in range(self.n_actions):
                total = sum(p for _, p in self.transitions[s][a])
                if abs(total - 1.0) > 1e-12:
                    raise ContractViolation(f"transition row ({s}, {a}) sums to {total}, not 1")

    def simulate(self, policy, rng):
        label = (0, self.initial_state)
        states, actions, rewards, index, log_probs = [], [], [], [], []
        for t in range(self.horizon):
            probs = np.asarray(policy(label), dtype=float)
            a = sample_index(probs, rng)
            outcomes = self.transitions[label[1]][a]
            pick = int(rng.choice(len(outcomes), p=[p for _, p in outcomes]))
            states.append(label)
            actions.append(a)
            rewards.append(float(self.rewards[label[1]][a]))
            index.append((t,))
            log_probs.append(float(np.log(probs[a])))
            label = (t + 1, outcomes[pick][0])
        return EpisodicTrajectory(states, actions, rewards, index, log_probs, final_state=label)

    def anchor_key(self, trajectory, position):
        return trajectory.states[position]


def exact_policy_value_episodic(mdp, policy):
    """Backward induction. Returns {(t, s): V} for t = 0..horizon-1; values beyond the horizon are 0."""
    values = {}
    next_values = np.zeros(mdp.n_states)
    for t in range(mdp.horizon - 1, -1, -1):
        current = np.zeros(mdp.n_states)
        for s in range(mdp.n_states):
            probs = np.asarray(policy((t, s)), dtype=float)
            for a in np.flatnonzero(probs > 0):
                cont = sum(p * next_values[s2] for s2, p in mdp.transitions[s][a])
                current[s] += probs[a] * (mdp.rewards[s][a] + cont)
            values[(t, s)] = float(current[s])
        next_values = current
    return values


def enumerate_trajectory_distribution(mdp, policy, limit=MAX_ENUMERATED_TRAJECTORIES):
    """
    Task: List every trajectory from the initial state with its probability.
    Branches over actions with positive probability and over every transition, including the
    one after the last decision (kept as final_state).
    """
    paths = [([], [], [], 1.0, mdp.initial_state)]
    for t in range(mdp.horizon):
        grown = []
        for states, actions, rewards, prob, s in paths:
            probs = np.asarray(policy((t, s)), dtype=float)
            for a in np.flatnonzero(probs > 0):
                for s_next, p in mdp.transitions[s][a]:
                    if p == 0:
                        continue
                    grown.append((states + [(t, s)], actions + [int(a)], rewards + [float(mdp.rewards[s][a])],
                                  prob * probs[a] * p, s_next))
                    if len(grown) > limit:
                        raise ContractViolation(
                            f"more than {limit} trajectories; use a smaller horizon or fewer outcomes")
        paths = grown

    result = []
    for states, actions, rewards, prob, s in paths:
        index = [(t,) for t in range(len(states))]
        log_probs = [float(np.log(policy(label)[a])) for label, a in zip(states, actions)]
        result.append((EpisodicTrajectory(states, actions, rewards, index, log_probs,
                                          final_state=(mdp.horizon, s)), prob))
    return result


@dataclass
class TruncatedMqn:
    """
    The Criss-Cross network with every buffer capped at cap. Arrivals into a full buffer (and class 1
    completions into a full class 3 buffer) leave the state unchanged.
    """
    cfg: mqn.MqnConfig
    cap: int
    states: list
    index: dict
    costs: np.ndarray
    action_matrices: list
    valid: np.ndarray

    @classmethod
    def build(cls, cfg, cap):
        if cap < 0:
            raise ContractViolation(f"cap must be >= 0, got {cap}")
        cfg = dataclasses.replace(cfg, buffer_cap=cap)
        states = [mqn.MqnState(*q) for q in itertools.product(range(cap + 1), repeat=3)]
        index = {s: k for k, s in enumerate(states)}
        n = len(states)
        valid = np.array([mqn.action_mask(s, cfg) for s in states])
        matrices = []
        for action in mqn.MqnAction:
            rows, cols, vals = [], [], []
            for k, s in enumerate(states):
                if not valid[k, action]:
                    continue
                for y, p in mqn.transition_distribution(s, action, cfg):
                    rows.append(k)
                    cols.append(index[y])
                    vals.append(p)
            matrices.append(sparse.csr_matrix((vals, (rows, cols)), shape=(n, n)))
        costs = np.array([mqn.holding_cost(s) for s in states], dtype=float)
        logger.debug("truncated network with cap %d: %d states", cap, n)
        return cls(cfg, cap, states, index, costs, matrices, valid)

    @property
    def empty_index(self):
        return self.index[mqn.EMPTY_STATE]

    def policy_matrix(self, policy):
        """Transition operator of the chain induced by a policy (callable or array of action probabilities)."""
        n = len(self.states)
        probs = np.array([np.asarray(policy(s), dtype=float) for s in self.states])
        if np.any(probs[~self.valid] > 0):
            bad = [tuple(self.states[k]) for k in np.flatnonzero((probs * ~self.valid).sum(axis=1) > 0)]
            raise ContractViolation(f"policy puts mass on invalid actions in states {bad[:5]}")
        P = sparse.csr_matrix((n, n))
        for a, matrix in enumerate(self.action_matrices):
            P = P + sparse.diags(probs[:, a]) @ matrix
        return P.tocsr()


def exact_poisson_solution(net, policy, residual_tol=1e-8):
    """
    Task: Solve h(x) = g(x) - c + sum_y P(y|x) h(y) with h(empty) = 0 under a fixed policy.
    Returns (h as {state: value}, average cost c). Every state must be able to reach the empty
    state, otherwise ReducibleChainError lists those that cannot. A solution whose largest residual
    exceeds residual_tol * max(1, max |h|) raises ResidualError.
    """
    P = net.policy_matrix(policy)
    n = len(net.states)
    zero = net.empty_index
    reaches_empty = breadth_first_order(P.T.tocsr(), zero, directed=True, return_predecessors=False)
    if len(reaches_empty) < n:
        stuck = sorted(set(range(n)) - set(reaches_empty.tolist()))
        raise ReducibleChainError(tuple(net.states[k]) for k in stuck)

    # unknowns: h for every state except the empty one, and c in the empty state's column
    A = (sparse.identity(n, format="csr") - P).tolil()
    A[:, zero] = np.ones((n, 1))
    solution = spsolve(A.tocsc(), net.costs)
    average_cost = float(solution[zero])
    h = solution.copy()
    h[zero] = 0.0
    residual = np.max(np.abs(h - (net.costs - average_cost + P @ h))) if n else 0.0
    logger.debug("Poisson solve: average cost %.10g, residual %.3g", average_cost, residual)
    bound = residual_tol * max(1.0, float(np.max(np.abs(h))) if n else 0.0)
    if residual > bound:
        raise ResidualError(f"Poisson solve residual {residual:.3g} exceeds {bound:.3g}", residual)
    return {s: float(h[k]) for k, s in enumerate(net.states)}, average_cost


def optimal_average_cost(net, tol=1e-9, max_iterations=1_000_000):
    """
    Task: Relative value iteration until the span of successive differences drops below tol.
    Returns (optimal average cost, TablePolicy greedy in the final relative values).
    """
    n = len(net.states)
    zero = net.empty_index
    h = np.zeros(n)
    span = np.inf
    for iteration in range(1, max_iterations + 1):
        q = np.column_stack([matrix @ h for matrix in net.action_matrices])
        q = np.where(net.valid, q, np.inf)
        th = net.costs + q.min(axis=1)
        diff = th - h
        span = float(diff.max() - diff.min())
        h = th - th[zero]
        if span < tol:
            break
    else:
        raise ConvergenceError(f"relative value iteration did not converge in {max_iterations} iterations "
                               f"(span {span:.3g})", span)
    average_cost = float((diff.max() + diff.min()) / 2)
    q = np.column_stack([matrix @ h for matrix in net.action_matrices])
    q = np.where(net.valid, q, np.inf)
    actions = np.argmin(q, axis=1)
    logger.info("relative value iteration: average cost %.10g after %d iterations", average_cost, iteration)
    return average_cost, TablePolicy({s: int(actions[k]) for k, s in enumerate(net.states)})


def oracle_frame(net, h, policy=None):
    """State table with the relative value and, when a policy is given, its chosen action."""
    frame = pd.DataFrame([tuple(s) for s in net.states], columns=["q1", "q2", "q3"])
    frame["h"] = [h[s] for s in net.states]
    if policy is not None:
        frame["action"] = [mqn.MqnAction(int(np.argmax(policy(s)))).name.lower() for s in net.states]
    return frame
