"""
Value targets for policy evaluation.

Plain Monte Carlo sums the rewards from a position to the end of the episode. The approximating
martingale process (AMP) versions add, at every step, E[zeta(next)] - zeta(current) for a fixed
approximation zeta; the added terms have mean zero, so the targets stay unbiased, and with a good
zeta they cancel most of the noise. The expectation is either enumerated exactly or replaced by
an average over L sampled next states.

All suffix sums run in one backward pass in a fixed order, so zeta = 0 reproduces the plain
targets bit for bit.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from amplab.errors import ContractViolation, IntractableExpectationError, ValueFitDivergence
from amplab.estimation.oracle import TinyMdp
from amplab.simulation import mqn, ridehail

logger = logging.getLogger(__name__)

ESTIMATOR_KINDS = ("plain_mc", "amp_exact", "amp_sampled")


class ValueApproximation:
    """A deterministic map from states to reals. Subclasses override evaluate_batch."""

    descriptor = "value approximation"

    def evaluate_batch(self, states):
        raise NotImplementedError

    def evaluate(self, state):
        return float(self.evaluate_batch([state])[0])

    def __call__(self, state):
        return self.evaluate(state)


class ZeroValue(ValueApproximation):
    descriptor = "zero"

    def evaluate_batch(self, states):
        return np.zeros(len(states))


class TableValue(ValueApproximation):

    def __init__(self, table, descriptor="table", default=None):
        self.table = dict(table)
        self.descriptor = descriptor
        self.default = default

    def evaluate_batch(self, states):
        values = np.empty(len(states))
        for k, s in enumerate(states):
            value = self.table.get(s, self.default)
            if value is None:
                raise ContractViolation(f"{self.descriptor} has no value for state {s}")
            values[k] = value
        return values


class FunctionValue(ValueApproximation):

    def __init__(self, fn, descriptor="function"):
        self.fn = fn
        self.descriptor = descriptor

    def evaluate_batch(self, states):
        return np.array([float(self.fn(s)) for s in states], dtype=float)


@dataclass(frozen=True)
class EstimatorMode:
    kind: str = "plain_mc"
    L: int | None = None

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ContractViolation(f"estimator kind must be one of {ESTIMATOR_KINDS}, got {self.kind!r}")
        if self.kind == "amp_sampled" and (self.L is None or self.L < 1):
            raise ContractViolation(f"amp_sampled needs a sample size L >= 1, got {self.L}")

    @property
    def label(self):
        return f"amp_sampled-L{self.L}" if self.kind == "amp_sampled" else self.kind


PLAIN_MC = EstimatorMode("plain_mc")
AMP_EXACT = EstimatorMode("amp_exact")


@dataclass
class TargetSet:
    """One target per trajectory position. index holds the position labels named by columns."""
    index: list
    states: list
    values: np.ndarray
    mode: str
    columns: tuple = ("t", "i")

    def __post_init__(self):
        if len(self.index) != len(self.values):
            raise ContractViolation("a target set needs one label per target")
        if not np.all(np.isfinite(self.values)):
            raise ValueFitDivergence(f"non-finite {self.mode} targets; zeta or the costs are not finite")

    def __len__(self):
        return len(self.values)

    def to_frame(self, episode=0):
        frame = pd.DataFrame(self.index, columns=list(self.columns))
        frame.insert(0, "episode", episode)
        frame["target"] = self.values
        frame["mode"] = self.mode
        return frame


def _episodic_columns(traj):
    return ("t", "i") if traj.index and len(traj.index[0]) == 2 else ("t",)


def _suffix_sums(terms):
    out = np.empty(len(terms))
    acc = 0.0
    for j in range(len(terms) - 1, -1, -1):
        acc = terms[j] + acc
        out[j] = acc
    return out


def _regenerative_suffix_sums(terms, regen):
    """Sums of terms from k up to (not including) the next regeneration after k, or the episode end."""
    n = len(terms)
    out = np.empty(n)
    acc = 0.0
    for k in range(n - 1, -1, -1):
        if k + 1 >= n or (k + 1) in regen:
            acc = 0.0
        acc = terms[k] + acc
        out[k] = acc
    return out


def plain_mc_targets(traj):
    """Reward-to-go from every position of a finite-horizon episode."""
    rewards = np.asarray(traj.rewards, dtype=float)
    return TargetSet(list(traj.index), list(traj.states), _suffix_sums(rewards), PLAIN_MC.label,
                     _episodic_columns(traj))


# -- expectation plans ------------------------------------------------------
# A plan lists (position, weight, next state) entries; E zeta at a position is the weighted sum
# of zeta over its entries. Terminal next states carry zeta = 0 and are left out.

@dataclass
class _Plan:
    n: int
    positions: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    states: list = field(default_factory=list)

    def add(self, position, weight, state):
        self.positions.append(position)
        self.weights.append(weight)
        self.states.append(state)

    def evaluate(self, zeta):
        if not self.states:
            return np.zeros(self.n)
        values = np.asarray(zeta.evaluate_batch(self.states), dtype=float)
        return np.bincount(np.asarray(self.positions, dtype=int), weights=np.asarray(self.weights) * values,
                           minlength=self.n)


def _ride_cfg(env):
    return env if isinstance(env, ridehail.RideHailConfig) else env.cfg


def _ride_case_c_scenarios(post_state, cfg, L, rng):
    return ridehail.sample_arrival_scenarios(post_state, L, cfg, rng)


def _add_ride_position(plan, j, state, policy, cfg, mode, rng, scenarios):
    case = ridehail.sdm_case(state, cfg)
    if case == "b":
        return
    probs = np.asarray(policy(state), dtype=float)
    for template in np.flatnonzero(probs > 0):
        action = ridehail.SdmAction.from_template(int(template), cfg.R)
        post, _ = ridehail.sdm_step(state, action, cfg)
        if case == "a":
            plan.add(j, probs[template], post)
            continue
        if mode.kind == "amp_exact":
            raise IntractableExpectationError(
                f"exact expectation over passenger arrivals at the end of epoch {state.t} is intractable; "
                "use amp_sampled")
        if scenarios is not None:
            samples = scenarios[(j, int(template))]
        else:
            samples = _ride_case_c_scenarios(post, cfg, mode.L, rng)
        for s in samples:
            if not ridehail.is_terminal(s, cfg):
                plan.add(j, probs[template] / len(samples), s)


def presample_ride_scenarios(traj, policy, env, L, rng):
    """
    Draw the arrival scenarios of every end-of-epoch position ahead of target computation, in the
    order amp_targets would draw them. Keys are (position, action template).
    """
    cfg = _ride_cfg(env)
    scenarios = {}
    for j, state in enumerate(traj.states):
        if ridehail.sdm_case(state, cfg) != "c":
            continue
        probs = np.asarray(policy(state), dtype=float)
        for template in np.flatnonzero(probs > 0):
            action = ridehail.SdmAction.from_template(int(template), cfg.R)
            post, _ = ridehail.sdm_step(state, action, cfg)
            scenarios[(j, int(template))] = _ride_case_c_scenarios(post, cfg, L, rng)
    return scenarios


def expected_zeta_ridehail(state, zeta, policy, env, mode, rng=None):
    """
    Task: E[zeta(next state)] under the policy at one ride-hailing decision state.
    - mid-epoch: exact, the move is deterministic once the action is known,
    - last step of the last epoch: 0,
    - last step of an earlier epoch: average over L sampled arrival scenarios per action
      (amp_exact raises IntractableExpectationError here).
    """
    plan = _Plan(1)
    _add_ride_position(plan, 0, state, policy, _ride_cfg(env), mode, rng, None)
    return float(plan.evaluate(zeta)[0])


def _add_tiny_position(plan, j, label, policy, mdp, mode, rng):
    t, s = label
    if t >= mdp.horizon - 1:
        return
    probs = np.asarray(policy(label), dtype=float)
    for a in np.flatnonzero(probs > 0):
        outcomes = mdp.transitions[s][a]
        if mode.kind == "amp_exact":
            for s_next, p in outcomes:
                plan.add(j, probs[a] * p, (t + 1, s_next))
        else:
            p_out = np.array([p for _, p in outcomes])
            for _ in range(mode.L):
                pick = int(rng.choice(len(outcomes), p=p_out))
                plan.add(j, probs[a] / mode.L, (t + 1, outcomes[pick][0]))


def _episodic_plan(traj, policy, env, mode, rng, scenarios):
    plan = _Plan(traj.length)
    if isinstance(env, TinyMdp):
        for j, label in enumerate(traj.states):
            _add_tiny_position(plan, j, label, policy, env, mode, rng)
    else:
        cfg = _ride_cfg(env)
        for j, state in enumerate(traj.states):
            _add_ride_position(plan, j, state, policy, cfg, mode, rng, scenarios)
    return plan


def martingale_corrections(traj, zeta, expected_zeta):
    """Per-position E zeta(next) - zeta(current); their suffix sums plus zeta give the martingale."""
    expected_zeta = np.asarray(expected_zeta, dtype=float)
    if len(expected_zeta) != traj.length:
        raise ContractViolation(
            f"expected zeta has {len(expected_zeta)} entries for a trajectory of {traj.length} positions")
    z = np.asarray(zeta.evaluate_batch(traj.states[:traj.length]), dtype=float)
    return list(expected_zeta - z)


def amp_targets(traj, zeta, policy, env, mode, rng=None, scenarios=None):
    """
    Task: AMP(zeta) targets for a finite-horizon episode (ride-hailing or a TinyMdp).
    Inputs:
    - traj = EpisodicTrajectory / RideTrajectory,
    - zeta = ValueApproximation (kept fixed while targets are built),
    - policy = the behaviour policy that produced traj,
    - env = RideHailEnvironment, RideHailConfig or TinyMdp,
    - mode = EstimatorMode; plain_mc falls back to plain_mc_targets,
    - rng = numpy Generator for amp_sampled, scenarios = pre-sampled arrivals (optional).
    """
    if mode.kind == "plain_mc":
        return plain_mc_targets(traj)
    rewards = np.asarray(traj.rewards, dtype=float)
    z = np.asarray(zeta.evaluate_batch(traj.states), dtype=float)
    expected = _episodic_plan(traj, policy, env, mode, rng, scenarios).evaluate(zeta)
    terms = (rewards + expected) - z
    return TargetSet(list(traj.index), list(traj.states), z + _suffix_sums(terms), mode.label,
                     _episodic_columns(traj))


# -- Criss-Cross, average cost -------------------------------------------------

def estimate_average_cost(trajs):
    costs = [c for traj in trajs for c in traj.costs]
    if not costs:
        raise ContractViolation("average cost needs at least one simulated step")
    return float(np.mean(costs))


def _check_regenerations(traj):
    expected = [k for k, s in enumerate(traj.states) if s == mqn.EMPTY_STATE]
    if list(traj.regen_indices) != expected:
        raise ContractViolation("regen_indices must list exactly the positions of the empty state")
    return set(expected)


def _mqn_index(traj):
    return [(k,) for k in range(traj.length)]


def plain_regenerative_targets(traj, avg_cost):
    """Centred cost sums from each position up to the next return to the empty network."""
    regen = _check_regenerations(traj)
    terms = np.asarray(traj.costs, dtype=float) - avg_cost
    values = _regenerative_suffix_sums(terms, regen)
    return TargetSet(_mqn_index(traj), list(traj.states[:traj.length]), values, PLAIN_MC.label, ("k",))


def sample_outcome_counts(state, action, cfg, L, rng):
    """How many of L sampled activities land on each outcome of transition_distribution."""
    if L < 1:
        raise ContractViolation(f"sample size L must be >= 1, got {L}")
    outcomes = mqn.transition_distribution(state, action, cfg)
    probs = np.array([p for _, p in outcomes])
    picks = rng.choice(len(outcomes), size=L, p=probs)
    return np.bincount(picks, minlength=len(outcomes))


def presample_mqn_scenarios(traj, policy, cfg, L, rng):
    """Sampled activity counts for every (position, action with positive probability)."""
    scenarios = {}
    for k in range(traj.length):
        state = traj.states[k]
        probs = np.asarray(policy(state), dtype=float)
        for a in np.flatnonzero(probs > 0):
            scenarios[(k, int(a))] = sample_outcome_counts(state, mqn.MqnAction(int(a)), cfg, L, rng)
    return scenarios


def _mqn_plan(traj, policy, cfg, mode, rng, scenarios):
    plan = _Plan(traj.length)
    for k in range(traj.length):
        state = traj.states[k]
        probs = np.asarray(policy(state), dtype=float)
        for a in np.flatnonzero(probs > 0):
            action = mqn.MqnAction(int(a))
            outcomes = mqn.transition_distribution(state, action, cfg)
            if mode.kind == "amp_exact":
                for y, p in outcomes:
                    plan.add(k, probs[a] * p, y)
                continue
            if scenarios is not None:
                counts = scenarios[(k, int(a))]
            else:
                counts = sample_outcome_counts(state, action, cfg, mode.L, rng)
            for (y, _), count in zip(outcomes, counts):
                if count:
                    plan.add(k, probs[a] * count / mode.L, y)
    return plan


def mqn_amp_targets(traj, zeta, policy, cfg, avg_cost, mode, rng=None, scenarios=None):
    """
    Task: AMP(zeta) estimate of the relative value (Poisson equation solution) at each position.
    Inputs:
    - traj = MqnTrajectory with regen_indices,
    - zeta = ValueApproximation on MqnState,
    - policy = behaviour policy, cfg = MqnConfig,
    - avg_cost = estimated (or exact) long-run average cost,
    - mode = EstimatorMode; plain_mc gives the plain regenerative targets,
    - rng / scenarios = sampling stream or pre-sampled activity counts for amp_sampled.
    Each target runs to the next regeneration after its position, or to the episode end if none.
    """
    if mode.kind == "plain_mc":
        return plain_regenerative_targets(traj, avg_cost)
    if isinstance(cfg, mqn.MqnEnvironment):
        cfg = cfg.cfg
    regen = _check_regenerations(traj)
    states = traj.states[:traj.length]
    z = np.asarray(zeta.evaluate_batch(states), dtype=float)
    expected = _mqn_plan(traj, policy, cfg, mode, rng, scenarios).evaluate(zeta)
    terms = ((np.asarray(traj.costs, dtype=float) - avg_cost) + expected) - z
    values = z + _regenerative_suffix_sums(terms, regen)
    return TargetSet(_mqn_index(traj), list(states), values, mode.label, ("k",))


def sampling_error_report(traj, zeta, policy, cfg, avg_cost, L, rng):
    """
    Task: Compare sampled and exact AMP targets on one trajectory.
    Returns (mean absolute deviation, 3-sigma bound). The bound uses the sample variance of zeta
    over each step's L draws, summed over the steps each target covers.
    """
    if L < 2:
        raise ContractViolation("a sample variance needs L >= 2")
    regen = _check_regenerations(traj)
    scenarios = presample_mqn_scenarios(traj, policy, cfg, L, rng)
    exact = mqn_amp_targets(traj, zeta, policy, cfg, avg_cost, AMP_EXACT)
    sampled = mqn_amp_targets(traj, zeta, policy, cfg, avg_cost, EstimatorMode("amp_sampled", L), scenarios=scenarios)

    step_var = np.zeros(traj.length)
    for (k, a), counts in scenarios.items():
        outcomes = mqn.transition_distribution(traj.states[k], mqn.MqnAction(a), cfg)
        values = zeta.evaluate_batch([y for y, _ in outcomes])
        mean = np.dot(counts, values) / L
        sample_var = np.dot(counts, (values - mean) ** 2) / (L - 1)
        prob = float(policy(traj.states[k])[a])
        step_var[k] += prob ** 2 * sample_var / L
    sigma = np.sqrt(_regenerative_suffix_sums(step_var, regen))
    mad = float(np.mean(np.abs(sampled.values - exact.values)))
    return mad, float(3.0 * np.mean(sigma))


# -- variance across episodes --------------------------------------------------

@dataclass
class EstimatorBundle:
    """Everything estimator_variance holds fixed: environment, policy, zeta and the anchors to watch."""
    env: object
    policy: object
    zeta: ValueApproximation
    anchors: list
    avg_cost: float | None = None


@dataclass
class VarianceEstimate:
    anchor: object
    mean: float
    variance: float
    episodes: int


def targets_for(trajectory, bundle, mode, rng, avg_cost=None, scenarios=None):
    env = bundle.env
    if isinstance(env, mqn.MqnEnvironment):
        return mqn_amp_targets(trajectory, bundle.zeta, bundle.policy, env.cfg, avg_cost, mode, rng, scenarios)
    return amp_targets(trajectory, bundle.zeta, bundle.policy, env, mode, rng, scenarios)


def simulate_bundle(bundle, episodes, rng):
    return [bundle.env.simulate(bundle.policy, rng) for _ in range(episodes)]


def estimator_variance(bundle, mode, episodes, rng, trajectories=None):
    """
    Task: Mean and unbiased variance of the target at each anchor state across episodes.
    Inputs:
    - bundle = EstimatorBundle,
    - mode = EstimatorMode,
    - episodes = number of episodes (>= 2),
    - rng = numpy Generator (simulation first, then sampling),
    - trajectories = reuse already simulated episodes instead (lets modes share rollouts).
    Each episode contributes the target at its first visit to an anchor. Anchors seen in fewer
    than two episodes are left out with a warning.
    """
    if episodes < 2:
        raise ContractViolation(f"estimator_variance needs at least 2 episodes, got {episodes}")
    if trajectories is None:
        trajectories = simulate_bundle(bundle, episodes, rng)
    trajectories = trajectories[:episodes]

    avg_cost = bundle.avg_cost
    if isinstance(bundle.env, mqn.MqnEnvironment) and avg_cost is None:
        avg_cost = estimate_average_cost(trajectories)

    samples = {anchor: [] for anchor in bundle.anchors}
    for traj in trajectories:
        targets = targets_for(traj, bundle, mode, rng, avg_cost)
        seen = set()
        for position in range(len(targets)):
            key = bundle.env.anchor_key(traj, position)
            if key in samples and key not in seen:
                samples[key].append(targets.values[position])
                seen.add(key)

    results = []
    for anchor, values in samples.items():
        if len(values) < 2:
            logger.warning("anchor %s visited in %d episode(s); left out of the variance table", anchor, len(values))
            continue
        values = np.asarray(values)
        results.append(VarianceEstimate(anchor, float(values.mean()), float(values.var(ddof=1)), len(values)))
    return results
