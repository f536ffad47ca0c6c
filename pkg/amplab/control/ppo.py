"""
Proximal policy optimization around the estimators.

Each iteration rolls out K episodes with the current policy, builds value targets with the chosen
estimator (zeta is the value network fitted in the previous iteration, zero in the first), fits the
value network, turns targets into standardized advantages and takes clipped-surrogate steps.
"""
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from amplab.control.approximator import (
    Adam, NormalizedMlp, PolicyHead, ValueNetwork, backward, fit_value, forward_with_cache, init_mlp,
    masked_softmax,
)
from amplab.errors import ContractViolation, ValueFitDivergence
from amplab.estimation import estimators
from amplab.estimation.estimators import ZeroValue
from amplab.simulation import mqn
from amplab.simulation.rng import SCENARIO_STREAM, episode_rng

logger = logging.getLogger(__name__)

INIT_STREAM = 2
UPDATE_STREAM = 3


@dataclass(frozen=True)
class PpoConfig:
    iterations: int = 30
    episodes: int = 10
    clip_epsilon: float = 0.2
    policy_epochs: int = 4
    policy_step_size: float = 3e-4
    policy_batch_size: int = 256
    value_epochs: int = 10
    value_step_size: float = 3e-4
    value_batch_size: int = 256
    hidden_sizes: tuple = (64, 64)
    entropy_coef: float = 0.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ContractViolation(f"iterations must be >= 0, got {self.iterations}")
        if self.episodes < 1:
            raise ContractViolation(f"episodes (K) must be >= 1, got {self.episodes}")
        if not 0 < self.clip_epsilon < 1:
            raise ContractViolation(f"clip_epsilon must lie in (0, 1), got {self.clip_epsilon}")
        if self.workers < 1:
            raise ContractViolation(f"workers must be >= 1, got {self.workers}")


@dataclass(frozen=True)
class EstimatorConfig:
    mode: estimators.EstimatorMode = estimators.PLAIN_MC
    normalization: str = "input_only"

    @property
    def label(self):
        return f"{self.mode.label}__{self.normalization}"


@dataclass
class IterationRecord:
    iteration: int
    metric: float
    value_loss: float
    mode: str
    sim_s: float
    prep_s: float
    train_s: float
    total_s: float


@dataclass
class Rollouts:
    """Flattened decision records of a batch of episodes, with the behaviour policy's log-probabilities."""
    features: np.ndarray
    masks: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray

    @classmethod
    def from_trajectories(cls, env, trajectories):
        states = [s for traj in trajectories for s in traj.states[:traj.length]]
        return cls(
            features=env.encode(states),
            masks=np.array([env.action_mask(s) for s in states]),
            actions=np.array([int(a) for traj in trajectories for a in traj.actions]),
            log_probs=np.array([lp for traj in trajectories for lp in traj.log_probs]),
        )


def compute_advantages(targets, value_fn):
    """
    Task: target - baseline for every record, standardized over the batch.
    Inputs:
    - targets = TargetSet or list of TargetSets,
    - value_fn = ValueApproximation answering in raw target units (normalization already undone).
    A batch with zero spread maps to all zeros.
    """
    if isinstance(targets, estimators.TargetSet):
        targets = [targets]
    values = np.concatenate([t.values for t in targets]) if targets else np.zeros(0)
    states = [s for t in targets for s in t.states]
    raw = values - np.asarray(value_fn.evaluate_batch(states), dtype=float)
    if not np.all(np.isfinite(raw)):
        raise ValueFitDivergence("non-finite advantages; the value network has diverged")
    if len(raw) == 0:
        return raw
    std = raw.std()
    if std == 0:
        return np.zeros_like(raw)
    return (raw - raw.mean()) / std


def surrogate_gradient(net, features, masks, actions, old_log_probs, advantages, clip_epsilon, entropy_coef=0.0):
    """
    Task: Gradient (for minimization) of minus the clipped surrogate plus entropy bonus.
    Returns (gradients shaped like net.params, surrogate objective value).
    Samples whose clipped branch is the smaller one contribute nothing.
    """
    logits, activations = forward_with_cache(net, features)
    probs = masked_softmax(logits, masks)
    n = len(actions)
    rows = np.arange(n)
    with np.errstate(divide="ignore"):
        log_p = np.log(probs[rows, actions])
    ratio = np.exp(log_p - old_log_probs)
    if not np.all(np.isfinite(ratio)):
        raise ValueFitDivergence("non-finite probability ratio in the policy update")

    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1 - clip_epsilon, 1 + clip_epsilon) * advantages
    objective = float(np.mean(np.minimum(unclipped, clipped)))
    active = unclipped <= clipped

    onehot = np.zeros_like(probs)
    onehot[rows, actions] = 1.0
    d_logits = (active * advantages * ratio)[:, None] * (onehot - probs) / n

    if entropy_coef:
        with np.errstate(divide="ignore", invalid="ignore"):
            log_probs_all = np.where(probs > 0, np.log(probs), 0.0)
        entropy = -(probs * log_probs_all).sum(axis=1)
        d_logits += entropy_coef * (-probs * (log_probs_all + entropy[:, None])) / n
        objective += entropy_coef * float(entropy.mean())

    return backward(net, activations, -d_logits), objective


def ppo_update(policy, rollouts, advantages, cfg, rng):
    """
    Task: Clipped-surrogate steps on the policy head, several epochs of shuffled minibatches.
    Inputs:
    - policy = PolicyHead, updated in place,
    - rollouts = Rollouts carrying the behaviour log-probabilities,
    - advantages = one value per record,
    - cfg = PpoConfig, rng = numpy Generator for shuffling.
    """
    advantages = np.asarray(advantages, dtype=float)
    n = len(advantages)
    if n != len(rollouts.actions):
        raise ContractViolation(f"{n} advantages for {len(rollouts.actions)} decision records")
    optimizer = Adam(policy.net.params, step_size=cfg.policy_step_size)
    objective = 0.0
    for _ in range(cfg.policy_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.policy_batch_size):
            batch = order[start:start + cfg.policy_batch_size]
            grads, objective = surrogate_gradient(
                policy.net, rollouts.features[batch], rollouts.masks[batch], rollouts.actions[batch],
                rollouts.log_probs[batch], advantages[batch], cfg.clip_epsilon, cfg.entropy_coef)
            optimizer.step(grads)
    return policy, objective


def make_policy(env, cfg, rng):
    sizes = [env.feature_dim, *cfg.hidden_sizes, env.n_actions]
    return PolicyHead(init_mlp(sizes, rng, output_scale=0.01), env.encode, env.action_mask)


def make_value_model(env, cfg, rng):
    return NormalizedMlp(init_mlp([env.feature_dim, *cfg.hidden_sizes, 1], rng))


def _rollout(args):
    env, policy, seed, iteration, episode, mode = args
    traj = env.simulate(policy, episode_rng(seed, iteration, episode))
    if mode.kind == "amp_sampled":
        # next states are drawn while simulating; preprocessing only evaluates zeta on them
        rng = episode_rng(seed, iteration, episode, SCENARIO_STREAM)
        if isinstance(env, mqn.MqnEnvironment):
            traj.scenarios = estimators.presample_mqn_scenarios(traj, policy, env.cfg, mode.L, rng)
        else:
            traj.scenarios = estimators.presample_ride_scenarios(traj, policy, env, mode.L, rng)
    return traj


def run_episodes(env, policy, cfg, iteration, mode):
    jobs = [(env, policy, cfg.seed, iteration, k, mode) for k in range(cfg.episodes)]
    if cfg.workers == 1:
        return [_rollout(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(_rollout, jobs))


def iteration_targets(env, trajectories, zeta, policy, mode):
    if isinstance(env, mqn.MqnEnvironment):
        avg_cost = estimators.estimate_average_cost(trajectories)
        return [estimators.mqn_amp_targets(traj, zeta, policy, env.cfg, avg_cost, mode, scenarios=traj.scenarios)
                for traj in trajectories]
    return [estimators.amp_targets(traj, zeta, policy, env, mode, scenarios=traj.scenarios)
            for traj in trajectories]


def iteration_metric(env, trajectories):
    if isinstance(env, mqn.MqnEnvironment):
        return estimators.estimate_average_cost(trajectories)
    return float(np.mean([traj.matching_rate for traj in trajectories]))


def train(env, ppo_cfg, estimator_cfg, on_iteration=None, on_targets=None):
    """
    Task: Run ppo_cfg.iterations policy iterations.
    Inputs:
    - env = MqnEnvironment or RideHailEnvironment,
    - ppo_cfg = PpoConfig,
    - estimator_cfg = EstimatorConfig (estimator mode and value-target normalization),
    - on_iteration = optional callback(record, policy, value_model) called after every iteration,
    - on_targets = optional callback(iteration, list of TargetSet) called once the targets are built.
    Returns (policy head, list of IterationRecord).
    """
    mode = estimator_cfg.mode
    init_rng = episode_rng(ppo_cfg.seed, 0, 0, INIT_STREAM)
    policy = make_policy(env, ppo_cfg, init_rng)
    value_model = make_value_model(env, ppo_cfg, init_rng)
    zeta = ZeroValue()
    curve = []

    for iteration in range(1, ppo_cfg.iterations + 1):
        start = time.perf_counter()
        behaviour = policy.frozen()
        trajectories = run_episodes(env, behaviour, ppo_cfg, iteration, mode)
        simulated = time.perf_counter()

        targets = iteration_targets(env, trajectories, zeta, behaviour, mode)
        if on_targets is not None:
            on_targets(iteration, targets)
        rollouts = Rollouts.from_trajectories(env, trajectories)
        target_values = np.concatenate([t.values for t in targets])
        prepared = time.perf_counter()

        update_rng = episode_rng(ppo_cfg.seed, iteration, 0, UPDATE_STREAM)
        _, value_loss = fit_value(value_model, rollouts.features, target_values, estimator_cfg.normalization,
                                  update_rng, epochs=ppo_cfg.value_epochs, step_size=ppo_cfg.value_step_size,
                                  batch_size=ppo_cfg.value_batch_size, iteration=iteration)
        fitted = time.perf_counter()

        baseline = ValueNetwork(value_model, env.encode, f"iteration-{iteration} value net")
        advantages = env.objective_sign * compute_advantages(targets, baseline)
        advantaged = time.perf_counter()

        ppo_update(policy, rollouts, advantages, ppo_cfg, update_rng)
        done = time.perf_counter()

        zeta = ValueNetwork(value_model.copy(), env.encode, f"iteration-{iteration} value net")
        record = IterationRecord(
            iteration=iteration,
            metric=iteration_metric(env, trajectories),
            value_loss=float(value_loss),
            mode=mode.label,
            sim_s=simulated - start,
            prep_s=(prepared - simulated) + (advantaged - fitted),
            train_s=(fitted - prepared) + (done - advantaged),
            total_s=done - start,
        )
        curve.append(record)
        logger.info("iteration %d [%s]: metric %.5g, value loss %.5g (sim %.2fs, prep %.2fs, train %.2fs)",
                    iteration, estimator_cfg.label, record.metric, record.value_loss,
                    record.sim_s, record.prep_s, record.train_s)
        if on_iteration is not None:
            on_iteration(record, policy, value_model)

    return policy, curve
