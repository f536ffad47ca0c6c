"""
Experiment orchestration: training runs over seeds, estimator modes and normalization schemes,
variance studies with a fixed policy, and oracle exports.

Artifact layout of run_experiment:
  <out>/manifest.yaml
  <out>/timing.csv
  <out>/<mode>__<normalization>/seed-<n>/curve.csv, value-<iteration>.npz, policy.npz, FAILED | DIVERGED
  <out>/<mode>__<normalization>/seed-<n>/targets.csv when save_targets is set
  <out>/<mode>__<normalization>/curves.csv, aggregate.csv, value_loss_aggregate.csv
"""
import dataclasses
import logging
import os
import platform

import numpy as np
import yaml

import amplab
from amplab.api.read_results import read_variant_curves
from amplab.control import ppo
from amplab.control.approximator import NormalizedMlp, ValueNetwork, load_checkpoint, save_checkpoint
from amplab.control.policies import (
    GreedyRidePolicy, StaticPriorityPolicy, UniformMqnPolicy, UniformRidePolicy,
)
from amplab.errors import ValueFitDivergence
from amplab.estimation import estimators, oracle
from amplab.estimation.estimators import EstimatorBundle, EstimatorMode, TableValue, ZeroValue
from amplab.services import data_processor
from amplab.simulation import mqn
from amplab.simulation.rng import SCENARIO_STREAM, episode_rng

logger = logging.getLogger(__name__)

MANIFEST = "manifest.yaml"
FAILED_MARKER = "FAILED"
DIVERGED_MARKER = "DIVERGED"


def variant_name(mode, normalization):
    return f"{mode.label}__{normalization}"


def write_manifest(out_dir, cfg, status, variants=None, detail=None):
    manifest = {
        "status": status,
        "amplab_version": amplab.__version__,
        "python_version": platform.python_version(),
        "numpy_version": np.__version__,
        "seeds": list(cfg.seeds),
        "config": cfg.raw,
    }
    if variants is not None:
        manifest["variants"] = variants
    if detail:
        manifest["detail"] = detail
    path = os.path.join(out_dir, MANIFEST)
    with open(path, "w") as f:
        yaml.safe_dump(manifest, f, sort_keys=False)
    return path


def _mark(seed_dir, marker, message):
    with open(os.path.join(seed_dir, marker), "w") as f:
        f.write(message + "\n")


def run_seed(env, cfg, mode, normalization, seed, seed_dir):
    """
    Task: One PPO run; the curve CSV grows one row per iteration and the value network is
    checkpointed after every iteration. With cfg.save_targets the last iteration's value targets
    go to targets.csv. Returns (records, status).
    """
    writer = data_processor.CurveWriter(os.path.join(seed_dir, "curve.csv"), seed)
    records = []
    latest_targets = []

    def on_iteration(record, policy, value_model):
        records.append(record)
        writer.append(record)
        save_checkpoint(os.path.join(seed_dir, f"value-{record.iteration:04d}.npz"), value_model)

    def on_targets(iteration, targets):
        latest_targets[:] = targets

    estimator_cfg = ppo.EstimatorConfig(mode, normalization)
    try:
        policy, _ = ppo.train(env, cfg.ppo_for_seed(seed), estimator_cfg, on_iteration,
                              on_targets if cfg.save_targets else None)
    except ValueFitDivergence as e:
        logger.warning("seed %d of %s diverged: %s", seed, estimator_cfg.label, e)
        _mark(seed_dir, DIVERGED_MARKER, str(e))
        return records, "diverged"
    if latest_targets:
        data_processor.write_targets_csv(latest_targets, os.path.join(seed_dir, "targets.csv"))
    save_checkpoint(os.path.join(seed_dir, "policy.npz"), NormalizedMlp(policy.net))
    return records, "complete"


def run_experiment(cfg):
    """
    Task: Train every (estimator mode, normalization) variant on every seed.
    Inputs:
    - cfg = ExperimentConfig.
    Returns the output directory. A run that raises keeps its partial artifacts, a FAILED marker
    and a manifest with status failed.
    """
    out_dir = data_processor.ensure_dir(cfg.output_dir)
    env = cfg.make_environment()
    write_manifest(out_dir, cfg, "running")
    variants = {}
    curves_by_mode = {}
    status = "complete"
    seed_dir = out_dir
    try:
        for mode in cfg.modes:
            for normalization in cfg.normalizations:
                name = variant_name(mode, normalization)
                variant_dir = data_processor.ensure_dir(os.path.join(out_dir, name))
                variant_status = {}
                for seed in cfg.seeds:
                    seed_dir = data_processor.ensure_dir(os.path.join(variant_dir, f"seed-{seed}"))
                    logger.info("training %s, seed %d", name, seed)
                    records, seed_status = run_seed(env, cfg, mode, normalization, seed, seed_dir)
                    variant_status[seed] = seed_status
                    if seed_status == "diverged":
                        status = "diverged"
                curves = data_processor.read_curves([os.path.join(variant_dir, f"seed-{s}", "curve.csv")
                                                     for s in cfg.seeds])
                data_processor.write_csv(curves, os.path.join(variant_dir, "curves.csv"))
                data_processor.write_csv(data_processor.aggregate_curves(curves),
                                         os.path.join(variant_dir, "aggregate.csv"))
                data_processor.write_csv(data_processor.aggregate_curves(curves, data_processor.value_loss_heading),
                                         os.path.join(variant_dir, "value_loss_aggregate.csv"))
                if not curves.empty:
                    curves_by_mode[name] = curves
                variants[name] = variant_status
        if curves_by_mode:
            data_processor.write_csv(data_processor.timing_report(curves_by_mode), os.path.join(out_dir, "timing.csv"))
    except Exception as e:
        _mark(seed_dir, FAILED_MARKER, f"{type(e).__name__}: {e}")
        write_manifest(out_dir, cfg, "failed", variants, detail=f"{type(e).__name__}: {e}")
        raise
    write_manifest(out_dir, cfg, status, variants)
    logger.info("artifacts written to %s (status %s)", out_dir, status)
    return out_dir


# -- variance study ---------------------------------------------------------

def truncated_mqn(cfg):
    """The MQN config with the oracle's buffer cap unless one is already set."""
    if cfg.mqn.buffer_cap is not None:
        return cfg.mqn
    return dataclasses.replace(cfg.mqn, buffer_cap=cfg.oracle.cap)


def study_environment(cfg):
    """Oracle zeta and the optimal policy live on the truncated network, so the study runs there too."""
    if cfg.environment == "mqn" and (cfg.variance.zeta == "oracle" or cfg.variance.policy == "optimal"):
        env = mqn.MqnEnvironment(truncated_mqn(cfg))
        logger.info("study runs on the network truncated at %d jobs per buffer", env.cfg.buffer_cap)
        return env
    return cfg.make_environment()


def build_policy(cfg, env):
    name = cfg.variance.policy
    if name == "static_priority_1":
        return StaticPriorityPolicy(1)
    if name == "static_priority_2":
        return StaticPriorityPolicy(2)
    if name == "uniform":
        return UniformMqnPolicy(env.cfg) if cfg.environment == "mqn" else UniformRidePolicy(env.cfg)
    if name == "greedy":
        return GreedyRidePolicy(env.cfg)
    net = oracle.TruncatedMqn.build(env.cfg, env.cfg.buffer_cap)
    _, policy = oracle.optimal_average_cost(net, cfg.oracle.tolerance, cfg.oracle.max_iterations)
    return policy


def build_zeta(cfg, env, policy):
    """Returns (zeta, exact average cost or None)."""
    if cfg.variance.zeta == "zero":
        return ZeroValue(), None
    if cfg.variance.zeta == "checkpoint":
        return ValueNetwork(load_checkpoint(cfg.variance.checkpoint), env.encode, cfg.variance.checkpoint), None
    net = oracle.TruncatedMqn.build(env.cfg, env.cfg.buffer_cap)
    h, average_cost = oracle.exact_poisson_solution(net, policy)
    return TableValue(h, "oracle h"), average_cost


def study_modes(cfg):
    for kind in cfg.variance.modes:
        if kind == "amp_sampled":
            for L in cfg.variance.L_values:
                yield EstimatorMode(kind, L)
        else:
            yield EstimatorMode(kind)


def variance_study(cfg, seed=None):
    """
    Task: Variance of the target at each anchor, for every estimator mode and sample size, with the
    policy and zeta held fixed. All modes reuse the same simulated episodes.
    Inputs:
    - cfg = ExperimentConfig (its variance section),
    - seed = random seed, first configured seed by default.
    Returns the variance table (also written to <out>/variance.csv).
    """
    seed = cfg.seeds[0] if seed is None else seed
    env = study_environment(cfg)
    policy = build_policy(cfg, env)
    zeta, average_cost = build_zeta(cfg, env, policy)
    bundle = EstimatorBundle(env, policy, zeta, list(cfg.variance.anchors), average_cost)

    episodes = cfg.variance.episodes
    trajectories = estimators.simulate_bundle(bundle, episodes, episode_rng(seed, 0, 0))
    logger.info("simulated %d episodes with policy %s, zeta %s", episodes, cfg.variance.policy, zeta.descriptor)

    rows = []
    for k, mode in enumerate(study_modes(cfg)):
        rng = episode_rng(seed, 0, k, SCENARIO_STREAM)
        for est in estimators.estimator_variance(bundle, mode, episodes, rng, trajectories):
            rows.append({"mode": mode.kind, "L": mode.L if mode.L is not None else "",
                         "anchor": str(est.anchor), "mean": est.mean, "variance": est.variance,
                         "episodes": est.episodes})
            logger.info("%s at %s: mean %.6g, variance %.6g over %d episodes",
                        mode.label, est.anchor, est.mean, est.variance, est.episodes)
    frame = data_processor.variance_frame(rows)
    out_dir = data_processor.ensure_dir(cfg.output_dir)
    data_processor.write_csv(frame, os.path.join(out_dir, "variance.csv"))
    return frame


def sampling_error_study(cfg, L, episodes=1, seed=None):
    """
    Task: How far sampled targets with L draws are from the exact ones, against their 3-sigma
    Monte Carlo bound, on MQN episodes under the study policy and zeta.
    Returns a list of (mean absolute deviation, bound), one per episode.
    """
    seed = cfg.seeds[0] if seed is None else seed
    env = study_environment(cfg)
    policy = build_policy(cfg, env)
    zeta, average_cost = build_zeta(cfg, env, policy)
    report = []
    for episode in range(episodes):
        traj = env.simulate(policy, episode_rng(seed, 0, episode))
        avg = average_cost if average_cost is not None else estimators.estimate_average_cost([traj])
        report.append(estimators.sampling_error_report(
            traj, zeta, policy, env.cfg, avg, L, episode_rng(seed, 0, episode, SCENARIO_STREAM)))
    return report


# -- oracle export ----------------------------------------------------------

def export_oracle(cfg):
    """
    Task: Solve the truncated network exactly: optimal average cost by relative value iteration,
    the relative values h of the optimal policy and of the study policy.
    Writes <out>/oracle.csv (q1, q2, q3, h, action) and <out>/oracle_summary.yaml.
    """
    mqn_cfg = dataclasses.replace(cfg.mqn, buffer_cap=cfg.oracle.cap)
    net = oracle.TruncatedMqn.build(mqn_cfg, cfg.oracle.cap)
    optimal_cost, optimal_policy = oracle.optimal_average_cost(net, cfg.oracle.tolerance, cfg.oracle.max_iterations)
    h, policy_cost = oracle.exact_poisson_solution(net, optimal_policy)
    summary = {"cap": cfg.oracle.cap, "states": len(net.states), "optimal_average_cost": optimal_cost,
               "optimal_policy_poisson_cost": policy_cost}

    study_policy = cfg.variance.policy
    if study_policy != "optimal":
        _, fixed_cost = oracle.exact_poisson_solution(net, build_policy(cfg, mqn.MqnEnvironment(mqn_cfg)))
        summary[f"{study_policy}_average_cost"] = fixed_cost

    out_dir = data_processor.ensure_dir(cfg.output_dir)
    data_processor.write_csv(oracle.oracle_frame(net, h, optimal_policy), os.path.join(out_dir, "oracle.csv"))
    with open(os.path.join(out_dir, "oracle_summary.yaml"), "w") as f:
        yaml.safe_dump(summary, f, sort_keys=False)
    logger.info("oracle: optimal average cost %.10g on %d states", optimal_cost, len(net.states))
    return summary


def rerender_timing(artifact_dir):
    """Rebuild timing.csv from the per-variant curves of an earlier run."""
    curves_by_mode = {name: frame for name, frame in read_variant_curves(artifact_dir).items() if not frame.empty}
    frame = data_processor.timing_report(curves_by_mode)
    data_processor.write_csv(frame, os.path.join(artifact_dir, "timing.csv"))
    return frame
