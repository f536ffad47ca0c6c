"""
Loads the experiment configuration file and resolves it into frozen config objects.

The file is YAML; JSON files load unchanged. Every key is checked against DEFAULTS, so a typo
fails with a ConfigError naming the dotted field instead of being silently ignored.
"""
import copy
import dataclasses
import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd
import yaml

from amplab.control.approximator import NORMALIZATION_KINDS
from amplab.control.ppo import PpoConfig
from amplab.errors import ConfigError, ContractViolation
from amplab.estimation.estimators import ESTIMATOR_KINDS, EstimatorMode
from amplab.simulation import mqn, ridehail

logger = logging.getLogger(__name__)

CONFIG_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'config.yaml')

ENVIRONMENTS = ("mqn", "ridehail")
MQN_POLICIES = ("static_priority_1", "static_priority_2", "uniform", "optimal")
RIDE_POLICIES = ("greedy", "uniform")
ZETA_KINDS = ("zero", "oracle", "checkpoint")

DEFAULTS = {
    "environment": {
        "name": "mqn",
        "mqn": {
            "regime_label": "IL",
            "lambda1": None,
            "lambda2": None,
            "mu1": None,
            "mu2": None,
            "mu3": None,
            "episode_length": 1000,
            "buffer_cap": None,
            "allow_idling": True,
        },
        "ridehail": {
            "R": 5,
            "n_cars": 20,
            "H": 60,
            "patience": 1,
            "arrival_rates": 0.15,
            "travel_time": None,
        },
    },
    "ppo": {
        "iterations": 30,
        "episodes": 10,
        "clip_epsilon": 0.2,
        "policy_epochs": 4,
        "policy_step_size": 3e-4,
        "policy_batch_size": 256,
        "value_epochs": 10,
        "value_step_size": 3e-4,
        "value_batch_size": 256,
        "hidden_sizes": [64, 64],
        "entropy_coef": 0.0,
    },
    "estimator": {
        "modes": [{"kind": "plain_mc"}],
    },
    "normalization": ["input_only"],
    "seeds": [0],
    "output_dir": "results",
    "workers": 1,
    "save_targets": False,
    "variance": {
        "episodes": 1000,
        "modes": None,
        "L_values": [5, 50, 500],
        "policy": None,
        "zeta": "zero",
        "checkpoint": None,
        "anchors": None,
    },
    "oracle": {
        "cap": 10,
        "tolerance": 1e-9,
        "max_iterations": 1000000,
    },
    "logging": {
        "level": "INFO",
    },
}


@dataclass(frozen=True)
class VarianceConfig:
    episodes: int
    modes: tuple
    L_values: tuple
    policy: str
    zeta: str
    checkpoint: str | None
    anchors: tuple


@dataclass(frozen=True)
class OracleConfig:
    cap: int
    tolerance: float
    max_iterations: int


@dataclass(frozen=True)
class ExperimentConfig:
    environment: str
    mqn: mqn.MqnConfig | None
    ridehail: ridehail.RideHailConfig | None
    ppo: PpoConfig
    modes: tuple
    normalizations: tuple
    seeds: tuple
    output_dir: str
    workers: int
    save_targets: bool
    variance: VarianceConfig
    oracle: OracleConfig
    log_level: str
    raw: dict

    def make_environment(self):
        if self.environment == "mqn":
            return mqn.MqnEnvironment(self.mqn)
        return ridehail.RideHailEnvironment(self.ridehail)

    def ppo_for_seed(self, seed):
        return dataclasses.replace(self.ppo, seed=seed, workers=self.workers)


def load_config(path=None):
    """
    task: read a config file into a plain mapping.
    input: path to a YAML (or JSON) file, the packaged config.yaml by default.
    output: the parsed mapping (None for an empty file).
    """
    with open(path or CONFIG_PATH, 'r') as f:
        return yaml.safe_load(f)


def merge_defaults(raw, defaults=DEFAULTS, prefix=""):
    """Overlay raw on defaults, rejecting keys that defaults do not know about."""
    if raw is None:
        return copy.deepcopy(defaults)
    if not isinstance(raw, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", f"expected a mapping, got {type(raw).__name__}")
    merged = copy.deepcopy(defaults)
    for key, value in raw.items():
        field = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(field, "unknown key")
        if isinstance(defaults[key], dict):
            merged[key] = merge_defaults(value, defaults[key], f"{field}.")
        else:
            merged[key] = value
    return merged


def _checked(field, build):
    try:
        return build()
    except ContractViolation as e:
        raise ConfigError(field, str(e)) from e
    except (TypeError, ValueError) as e:
        raise ConfigError(field, f"invalid value ({e})") from e


def _int_list(field, values):
    if not isinstance(values, (list, tuple)) or not values:
        raise ConfigError(field, "expected a nonempty list")
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in values):
        raise ConfigError(field, f"expected integers, got {values}")
    return tuple(values)


def read_matrix(field, value, R, base_dir=None):
    """
    task: turn a matrix setting into an R x R array.
    input: a scalar (broadcast), a nested list, or a path to a headerless CSV (row = origin).
    """
    if isinstance(value, str):
        path = value if base_dir is None or os.path.isabs(value) else os.path.join(base_dir, value)
        if not os.path.exists(path):
            raise ConfigError(field, f"matrix file {path} does not exist")
        matrix = pd.read_csv(path, header=None).to_numpy(dtype=float)
    elif isinstance(value, (int, float)) and not isinstance(value, bool):
        matrix = np.full((R, R), float(value))
    else:
        matrix = np.asarray(value, dtype=float)
    if matrix.shape != (R, R):
        raise ConfigError(field, f"expected a {R}x{R} matrix, got shape {matrix.shape}")
    return matrix


def _mqn_config(section):
    section = dict(section)
    label = section.pop("regime_label")
    field = "environment.mqn"
    if label == "custom":
        missing = [k for k in ("lambda1", "lambda2", "mu1", "mu2", "mu3") if section[k] is None]
        if missing:
            raise ConfigError(f"{field}.{missing[0]}", "required when regime_label is custom")
        return _checked(field, lambda: mqn.MqnConfig(regime_label=label, **section))
    if label not in mqn.REGIME_PRESETS:
        raise ConfigError(f"{field}.regime_label", f"must be one of {mqn.REGIMES}, got {label!r}")
    return _checked(field, lambda: mqn.MqnConfig.from_regime(label, **section))


def _ride_config(section, base_dir):
    field = "environment.ridehail"
    R = section["R"]
    if not isinstance(R, int) or R < 1:
        raise ConfigError(f"{field}.R", f"must be an integer >= 1, got {R}")
    rates = read_matrix(f"{field}.arrival_rates", section["arrival_rates"], R, base_dir)
    travel = None
    if section["travel_time"] is not None:
        travel = read_matrix(f"{field}.travel_time", section["travel_time"], R, base_dir)
    return _checked(field, lambda: ridehail.desk_scale_config(
        R=R, n_cars=section["n_cars"], H=section["H"], patience=section["patience"],
        arrival_rates=rates, travel_time=travel))


def _modes(field, entries):
    if not isinstance(entries, list) or not entries:
        raise ConfigError(field, "expected a nonempty list of {kind, L} entries")
    modes = []
    for k, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ConfigError(f"{field}[{k}]", "expected a mapping with kind and optional L")
        unknown = set(entry) - {"kind", "L"}
        if unknown:
            raise ConfigError(f"{field}[{k}].{sorted(unknown)[0]}", "unknown key")
        modes.append(_checked(f"{field}[{k}]", lambda: EstimatorMode(entry.get("kind"), entry.get("L"))))
    return tuple(modes)


def _variance_kinds(kinds, environment):
    """Estimator kinds to compare; amp_sampled is swept over L_values."""
    if kinds is None:
        return ("plain_mc", "amp_exact", "amp_sampled") if environment == "mqn" else ("plain_mc", "amp_sampled")
    if not isinstance(kinds, list) or not kinds:
        raise ConfigError("variance.modes", "expected a nonempty list of estimator kinds")
    for k, kind in enumerate(kinds):
        if kind not in ESTIMATOR_KINDS:
            raise ConfigError(f"variance.modes[{k}]", f"must be one of {ESTIMATOR_KINDS}, got {kind!r}")
        if kind == "amp_exact" and environment == "ridehail":
            raise ConfigError(f"variance.modes[{k}]", "amp_exact is intractable at ride-hailing epoch ends")
    return tuple(kinds)


def _anchors(field, anchors, environment, ride_cfg=None):
    """MQN anchors are (q1, q2, q3); ride-hailing anchors are (epoch t, decision step i), both from 1."""
    if anchors is None:
        return ((0, 0, 0),) if environment == "mqn" else ((1, 1),)
    width = 3 if environment == "mqn" else 2
    if not isinstance(anchors, list) or not anchors:
        raise ConfigError(field, "expected a nonempty list of anchors")
    resolved = []
    for k, anchor in enumerate(anchors):
        if not isinstance(anchor, (list, tuple)) or len(anchor) != width:
            raise ConfigError(f"{field}[{k}]", f"expected {width} integers, got {anchor}")
        anchor = tuple(int(x) for x in anchor)
        if environment == "mqn" and min(anchor) < 0:
            raise ConfigError(f"{field}[{k}]", f"queue lengths must be >= 0, got {list(anchor)}")
        if environment == "ridehail":
            t, i = anchor
            if not 1 <= t <= ride_cfg.H:
                raise ConfigError(f"{field}[{k}]", f"epoch must lie in 1..{ride_cfg.H}, got {t}")
            if not 1 <= i <= ride_cfg.n_cars:
                raise ConfigError(f"{field}[{k}]", f"decision step must lie in 1..{ride_cfg.n_cars}, got {i}")
        resolved.append(anchor)
    return tuple(resolved)


def resolve_experiment_config(raw, base_dir=None):
    """
    task: validate a raw config mapping and build the ExperimentConfig.
    input: the mapping from load_config (None means all defaults); base_dir resolves relative matrix paths.
    output: ExperimentConfig; any problem raises ConfigError naming the field.
    """
    merged = merge_defaults(raw)
    env_section = merged["environment"]
    environment = env_section["name"]
    if environment not in ENVIRONMENTS:
        raise ConfigError("environment.name", f"must be one of {ENVIRONMENTS}, got {environment!r}")
    mqn_cfg = _mqn_config(env_section["mqn"]) if environment == "mqn" else None
    ride_cfg = _ride_config(env_section["ridehail"], base_dir) if environment == "ridehail" else None

    ppo_section = dict(merged["ppo"])
    ppo_section["hidden_sizes"] = _int_list("ppo.hidden_sizes", ppo_section["hidden_sizes"])
    ppo_cfg = _checked("ppo", lambda: PpoConfig(**ppo_section))

    modes = _modes("estimator.modes", merged["estimator"]["modes"])
    normalizations = merged["normalization"]
    if isinstance(normalizations, str):
        normalizations = [normalizations]
    for k, scheme in enumerate(normalizations):
        if scheme not in NORMALIZATION_KINDS:
            raise ConfigError(f"normalization[{k}]", f"must be one of {NORMALIZATION_KINDS}, got {scheme!r}")

    seeds = _int_list("seeds", merged["seeds"])
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", f"seeds must be distinct, got {list(seeds)}")

    workers = merged["workers"]
    if not isinstance(workers, int) or workers < 1:
        raise ConfigError("workers", f"must be an integer >= 1, got {workers}")
    if not isinstance(merged["save_targets"], bool):
        raise ConfigError("save_targets", f"must be true or false, got {merged['save_targets']!r}")

    var = merged["variance"]
    policies = MQN_POLICIES if environment == "mqn" else RIDE_POLICIES
    policy = var["policy"] or policies[0]
    if policy not in policies:
        raise ConfigError("variance.policy", f"must be one of {policies} for {environment}, got {policy!r}")
    if var["zeta"] not in ZETA_KINDS:
        raise ConfigError("variance.zeta", f"must be one of {ZETA_KINDS}, got {var['zeta']!r}")
    if var["zeta"] == "oracle" and environment != "mqn":
        raise ConfigError("variance.zeta", "the oracle value is only available for mqn")
    if var["zeta"] == "checkpoint" and not var["checkpoint"]:
        raise ConfigError("variance.checkpoint", "required when zeta is checkpoint")
    if not isinstance(var["episodes"], int) or var["episodes"] < 2:
        raise ConfigError("variance.episodes", f"must be an integer >= 2, got {var['episodes']}")
    variance = VarianceConfig(
        episodes=var["episodes"],
        modes=_variance_kinds(var["modes"], environment),
        L_values=_int_list("variance.L_values", var["L_values"]),
        policy=policy,
        zeta=var["zeta"],
        checkpoint=var["checkpoint"],
        anchors=_anchors("variance.anchors", var["anchors"], environment, ride_cfg),
    )
    if any(L < 1 for L in variance.L_values):
        raise ConfigError("variance.L_values", "sample sizes must be >= 1")

    orc = merged["oracle"]
    if not isinstance(orc["cap"], int) or orc["cap"] < 0:
        raise ConfigError("oracle.cap", f"must be an integer >= 0, got {orc['cap']}")
    oracle = OracleConfig(cap=orc["cap"], tolerance=float(orc["tolerance"]), max_iterations=int(orc["max_iterations"]))

    level = str(merged["logging"]["level"]).upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        raise ConfigError("logging.level", f"unknown level {level!r}")

    return ExperimentConfig(
        environment=environment,
        mqn=mqn_cfg,
        ridehail=ride_cfg,
        ppo=ppo_cfg,
        modes=modes,
        normalizations=tuple(normalizations),
        seeds=seeds,
        output_dir=str(merged["output_dir"]),
        workers=workers,
        save_targets=merged["save_targets"],
        variance=variance,
        oracle=oracle,
        log_level=level,
        raw=merged,
    )


def apply_overrides(raw, seed=None, out=None, workers=None):
    """Command-line flags win over the file."""
    raw = copy.deepcopy(raw) if raw else {}
    if seed is not None:
        raw["seeds"] = [seed]
    if out is not None:
        raw["output_dir"] = out
    if workers is not None:
        raw["workers"] = workers
    return raw
