import os
import re

import pandas as pd
import yaml

from amplab.errors import ContractViolation
from amplab.services.data_processor import read_csv

MANIFEST = "manifest.yaml"


def get_sorted_variant_dirs(artifact_dir):
    """
    Returns the variant directories (<mode>__<normalization>) of an artifact directory, sorted by name.
    """
    if not os.path.isdir(artifact_dir):
        raise ContractViolation(f"{artifact_dir} is not an artifact directory")
    names = sorted(name for name in os.listdir(artifact_dir)
                   if "__" in name and os.path.isdir(os.path.join(artifact_dir, name)))
    return [os.path.join(artifact_dir, name) for name in names]


def get_sorted_seed_dirs(variant_dir):
    """
    Returns the seed-<n> directories of a variant, sorted numerically by seed.
    """
    names = [name for name in os.listdir(variant_dir) if re.fullmatch(r"seed-\d+", name)]
    names.sort(key=lambda x: int(re.search(r'\d+', x).group()))
    return [os.path.join(variant_dir, name) for name in names]


def read_manifest(artifact_dir):
    with open(os.path.join(artifact_dir, MANIFEST), 'r') as f:
        return yaml.safe_load(f)


def read_variant_curves(artifact_dir):
    """
    Loads curves.csv of every variant, falling back to the per-seed files of a run that stopped
    before writing it. Returns {variant name: data frame}.
    """
    curves = {}
    for variant_dir in get_sorted_variant_dirs(artifact_dir):
        name = os.path.basename(variant_dir)
        stacked = os.path.join(variant_dir, "curves.csv")
        if os.path.exists(stacked):
            curves[name] = read_csv(stacked)
            continue
        frames = [read_csv(os.path.join(d, "curve.csv")) for d in get_sorted_seed_dirs(variant_dir)
                  if os.path.exists(os.path.join(d, "curve.csv"))]
        curves[name] = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    return curves


def read_aggregate(variant_dir, column="metric"):
    name = "aggregate.csv" if column == "metric" else f"{column}_aggregate.csv"
    return read_csv(os.path.join(variant_dir, name))

