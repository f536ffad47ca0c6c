import logging
import os

import numpy as np
import pandas as pd
from scipy import stats

from amplab.errors import ContractViolation

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"

seed_heading = "seed"
iteration_heading = "iteration"
metric_heading = "metric"
value_loss_heading = "value_loss"
sim_heading = "sim_s"
prep_heading = "prep_s"
train_heading = "train_s"

CURVE_COLUMNS = [seed_heading, iteration_heading, metric_heading, value_loss_heading,
                 sim_heading, prep_heading, train_heading]
AGGREGATE_COLUMNS = [iteration_heading, "mean", "ci_low", "ci_high"]
TIMING_COLUMNS = ["mode", "simulation_min", "preprocessing_min", "training_min", "total_min"]
VARIANCE_COLUMNS = ["mode", "L", "anchor", "mean", "variance", "episodes"]


def initialise_curve_frame():
    """
    task: an empty per-seed learning curve table.
    output: data frame with the curve columns and their types.
    """
    return pd.DataFrame({
        seed_heading: pd.Series(dtype="int"),
        iteration_heading: pd.Series(dtype="int"),
        metric_heading: pd.Series(dtype="float"),
        value_loss_heading: pd.Series(dtype="float"),
        sim_heading: pd.Series(dtype="float"),
        prep_heading: pd.Series(dtype="float"),
        train_heading: pd.Series(dtype="float"),
    })


def curve_row(seed, record):
    return {
        seed_heading: seed,
        iteration_heading: record.iteration,
        metric_heading: record.metric,
        value_loss_heading: record.value_loss,
        sim_heading: record.sim_s,
        prep_heading: record.prep_s,
        train_heading: record.train_s,
    }


def records_to_frame(seed, records):
    rows = [curve_row(seed, r) for r in records]
    if not rows:
        return initialise_curve_frame()
    return pd.DataFrame(rows, columns=CURVE_COLUMNS)


def write_csv(frame, path):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.debug("wrote %s (%d rows)", path, len(frame))
    return path


class CurveWriter:
    """
    Appends one row per finished iteration, flushing as it goes, so a crashed run keeps
    every iteration it completed.
    """

    def __init__(self, path, seed):
        self.path = path
        self.seed = seed
        write_csv(initialise_curve_frame(), path)

    def append(self, record):
        row = pd.DataFrame([curve_row(self.seed, record)], columns=CURVE_COLUMNS)
        row.to_csv(self.path, mode="a", header=False, index=False, float_format=FLOAT_FORMAT)


def read_csv(path):
    """Reads a table written by write_csv; 17-digit floats come back bit for bit."""
    return pd.read_csv(path, float_precision="round_trip")


def read_curves(paths):
    frames = [read_csv(p) for p in paths]
    frames = [f for f in frames if len(f)]
    if not frames:
        return initialise_curve_frame()
    return pd.concat(frames, ignore_index=True)


def t_interval(values, confidence=0.95):
    """Mean and symmetric Student-t interval; one value gives a zero-width interval."""
    values = np.asarray(values, dtype=float)
    mean = float(values.mean())
    if len(values) < 2:
        return mean, mean, mean
    half = float(stats.t.ppf(0.5 + confidence / 2, len(values) - 1) * values.std(ddof=1) / np.sqrt(len(values)))
    return mean, mean - half, mean + half


def aggregate_curves(curves, column=metric_heading):
    """
    task: mean and 95% t-interval over seeds at every iteration.
    input: per-seed curve table (several seeds stacked), column to aggregate.
    output: data frame (iteration, mean, ci_low, ci_high). Seeds with different iteration
    counts are truncated to the shortest, with a warning.
    """
    if curves.empty:
        return pd.DataFrame({c: pd.Series(dtype="float") for c in AGGREGATE_COLUMNS})
    lengths = curves.groupby(seed_heading)[iteration_heading].max()
    shortest = int(lengths.min())
    if lengths.nunique() > 1:
        logger.warning("seeds ran different iteration counts %s; truncating to %d",
                       dict(lengths.astype(int)), shortest)
    kept = curves[curves[iteration_heading] <= shortest]
    rows = []
    for iteration, group in kept.groupby(iteration_heading, sort=True):
        mean, low, high = t_interval(group[column].to_numpy())
        rows.append({iteration_heading: int(iteration), "mean": mean, "ci_low": low, "ci_high": high})
    return pd.DataFrame(rows, columns=AGGREGATE_COLUMNS)


def timing_report(curves_by_mode):
    """
    task: mean minutes per iteration in each phase, one row per estimator mode.
    input: mapping mode label -> curve table (or list of IterationRecords).
    output: data frame with the timing columns in fixed order, rows sorted by mode label.
    """
    if not curves_by_mode:
        raise ContractViolation("timing_report needs at least one mode")
    rows = []
    for mode, records in sorted(curves_by_mode.items()):
        frame = records if isinstance(records, pd.DataFrame) else records_to_frame(0, records)
        if frame.empty:
            raise ContractViolation(f"no iteration records for mode {mode}")
        sim = frame[sim_heading].mean() / 60
        prep = frame[prep_heading].mean() / 60
        train = frame[train_heading].mean() / 60
        rows.append({"mode": mode, "simulation_min": sim, "preprocessing_min": prep,
                     "training_min": train, "total_min": sim + prep + train})
    return pd.DataFrame(rows, columns=TIMING_COLUMNS)


def variance_frame(rows):
    return pd.DataFrame(rows, columns=VARIANCE_COLUMNS)


def write_targets_csv(target_sets, path):
    """Per-position targets of several episodes, one frame per TargetSet."""
    frames = [targets.to_frame(episode) for episode, targets in enumerate(target_sets)]
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    return write_csv(frame, path)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
