import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from amplab.api.read_results import get_sorted_variant_dirs, read_aggregate, read_manifest

logger = logging.getLogger(__name__)


def _metric_label(artifact_dir):
    try:
        environment = read_manifest(artifact_dir)["config"]["environment"]["name"]
    except (OSError, KeyError, TypeError):
        return "metric"
    return "average cost" if environment == "mqn" else "matching rate"


def plot_curves(artifact_dir, out_path=None):
    """
    Plots the learning curve and the value loss of every variant with their 95% intervals.
    Returns the path of the saved PNG.
    """
    fig, ax = plt.subplots(1, 2, figsize=(14, 5))
    panels = ((ax[0], "metric", _metric_label(artifact_dir)), (ax[1], "value_loss", "value loss"))

    for variant_dir in get_sorted_variant_dirs(artifact_dir):
        name = os.path.basename(variant_dir)
        for axis, column, _ in panels:
            frame = read_aggregate(variant_dir, column)
            if frame.empty:
                continue
            axis.plot(frame["iteration"], frame["mean"], label=name)
            axis.fill_between(frame["iteration"], frame["ci_low"], frame["ci_high"], alpha=0.2)

    for axis, _, ylabel in panels:
        axis.set_xlabel("Iteration")
        axis.set_ylabel(ylabel)
        axis.legend()
    ax[0].set_title("Learning curves (95% CI)")
    ax[1].set_title("Value network loss")
    ax[1].set_yscale("log")

    plt.tight_layout()
    out_path = out_path or os.path.join(artifact_dir, "curves.png")
    fig.savefig(out_path)
    plt.close(fig)
    logger.info("plot written to %s", out_path)
    return out_path
