import os
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest
import yaml
from scipy import stats

from amplab.control.approximator import load_checkpoint
from amplab.errors import ValueFitDivergence
from amplab.services import harness
from amplab.services.config_loader import resolve_experiment_config


def small_raw(out_dir, **sections):
    raw = {
        "environment": {"name": "mqn", "mqn": {"episode_length": 40}},
        "ppo": {"iterations": 2, "episodes": 2, "hidden_sizes": [8], "policy_epochs": 1, "value_epochs": 2,
                "policy_batch_size": 32, "value_batch_size": 32},
        "estimator": {"modes": [{"kind": "plain_mc"}, {"kind": "amp_exact"}]},
        "normalization": ["input_only", "input_and_output"],
        "seeds": [1, 2],
        "output_dir": str(out_dir),
    }
    raw.update(sections)
    return raw


def read_yaml(path):
    with open(path) as f:
        return yaml.safe_load(f)


class TestRunExperiment:
    """Tests for the training harness and its artifacts."""

    def test_artifact_layout(self, tmp_path):
        """
        Tests one directory per variant and seed, checkpoints per iteration and a complete manifest.
        """
        cfg = resolve_experiment_config(small_raw(tmp_path))
        harness.run_experiment(cfg)

        manifest = read_yaml(tmp_path / harness.MANIFEST)
        assert manifest["status"] == "complete"
        assert manifest["seeds"] == [1, 2]
        assert manifest["config"]["ppo"]["iterations"] == 2
        assert sorted(manifest["variants"]) == ["amp_exact__input_and_output", "amp_exact__input_only",
                                                "plain_mc__input_and_output", "plain_mc__input_only"]

        for name in manifest["variants"]:
            variant = tmp_path / name
            for seed in (1, 2):
                seed_dir = variant / f"seed-{seed}"
                assert pd.read_csv(seed_dir / "curve.csv")["iteration"].tolist() == [1, 2]
                assert (seed_dir / "value-0001.npz").exists()
                assert (seed_dir / "policy.npz").exists()
            assert len(pd.read_csv(variant / "curves.csv")) == 4
            aggregate = pd.read_csv(variant / "aggregate.csv")
            assert aggregate["iteration"].tolist() == [1, 2]
            assert (aggregate["ci_low"] <= aggregate["mean"]).all()
            assert (variant / "value_loss_aggregate.csv").exists()

        timing = pd.read_csv(tmp_path / "timing.csv")
        assert len(timing) == 4
        assert np.allclose(timing["total_min"],
                           timing["simulation_min"] + timing["preprocessing_min"] + timing["training_min"])

    def test_checkpoint_keeps_normalization(self, tmp_path):
        """
        Tests that a value checkpoint records the scheme it was trained with.
        """
        raw = small_raw(tmp_path, normalization=["input_and_output"], seeds=[3],
                        estimator={"modes": [{"kind": "plain_mc"}]})
        harness.run_experiment(resolve_experiment_config(raw))
        model = load_checkpoint(tmp_path / "plain_mc__input_and_output" / "seed-3" / "value-0002.npz")
        assert model.stats.kind == "input_and_output"

    def test_zero_iterations(self, tmp_path):
        """
        Tests that zero iterations leave a manifest and empty curves but no timing table.
        """
        raw = small_raw(tmp_path, seeds=[1], estimator={"modes": [{"kind": "plain_mc"}]},
                        normalization=["input_only"])
        raw["ppo"]["iterations"] = 0
        harness.run_experiment(resolve_experiment_config(raw))
        assert read_yaml(tmp_path / harness.MANIFEST)["status"] == "complete"
        assert pd.read_csv(tmp_path / "plain_mc__input_only" / "seed-1" / "curve.csv").empty
        assert not (tmp_path / "timing.csv").exists()

    def test_divergence_marks_seed(self, tmp_path):
        """
        Tests that a diverged seed leaves a DIVERGED marker and the manifest says so.
        """
        raw = small_raw(tmp_path, seeds=[1], estimator={"modes": [{"kind": "plain_mc"}]},
                        normalization=["input_only"])
        with patch("amplab.control.ppo.train", side_effect=ValueFitDivergence("loss is nan", 1)):
            harness.run_experiment(resolve_experiment_config(raw))
        assert (tmp_path / "plain_mc__input_only" / "seed-1" / harness.DIVERGED_MARKER).exists()
        manifest = read_yaml(tmp_path / harness.MANIFEST)
        assert manifest["status"] == "diverged"
        assert manifest["variants"]["plain_mc__input_only"] == {1: "diverged"}

    def test_failure_keeps_partial_artifacts(self, tmp_path):
        """
        Tests that an unexpected error writes FAILED and a failed manifest before re-raising.
        """
        raw = small_raw(tmp_path, seeds=[1], estimator={"modes": [{"kind": "plain_mc"}]},
                        normalization=["input_only"])
        with patch("amplab.control.ppo.train", side_effect=RuntimeError("disk full")):
            with pytest.raises(RuntimeError):
                harness.run_experiment(resolve_experiment_config(raw))
        assert (tmp_path / "plain_mc__input_only" / "seed-1" / harness.FAILED_MARKER).exists()
        manifest = read_yaml(tmp_path / harness.MANIFEST)
        assert manifest["status"] == "failed"
        assert "disk full" in manifest["detail"]

    def test_rerender_timing(self, tmp_path):
        """
        Tests that the timing table rebuilt from the stored curves matches the one the run wrote, row for row.
        """
        raw = small_raw(tmp_path, seeds=[1], normalization=["input_only"])
        harness.run_experiment(resolve_experiment_config(raw))
        written = pd.read_csv(tmp_path / "timing.csv", float_precision="round_trip")
        assert written["mode"].tolist() == ["amp_exact__input_only", "plain_mc__input_only"]
        os.remove(tmp_path / "timing.csv")
        frame = harness.rerender_timing(str(tmp_path))
        assert frame["mode"].tolist() == written["mode"].tolist()
        np.testing.assert_array_equal(frame["total_min"].to_numpy(), written["total_min"].to_numpy())

    def test_save_targets(self, tmp_path):
        """
        Tests that save_targets writes the last iteration's targets, one row per decision step, and that
        they are absent by default.
        """
        raw = small_raw(tmp_path, seeds=[1], normalization=["input_only"],
                        estimator={"modes": [{"kind": "amp_exact"}]}, save_targets=True)
        harness.run_experiment(resolve_experiment_config(raw))
        targets = pd.read_csv(tmp_path / "amp_exact__input_only" / "seed-1" / "targets.csv")
        assert list(targets.columns) == ["episode", "k", "target", "mode"]
        assert sorted(targets["episode"].unique().tolist()) == [0, 1]
        assert len(targets) == 2 * 40
        assert (targets["mode"] == "amp_exact").all()

        other = tmp_path / "default"
        harness.run_experiment(resolve_experiment_config(small_raw(other, seeds=[1], normalization=["input_only"])))
        assert not (other / "plain_mc__input_only" / "seed-1" / "targets.csv").exists()


def variance_raw(out_dir, **variance):
    settings = {"episodes": 20, "L_values": [2, 5], "policy": "static_priority_1", "zeta": "oracle",
                "anchors": [[0, 0, 0]]}
    settings.update(variance)
    return {
        "environment": {"name": "mqn", "mqn": {"episode_length": 60}},
        "seeds": [4],
        "output_dir": str(out_dir),
        "variance": settings,
        "oracle": {"cap": 3},
    }


class TestVarianceStudy:
    """Tests for the fixed-policy variance study."""

    def test_oracle_zeta_removes_variance(self, tmp_path):
        """
        Tests that exact AMP with the oracle value has no variance at the empty state while plain MC does.
        """
        frame = harness.variance_study(resolve_experiment_config(variance_raw(tmp_path)))
        assert frame["mode"].tolist() == ["plain_mc", "amp_exact", "amp_sampled", "amp_sampled"]
        written = pd.read_csv(tmp_path / "variance.csv")
        assert list(written.columns) == ["mode", "L", "anchor", "mean", "variance", "episodes"]
        variance = dict(zip(frame["mode"] + frame["L"].astype(str), frame["variance"]))
        assert variance["amp_exact"] < 1e-12
        assert variance["plain_mc"] > 1e-3
        assert (frame["episodes"] == 20).all()

    def test_same_seed_same_table(self, tmp_path):
        """
        Tests that the study is reproducible under its seed.
        """
        cfg = resolve_experiment_config(variance_raw(tmp_path, zeta="zero", modes=["plain_mc", "amp_sampled"]))
        a = harness.variance_study(cfg)
        b = harness.variance_study(cfg)
        pd.testing.assert_frame_equal(a, b)

    def test_ridehail_study(self, tmp_path):
        """
        Tests the default ride-hailing study on a small system.
        """
        raw = {
            "environment": {"name": "ridehail", "ridehail": {"R": 2, "n_cars": 3, "H": 6}},
            "seeds": [1],
            "output_dir": str(tmp_path),
            "variance": {"episodes": 10, "L_values": [3], "anchors": [[1, 1]]},
        }
        frame = harness.variance_study(resolve_experiment_config(raw))
        assert frame["mode"].tolist() == ["plain_mc", "amp_sampled"]

    def test_sampling_error_within_bound(self, tmp_path):
        """
        Tests that sampled targets stay within their 3-sigma bound of the exact ones.
        """
        cfg = resolve_experiment_config(variance_raw(tmp_path))
        for mad, bound in harness.sampling_error_study(cfg, L=20, episodes=2):
            assert mad <= bound + 1e-12


class TestExportOracle:
    """Tests for the oracle export."""

    def test_files_and_costs(self, tmp_path):
        """
        Tests the exported table and that the optimal cost does not exceed the study policy's.
        """
        summary = harness.export_oracle(resolve_experiment_config(variance_raw(tmp_path)))
        assert summary["states"] == 64
        assert summary["optimal_average_cost"] <= summary["static_priority_1_average_cost"] + 1e-8
        assert summary["optimal_policy_poisson_cost"] == pytest.approx(summary["optimal_average_cost"], abs=1e-6)
        table = pd.read_csv(tmp_path / "oracle.csv")
        assert len(table) == 64
        assert table.loc[(table.q1 == 0) & (table.q2 == 0) & (table.q3 == 0), "h"].iloc[0] == 0.0
        assert read_yaml(tmp_path / "oracle_summary.yaml")["cap"] == 3


@pytest.mark.slow
def test_il_variance_reduction(tmp_path):
    """
    Tests that on the truncated IL network exact AMP with the oracle value has at most a fifth of plain MC's variance.
    """
    raw = variance_raw(tmp_path, episodes=1000, modes=["plain_mc", "amp_exact"])
    raw["environment"]["mqn"]["episode_length"] = 1000
    raw["oracle"]["cap"] = 10
    frame = harness.variance_study(resolve_experiment_config(raw))
    variance = dict(zip(frame["mode"], frame["variance"]))
    assert variance["amp_exact"] <= 0.2 * variance["plain_mc"]


@pytest.mark.slow
def test_sample_size_trend(tmp_path):
    """
    Tests that sampled-target variance with the oracle value does not grow with L beyond interval overlap.
    """
    raw = variance_raw(tmp_path, episodes=300, modes=["amp_sampled"], L_values=[5, 50, 500])
    raw["environment"]["mqn"]["episode_length"] = 500
    frame = harness.variance_study(resolve_experiment_config(raw))
    n = frame["episodes"].to_numpy()
    v = frame["variance"].to_numpy()
    # chi-square interval on each variance estimate
    low = (n - 1) * v / stats.chi2.ppf(0.975, n - 1)
    high = (n - 1) * v / stats.chi2.ppf(0.025, n - 1)
    for k in range(len(v) - 1):
        assert low[k + 1] <= high[k]


@pytest.mark.slow
def test_sampled_mode_spends_more_simulation_time(tmp_path):
    """
    Tests that drawing next states during rollouts makes the sampled mode's simulation phase slower than plain MC's.
    """
    raw = small_raw(tmp_path, seeds=[1], normalization=["input_only"],
                    estimator={"modes": [{"kind": "plain_mc"}, {"kind": "amp_sampled", "L": 500}]})
    raw["environment"]["mqn"]["episode_length"] = 500
    raw["ppo"]["iterations"] = 3
    harness.run_experiment(resolve_experiment_config(raw))
    timing = pd.read_csv(tmp_path / "timing.csv").set_index("mode")
    assert timing.loc["amp_sampled-L500__input_only", "simulation_min"] > \
        timing.loc["plain_mc__input_only", "simulation_min"]
