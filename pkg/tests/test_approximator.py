import numpy as np
import pytest

from amplab.control.approximator import (
    Adam, Mlp, NormalizationStats, NormalizedMlp, PolicyHead, ValueNetwork, fit_value, forward, gradient,
    init_mlp, load_checkpoint, masked_softmax, mse_loss, save_checkpoint,
)
from amplab.errors import ContractViolation, ValueFitDivergence
from amplab.simulation.rng import make_rng


def numeric_gradient(net, inputs, targets, h=1e-6):
    grads = []
    for p in net.params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            saved = p[idx]
            p[idx] = saved + h
            up = mse_loss(net, inputs, targets)
            p[idx] = saved - h
            down = mse_loss(net, inputs, targets)
            p[idx] = saved
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


class TestMlp:
    """Tests for the tanh MLP and its gradient."""

    def test_layer_sizes(self):
        """
        Tests that init_mlp builds the requested shapes.
        """
        net = init_mlp([3, 5, 2], make_rng(0))
        assert net.layer_sizes == [3, 5, 2]
        assert [w.shape for w in net.weights] == [(3, 5), (5, 2)]

    def test_forward_single_and_batch_agree(self):
        """
        Tests that a row evaluated alone equals the same row inside a batch.
        """
        net = init_mlp([2, 4, 1], make_rng(1))
        batch = np.array([[0.1, -0.3], [1.0, 2.0]])
        np.testing.assert_allclose(forward(net, batch[1]), forward(net, batch)[1])

    def test_forward_by_hand(self):
        """
        Tests one hidden unit against the closed form.
        """
        net = Mlp([np.array([[2.0]]), np.array([[3.0]])], [np.array([0.5]), np.array([-1.0])])
        assert forward(net, np.array([1.0]))[0] == pytest.approx(3.0 * np.tanh(2.5) - 1.0)

    def test_wrong_input_dimension(self):
        """
        Tests that an input of the wrong width is a contract violation.
        """
        with pytest.raises(ContractViolation):
            forward(init_mlp([2, 3, 1], make_rng(0)), np.zeros(3))

    def test_gradient_matches_finite_differences(self):
        """
        Tests the backpropagated gradient of a 2-8-1 net against central differences (relative error < 1e-4).
        """
        rng = make_rng(5)
        net = init_mlp([2, 8, 1], rng)
        inputs = rng.normal(size=(6, 2))
        targets = rng.normal(size=(6, 1))
        exact = gradient(net, inputs, targets)
        approx = numeric_gradient(net, inputs, targets)
        for g, n in zip(exact, approx):
            assert np.linalg.norm(g - n) / max(np.linalg.norm(g) + np.linalg.norm(n), 1e-12) < 1e-4

    def test_gradient_rejects_empty_batch(self):
        """
        Tests that a batch of zero rows is refused.
        """
        with pytest.raises(ContractViolation):
            gradient(init_mlp([2, 3, 1], make_rng(0)), np.zeros((0, 2)), np.zeros((0, 1)))


class TestAdam:
    """Tests for the Adam optimizer."""

    def test_first_step_moves_by_step_size(self):
        """
        Tests that the bias-corrected first step is step_size times the gradient sign.
        """
        p = np.array([1.0, -2.0])
        Adam([p], step_size=0.1).step([np.array([3.0, -0.5])])
        np.testing.assert_allclose(p, [0.9, -1.9], atol=1e-6)

    def test_minimises_quadratic(self):
        """
        Tests convergence on a convex bowl.
        """
        p = np.array([5.0, -3.0])
        optimizer = Adam([p], step_size=0.05)
        for _ in range(2000):
            optimizer.step([2 * p])
        np.testing.assert_allclose(p, [0.0, 0.0], atol=0.1)


class TestNormalization:
    """Tests for the value-target normalization schemes."""

    def test_unknown_kind(self):
        """
        Tests that an unknown scheme name is rejected.
        """
        with pytest.raises(ContractViolation):
            NormalizationStats.from_data("batch", np.zeros((2, 1)), np.zeros(2))

    def test_input_only_keeps_targets(self):
        """
        Tests that input_only standardizes features and leaves targets alone.
        """
        inputs = np.array([[1.0, 10.0], [3.0, 10.0]])
        stats = NormalizationStats.from_data("input_only", inputs, np.array([5.0, 7.0]))
        np.testing.assert_allclose(stats.standardize_inputs(inputs)[:, 0], [-1.0, 1.0])
        assert np.all(np.isfinite(stats.standardize_inputs(inputs)))
        assert (stats.out_mean, stats.out_std) == (0.0, 1.0)

    def test_output_statistics_round_trip(self):
        """
        Tests that destandardize undoes standardize on the targets.
        """
        targets = np.array([100.0, 140.0, 90.0])
        stats = NormalizationStats.from_data("input_and_output", np.eye(3), targets)
        np.testing.assert_allclose(stats.destandardize_outputs(stats.standardize_targets(targets)), targets)

    @pytest.mark.parametrize("scheme", ["none", "input_only", "input_and_output"])
    def test_fit_predicts_in_raw_units(self, scheme):
        """
        Tests that a fitted model recovers a linear map in the original target scale.
        """
        rng = make_rng(2)
        inputs = rng.uniform(-1, 1, size=(400, 2))
        targets = 5.0 + 2.0 * inputs[:, 0] - inputs[:, 1]
        model = NormalizedMlp(init_mlp([2, 16, 1], rng))
        model, _ = fit_value(model, inputs, targets, scheme, rng, epochs=400, step_size=1e-2, batch_size=64)
        assert model.stats.kind == scheme
        error = np.abs(model.predict(inputs) - targets).mean()
        assert error < 0.1 * np.abs(targets - targets.mean()).mean()

    @pytest.mark.parametrize("scheme", ["none", "input_only", "input_and_output"])
    def test_reported_loss_in_raw_units(self, scheme):
        """
        Tests that the returned loss is the raw-scale mean squared error whatever the scheme.
        """
        rng = make_rng(6)
        inputs = rng.normal(size=(50, 3))
        targets = 40.0 + 15.0 * inputs[:, 0]
        model, loss = fit_value(NormalizedMlp(init_mlp([3, 8, 1], rng)), inputs, targets, scheme, rng, epochs=5,
                                step_size=1e-2, batch_size=16)
        assert loss == pytest.approx(np.mean((model.predict(inputs) - targets) ** 2), rel=1e-9)

    def test_zero_step_size_leaves_parameters(self):
        """
        Tests that a fit with step size 0 changes no weight or bias.
        """
        rng = make_rng(8)
        model = NormalizedMlp(init_mlp([2, 6, 1], rng))
        before = [p.copy() for p in model.net.params]
        fit_value(model, rng.normal(size=(20, 2)), rng.normal(size=20), "input_and_output", rng, epochs=3,
                  step_size=0.0, batch_size=8)
        for old, new in zip(before, model.net.params):
            np.testing.assert_array_equal(old, new)

    def test_fit_reports_divergence(self):
        """
        Tests that a fit whose loss overflows raises ValueFitDivergence with the iteration.
        """
        rng = make_rng(0)
        model = NormalizedMlp(init_mlp([1, 4, 1], rng))
        with pytest.raises(ValueFitDivergence) as error:
            with np.errstate(all="ignore"):
                fit_value(model, np.ones((4, 1)), np.full(4, 1e300), "none", rng, epochs=3, step_size=1e300,
                          iteration=7)
        assert error.value.iteration == 7

    def test_fit_rejects_mismatched_lengths(self):
        """
        Tests that inputs and targets must have matching lengths.
        """
        model = NormalizedMlp(init_mlp([1, 4, 1], make_rng(0)))
        with pytest.raises(ContractViolation):
            fit_value(model, np.ones((3, 1)), np.ones(2), "none", make_rng(0))


class TestPolicyHead:
    """Tests for masked softmax and the policy head."""

    def test_masked_entries_are_exactly_zero(self):
        """
        Tests that infeasible actions get probability 0 and the rest sum to 1.
        """
        probs = masked_softmax(np.array([[5.0, 1.0, 2.0]]), np.array([[False, True, True]]))
        assert probs[0, 0] == 0.0
        assert probs.sum() == pytest.approx(1.0)
        assert probs[0, 2] == pytest.approx(np.e / (np.e + 1))

    def test_all_masked_rejected(self):
        """
        Tests that a state with no feasible action is refused.
        """
        with pytest.raises(ContractViolation):
            masked_softmax(np.zeros((1, 2)), np.zeros((1, 2), dtype=bool))

    def test_head_and_frozen_copy(self):
        """
        Tests that the frozen copy answers like the head and ignores later parameter changes.
        """
        net = init_mlp([2, 4, 3], make_rng(3))
        head = PolicyHead(net, lambda states: np.array(states, dtype=float),
                          lambda state: np.array([True, True, state[0] > 0]))
        state = (1.0, 0.5)
        frozen = head.frozen()
        np.testing.assert_allclose(frozen(state), head(state))
        net.weights[-1][:, 0] += 1.0
        assert not np.allclose(frozen(state), head(state))
        assert head((0.0, 1.0))[2] == 0.0


class TestCheckpoint:
    """Tests for value-network checkpoints."""

    def test_round_trip_preserves_predictions(self, tmp_path):
        """
        Tests that a loaded checkpoint predicts exactly what the saved model did.
        """
        rng = make_rng(4)
        inputs = rng.normal(size=(20, 3))
        model = NormalizedMlp(init_mlp([3, 5, 1], rng))
        fit_value(model, inputs, inputs.sum(axis=1) * 3 + 1, "input_and_output", rng, epochs=2)
        path = tmp_path / "value.npz"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        assert loaded.stats.kind == "input_and_output"
        np.testing.assert_array_equal(loaded.predict(inputs), model.predict(inputs))

    def test_version_mismatch_rejected(self, tmp_path):
        """
        Tests that an unknown format version is refused.
        """
        model = NormalizedMlp(init_mlp([1, 2, 1], make_rng(0)))
        path = tmp_path / "value.npz"
        save_checkpoint(path, model)
        with np.load(path) as data:
            arrays = dict(data)
        arrays["format_version"] = np.array(99)
        with open(path, "wb") as f:
            np.savez(f, **arrays)
        with pytest.raises(ContractViolation):
            load_checkpoint(path)

    def test_value_network_wraps_encoder(self):
        """
        Tests that ValueNetwork encodes states before predicting and handles an empty batch.
        """
        model = NormalizedMlp(Mlp([np.array([[2.0]])], [np.array([1.0])]))
        value = ValueNetwork(model, lambda states: np.array(states, dtype=float).reshape(-1, 1))
        np.testing.assert_allclose(value.evaluate_batch([1.0, 3.0]), [3.0, 7.0])
        assert len(value.evaluate_batch([])) == 0
