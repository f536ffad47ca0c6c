"""
Small numpy function approximators: a tanh MLP with hand-written backpropagation, an Adam
optimizer, input/output standardization for value fitting, and a masked-softmax policy head.
"""
import logging
from dataclasses import dataclass

import numpy as np

from amplab.errors import ContractViolation, ValueFitDivergence
from amplab.estimation.estimators import ValueApproximation

logger = logging.getLogger(__name__)

NORMALIZATION_KINDS = ("none", "input_only", "input_and_output")
STD_FLOOR = 1e-8
CHECKPOINT_VERSION = 1


class Mlp:
    """Fully connected net, tanh on hidden layers and identity on the output layer."""

    def __init__(self, weights, biases):
        if len(weights) < 1 or len(weights) != len(biases):
            raise ContractViolation("an Mlp needs at least one layer and one bias per layer")
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def params(self):
        return self.weights + self.biases

    def copy(self):
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_mlp(layer_sizes, rng, output_scale=1.0):
    if len(layer_sizes) < 2:
        raise ContractViolation(f"layer_sizes needs at least 2 entries, got {layer_sizes}")
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        if k == len(layer_sizes) - 2:
            w *= output_scale
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases)


def _check_input(net, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.layer_sizes[0]:
        raise ContractViolation(f"input has dimension {x.shape[-1]}, net expects {net.layer_sizes[0]}")
    return x


def forward(net, x):
    """Evaluate the net on one input vector or a batch of row vectors."""
    return forward_with_cache(net, x)[0]


def forward_with_cache(net, x):
    x = _check_input(net, x)
    activations = [x]
    h = x
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        h = z if k == last else np.tanh(z)
        activations.append(h)
    return h, activations


def backward(net, activations, grad_output):
    """
    Task: Reverse-mode pass through the net.
    Inputs:
    - activations = layer outputs from forward_with_cache (input first),
    - grad_output = d(loss)/d(output), same shape as the output batch.
    Returns gradients shaped like net.weights + net.biases.
    """
    grad_w = [None] * len(net.weights)
    grad_b = [None] * len(net.biases)
    delta = np.asarray(grad_output, dtype=float)
    for k in range(len(net.weights) - 1, -1, -1):
        h_in = activations[k]
        grad_w[k] = np.atleast_2d(h_in).T @ np.atleast_2d(delta)
        grad_b[k] = np.atleast_2d(delta).sum(axis=0)
        if k > 0:
            delta = (delta @ net.weights[k].T) * (1.0 - activations[k] ** 2)
    return grad_w + grad_b


def mse_loss(net, inputs, targets):
    outputs = forward(net, inputs)
    return float(np.mean((outputs - np.asarray(targets, dtype=float).reshape(outputs.shape)) ** 2))


def gradient(net, inputs, targets):
    """Exact gradient of the batch-mean squared error."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if len(inputs) == 0:
        raise ContractViolation("gradient needs a nonempty batch")
    outputs, activations = forward_with_cache(net, inputs)
    targets = np.asarray(targets, dtype=float).reshape(outputs.shape)
    grad_output = 2.0 * (outputs - targets) / outputs.size
    return backward(net, activations, grad_output)


class Adam:
    """Adaptive moment estimation over a list of numpy parameter arrays, updated in place."""

    def __init__(self, params, step_size=3e-4, b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.step_size = step_size
        self.b1 = b1
        self.b2 = b2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads):
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g ** 2
            m_hat = self.m[i] / (1 - self.b1 ** self.t)
            v_hat = self.v[i] / (1 - self.b2 ** self.t)
            p -= self.step_size * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class NormalizationStats:
    kind: str
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: float = 0.0
    out_std: float = 1.0

    @classmethod
    def identity(cls, input_dim):
        return cls("none", np.zeros(input_dim), np.ones(input_dim))

    @classmethod
    def from_data(cls, kind, inputs, targets):
        if kind not in NORMALIZATION_KINDS:
            raise ContractViolation(f"normalization must be one of {NORMALIZATION_KINDS}, got {kind!r}")
        inputs = np.atleast_2d(inputs)
        if kind == "none":
            return cls.identity(inputs.shape[1])
        stats = cls(kind, inputs.mean(axis=0), np.maximum(inputs.std(axis=0), STD_FLOOR))
        if kind == "input_and_output":
            targets = np.asarray(targets, dtype=float)
            stats.out_mean = float(targets.mean())
            stats.out_std = float(max(targets.std(), STD_FLOOR))
        return stats

    def standardize_inputs(self, inputs):
        return (np.asarray(inputs, dtype=float) - self.in_mean) / self.in_std

    def standardize_targets(self, targets):
        return (np.asarray(targets, dtype=float) - self.out_mean) / self.out_std

    def destandardize_outputs(self, outputs):
        return np.asarray(outputs, dtype=float) * self.out_std + self.out_mean


class NormalizedMlp:
    """An Mlp plus the statistics it was trained under. predict() always answers in raw target units."""

    def __init__(self, net, stats=None):
        self.net = net
        self.stats = stats or NormalizationStats.identity(net.layer_sizes[0])

    def predict(self, inputs):
        raw = forward(self.net, self.stats.standardize_inputs(np.atleast_2d(inputs)))
        return self.stats.destandardize_outputs(raw[:, 0])

    def copy(self):
        stats = NormalizationStats(self.stats.kind, self.stats.in_mean.copy(), self.stats.in_std.copy(),
                                   self.stats.out_mean, self.stats.out_std)
        return NormalizedMlp(self.net.copy(), stats)


def fit_value(model, inputs, targets, scheme, rng, epochs=10, step_size=3e-4, batch_size=256, iteration=None):
    """
    Task: Fit a value model to (inputs, targets) by minibatch Adam.
    Inputs:
    - model = NormalizedMlp, trained in place; its statistics are recomputed from this dataset,
    - inputs = encoded states (n x d), targets = n raw-scale values,
    - scheme = "none", "input_only" or "input_and_output",
    - rng = numpy Generator used for minibatch shuffling.
    Returns (model, loss) where loss is the mean squared error of the raw-scale predictions over the
    whole dataset after the last epoch, so losses of different schemes are comparable.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    targets = np.asarray(targets, dtype=float).reshape(-1)
    n = len(targets)
    if n == 0 or len(inputs) != n:
        raise ContractViolation(f"fit_value needs a nonempty dataset with matching lengths ({len(inputs)} vs {n})")

    model.stats = NormalizationStats.from_data(scheme, inputs, targets)
    x = model.stats.standardize_inputs(inputs)
    y = model.stats.standardize_targets(targets).reshape(-1, 1)
    optimizer = Adam(model.net.params, step_size=step_size)

    loss = mse_loss(model.net, x, y)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            optimizer.step(gradient(model.net, x[batch], y[batch]))
        loss = mse_loss(model.net, x, y)
        if not np.isfinite(loss):
            raise ValueFitDivergence(f"value loss became non-finite at epoch {epoch + 1} ({scheme})", iteration)
        logger.debug("value fit epoch %d: loss %.6g", epoch + 1, loss)
    # destandardize is affine in the output, so raw squared errors scale by out_std^2
    return model, loss * model.stats.out_std ** 2


class ValueNetwork(ValueApproximation):
    """A frozen NormalizedMlp seen as a state -> value map, through an environment's encoder."""

    def __init__(self, model, encode, descriptor="value net"):
        self.model = model
        self.encode = encode
        self.descriptor = descriptor

    def evaluate_batch(self, states):
        if len(states) == 0:
            return np.zeros(0)
        return self.model.predict(self.encode(states))


def masked_softmax(logits, mask):
    """Softmax restricted to mask; masked entries get probability exactly 0."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    mask = np.atleast_2d(mask)
    if not np.all(mask.any(axis=1)):
        raise ContractViolation("every state needs at least one feasible action")
    shifted = np.where(mask, logits, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    weights = np.where(mask, np.exp(shifted), 0.0)
    return weights / weights.sum(axis=1, keepdims=True)


class PolicyHead:
    """
    One logit per action template, masked by the environment's feasibility rule.
    Calling the head on a state gives the action distribution the simulators expect.
    """

    def __init__(self, net, encode, mask):
        self.net = net
        self.encode = encode
        self.mask = mask

    def probs_batch(self, features, masks):
        return masked_softmax(forward(self.net, features), masks)

    def __call__(self, state):
        return self.probs_batch(self.encode([state]), self.mask(state)[None, :])[0]

    def frozen(self):
        """A memoising copy for rollouts; the parameters do not change while episodes run."""
        return CachedPolicy(PolicyHead(self.net.copy(), self.encode, self.mask))


class CachedPolicy:

    def __init__(self, policy):
        self.policy = policy
        self._cache = {}

    def __call__(self, state):
        probs = self._cache.get(state)
        if probs is None:
            probs = self.policy(state)
            self._cache[state] = probs
        return probs


def save_checkpoint(path, model):
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "layer_sizes": np.array(model.net.layer_sizes),
        "norm_kind": np.array(model.stats.kind),
        "in_mean": model.stats.in_mean,
        "in_std": model.stats.in_std,
        "out_stats": np.array([model.stats.out_mean, model.stats.out_std]),
    }
    for k, (w, b) in enumerate(zip(model.net.weights, model.net.biases)):
        arrays[f"W{k}"] = w
        arrays[f"b{k}"] = b
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path):
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ContractViolation(f"checkpoint {path} has format version {version}, expected {CHECKPOINT_VERSION}")
        n_layers = len(data["layer_sizes"]) - 1
        net = Mlp([data[f"W{k}"] for k in range(n_layers)], [data[f"b{k}"] for k in range(n_layers)])
        out_mean, out_std = data["out_stats"]
        stats = NormalizationStats(str(data["norm_kind"]), data["in_mean"].copy(), data["in_std"].copy(),
                                   float(out_mean), float(out_std))
    return NormalizedMlp(net, stats)
