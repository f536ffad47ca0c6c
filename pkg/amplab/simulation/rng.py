"""Seeded random streams. Every episode gets its own generator derived from (seed, iteration, episode)."""
import numpy as np


SIMULATION_STREAM = 0
SCENARIO_STREAM = 1


def make_rng(seed):
    return np.random.default_rng(seed)


def episode_rng(seed, iteration, episode, stream=SIMULATION_STREAM):
    """
    Task: Build the generator for one episode of one iteration.
    Inputs:
    - seed = experiment seed,
    - iteration, episode = counters, so the stream does not depend on which worker runs the episode,
    - stream = SIMULATION_STREAM for rollouts, SCENARIO_STREAM for sampled next states.
    """
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(iteration), int(episode), int(stream)))
    return np.random.Generator(np.random.PCG64(sequence))


def sample_index(probs, rng):
    """Draw one index from a probability vector (one uniform per draw)."""
    u = rng.random()
    index = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    # guard against cumsum ending a hair below 1
    last = int(np.flatnonzero(np.asarray(probs) > 0)[-1])
    return min(index, last)
