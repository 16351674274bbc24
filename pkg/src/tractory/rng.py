"""Counter-based random number streams.

Every stochastic task (one streamline launch, one training run, one
phantom realization) owns an independent Philox stream derived from a
global seed plus an integer key tuple. Streams are independent of
scheduling: the same key always yields the same draws no matter which
worker consumes it or in what order.
"""

import numpy as np


def stream(global_seed: int, *key: int) -> np.random.Generator:
    """Return an independent generator keyed by ``(global_seed, *key)``."""
    ss = np.random.SeedSequence(int(global_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def uniforms(global_seed: int, key: tuple, n: int) -> np.ndarray:
    """Pre-draw ``n`` uniforms from the stream for the given key.

    Pre-drawing makes consumption order irrelevant: draw ``i`` is the
    same number whether or not earlier draws were used.
    """
    return stream(global_seed, *key).random(n)
