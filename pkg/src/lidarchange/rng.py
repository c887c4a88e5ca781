"""Deterministic random-number streams.

Every stochastic operation in the package draws from a counter-based Philox
generator keyed by an explicit seed, optionally refined by a stream tuple
(e.g. per session / per frame).  Two calls with the same seed and stream are
bit-identical on every platform.
"""

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a Philox generator for ``seed``, sub-keyed by ``stream``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(seed=ss))
