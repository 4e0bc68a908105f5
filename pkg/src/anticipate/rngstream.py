"""Counter-based random number streams.

Every stochastic routine in the package takes an explicit generator built
here, so a run is fully determined by its seeds. Streams are Philox
(counter-based) generators keyed through SeedSequence, which makes derived
streams independent and platform-stable.
"""

from __future__ import annotations

import numpy as np


def rng_stream(*keys: int) -> np.random.Generator:
    """Build a named Philox stream from one or more integer keys."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))


def video_stream(seed: int, video_index: int) -> np.random.Generator:
    # per-video stream id is seed XOR video index, so episode generation can
    # fan out across workers without coordination
    return rng_stream(seed ^ video_index)
