"""Named, index-addressable random streams derived from a single integer seed."""

import numpy as np

STREAMS = {"fit": 0, "bootstrap": 1, "simulation": 2}


def seed_sequence(seed, *key) -> np.random.SeedSequence:
    """Child seed sequence at ``key`` below ``seed``.

    ``seed`` may be an int or an existing SeedSequence; ``key`` entries are
    stream names (see ``STREAMS``) or non-negative ints. The same
    (seed, key) always gives the same stream, whatever else was drawn.
    """
    spawn = tuple(STREAMS[k] if isinstance(k, str) else int(k) for k in key)
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + spawn)
    return np.random.SeedSequence(int(seed), spawn_key=spawn)


def generator(seed, *key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *key)))
