"""Reproducible random streams.

Every random draw in the package goes through :func:`trial_rng`, which keys a
counter-based Philox generator on ``(root_seed, *indices)``.  Streams for
different trials, sweep points or BSs are therefore independent of the order
in which they are consumed, so parallel and serial runs agree bit for bit.
"""

import numpy as np


def trial_rng(root_seed, *indices) -> np.random.Generator:
    key = [int(root_seed)] + [int(i) for i in indices]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return trial_rng(0 if seed_or_rng is None else seed_or_rng)
