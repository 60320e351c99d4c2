"""Deterministic RNG streams derived from (global seed, purpose tags).

Every stochastic step in the pipeline (splits, balancing, weight init,
dropout, batch shuffling, synthesis) draws from its own Philox stream so
that results are reproducible regardless of evaluation order and safe to
parallelize.
"""

import hashlib

import numpy as np


def _tag_entropy(tag) -> int:
    digest = hashlib.sha256(repr(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Counter-based generator keyed by the global seed plus purpose tags.

    Tags may be strings or ints (e.g. ``rng_for(seed, "dropout", epoch, i)``);
    distinct tag tuples give statistically independent streams.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    entropy.extend(_tag_entropy(t) for t in tags)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
