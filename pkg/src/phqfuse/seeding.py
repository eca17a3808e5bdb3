"""Named deterministic random substreams derived from one root seed.

Every stochastic component (weight init, batch shuffling, dropout,
sampling, fixture synthesis) draws from its own named stream so that
changing one consumer never perturbs another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    """Return an independent generator for (seed, name).

    Streams for distinct names are statistically independent; the same
    (seed, name) pair always yields the same sequence.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), _name_key(name)]))


def substream_seed(seed: int, name: str, index: int = 0) -> int:
    """Derive a child integer seed, e.g. for per-call sampling seeds."""
    ss = np.random.SeedSequence([int(seed), _name_key(name), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
