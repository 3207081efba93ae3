"""Deterministic random stream derivation.

A single master seed fans out into named substreams (data generation,
partitioning, weight init, client sampling, batching, probe selection) so
every component draws independent, reproducible randomness regardless of
execution order or worker count.
"""

from __future__ import annotations

import numpy as np

STREAM_DATA = 0
STREAM_PARTITION = 1
STREAM_INIT = 2
STREAM_SAMPLING = 3
STREAM_BATCHING = 4
STREAM_PROBE = 5

#: Tag registry, recorded in run log headers.
STREAM_NAMES = {
    "data": STREAM_DATA,
    "partition": STREAM_PARTITION,
    "init": STREAM_INIT,
    "sampling": STREAM_SAMPLING,
    "batching": STREAM_BATCHING,
    "probe": STREAM_PROBE,
}


def substream(master_seed: int, *path: int) -> np.random.Generator:
    """Generator for the substream identified by ``path`` under ``master_seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, path)]))


def stream_seed(master_seed: int, *path: int) -> int:
    """64-bit integer seed derived from ``master_seed`` and a tag path."""
    seq = np.random.SeedSequence([int(master_seed), *map(int, path)])
    return int(seq.generate_state(1, dtype=np.uint64)[0])
