"""Splittable deterministic random streams.

Every random draw in the package comes from a stream derived from a root
seed plus a structured path, e.g. ``substream(run_seed, SYNTH_GEN, t)``.
Streams with distinct paths are statistically independent, and the same
path always yields the same stream, which is what makes runs
bit-reproducible and safe to partition across workers.
"""

import numpy as np

# Stream purposes. Values are part of the on-disk reproducibility contract:
# changing them changes every seeded artifact.
TASK_LOGITS = 1
DATASET_ITEM = 2
SYNTH_GEN = 3
BATCH_SHUFFLE = 4
SYNTH_SHUFFLE = 5
SAMPLER = 6


def substream(*path: int) -> np.random.Generator:
    """Return the deterministic generator for a (seed, purpose, ...) path."""
    for part in path:
        if part < 0:
            raise ValueError(f"stream path components must be >= 0, got {part}")
    return np.random.default_rng(np.random.SeedSequence(tuple(int(p) for p in path)))
