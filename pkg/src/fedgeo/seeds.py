"""Deterministic derivation of every RNG seed from the master seed.

Each consumer gets its own stream id so that, e.g., changing the number of
rounds never shifts the partition or probe draws.
"""

from __future__ import annotations

import numpy as np

STREAM_SYNTH = 0
STREAM_SPLIT = 1
STREAM_PARTITION = 2
STREAM_PROBE = 3
STREAM_MODEL_INIT = 4
STREAM_ROUND = 5
STREAM_PARTICIPATION = 6
STREAM_PERTURB = 7


def derive_seed(master_seed: int, stream: int, *extra: int) -> int:
    entropy = (int(master_seed), int(stream), *(int(e) for e in extra))
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
