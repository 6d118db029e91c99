"""Counter-based random streams keyed by (seed, request id, purpose).

Each request draws from its own generator, so results do not depend on the
order in which requests are processed or on how work is split.
"""
from __future__ import annotations

import numpy as np

PURPOSES = {
    "request": 1,
    "behavior": 2,
    "outcome": 3,
    "split": 4,
    "oracle": 5,
    "eval": 6,
    "init": 7,
    "shuffle": 8,
    "sample": 9,
    "eval_outcome": 10,
}


def stream(seed: int, request_id: int, purpose: str, *extra: int) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(request_id), PURPOSES[purpose], *map(int, extra)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
