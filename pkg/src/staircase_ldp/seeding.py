"""Reproducible random streams.

Every stream is a PCG64 generator built from ``SeedSequence(seed,
spawn_key=key)``.  Keys are small integer tuples; the conventions used in this
package are:

* ``(user_id,)`` for a single client's perturbation,
* ``(STREAM_*, ...)`` tags below for experiment-level draws.

Two different keys under one seed give statistically independent streams, so
clients can perturb concurrently without sharing generator state.
"""

from __future__ import annotations

import numpy as np

STREAM_TRUTH = 1_000_001
STREAM_PERTURB = 1_000_002
STREAM_SCENARIO = 1_000_003
STREAM_HOLDOUT = 1_000_004


def make_rng(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def user_rng(seed: int, user_id: int) -> np.random.Generator:
    return make_rng(seed, user_id)
