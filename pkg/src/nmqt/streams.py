"""Deterministic per-trajectory random streams.

Trajectory ``i`` of a run with seed ``s`` draws from
``PCG64(SeedSequence(entropy=s, spawn_key=(i,)))``. The stream depends only on
``(s, i)``, so NMQT and ESM trajectories with the same pair see the same
uniform numbers and results do not depend on worker scheduling.
"""

from __future__ import annotations

import numpy as np


def substream(seed: int, traj_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(traj_index),))
    return np.random.Generator(np.random.PCG64(ss))
