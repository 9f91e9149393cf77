"""Named random streams derived from a single 64-bit seed."""

from __future__ import annotations

import numpy as np

STREAMS = ("init", "data", "chains", "sample", "inpaint", "mixing", "eval")


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Return the generator for stream ``name`` of ``seed``.

    Streams are independent of one another, so adding draws to one subsystem
    never shifts the randomness seen by another. Extra integer ``keys``
    select independent sub-streams (one per frame, per repeat, ...).
    """
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF,
                                 spawn_key=(STREAMS.index(name),) + tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(seq))
