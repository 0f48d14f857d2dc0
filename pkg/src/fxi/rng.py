"""Seeded substreams.

Every random draw comes from a Philox counter-based generator keyed by
``(seed, stage id, item index)`` through ``numpy.random.SeedSequence``, so
results do not depend on the order or thread in which items are processed.
"""

import numpy as np

STAGES = {
    "simulate": 1,
    "classify": 2,
    "emc": 3,
    "phase": 4,
    "post": 5,
    "bootstrap": 6,
    "limits": 7,
    "contrast": 8,
    "shape": 9,
}


def substream(seed, stage, index=0):
    """Independent generator for item ``index`` of ``stage`` (name or integer id)."""
    stage_id = STAGES[stage] if isinstance(stage, str) else int(stage)
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, stage_id, int(index)])
    return np.random.Generator(np.random.Philox(ss))
