"""Counter-based random streams with explicit splitting.

All randomness in the package flows through Philox4x64, a named
counter-based generator, keyed by ``(seed, purpose, index)``.  Purposes are
small integers from the registry below and ``index`` identifies the element
within a purpose (sequence number, epoch*step, ...).  Distinct keys give
statistically independent streams, so datasets and training runs are
reproducible regardless of evaluation order or parallelism.
"""

from __future__ import annotations

import numpy as np

# Purpose registry. Values are part of the reproducibility contract for
# generated artifacts; do not renumber.
WALK = 0
EMIT = 1
INIT = 2
WIENER = 3
Z0 = 4
SHUFFLE = 5
SAMPLER = 6

_MASK64 = (1 << 64) - 1
_INDEX_BITS = 48


def stream(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    """Return the Philox stream for (seed, purpose, index)."""
    if purpose < 0 or purpose >= (1 << 16):
        raise ValueError(f"purpose out of range: {purpose}")
    if index < 0 or index >= (1 << _INDEX_BITS):
        raise ValueError(f"stream index out of range: {index}")
    key = np.array(
        [
            np.uint64(seed & _MASK64),
            np.uint64((purpose << _INDEX_BITS) | index),
        ],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))
