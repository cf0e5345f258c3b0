"""Named, independently seeded random streams for one simulation run."""

import numpy as np

# Fixed sub-stream ids; changing them changes every seeded result.
_STREAM_IDS = {
    "topology": 0,
    "traffic": 1,
    "mac": 2,
    "phy": 3,
}

_SEED_MASK = (1 << 64) - 1


def stream(master_seed: int, name: str) -> np.random.Generator:
    """Return the named PCG64 stream derived from a 64-bit master seed."""
    try:
        sub = _STREAM_IDS[name]
    except KeyError:
        raise ValueError(f"unknown random stream: {name!r}") from None
    ss = np.random.SeedSequence([master_seed & _SEED_MASK, sub])
    return np.random.Generator(np.random.PCG64(ss))
