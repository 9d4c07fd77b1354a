"""
Counter-based random streams keyed by (seed, stream_id)
"""

import hashlib

import numpy as np

_MASK = (1 << 64) - 1


def generator(seed: int, stream_id: int) -> np.random.Generator:
    """Philox generator keyed by (seed, stream_id); the step index is the counter."""
    key = ((int(seed) & _MASK) << 64) | (int(stream_id) & _MASK)
    return np.random.Generator(np.random.Philox(key=key))


def stream_id_for(study: str, index: int) -> int:
    """Stable stream id for ensemble member `index` of a named study."""
    digest = hashlib.blake2b(f"{study}:{index}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")
