"""Counter-based random streams keyed by semantic identity.

Every random draw in the harness comes from a Philox generator whose key is
derived from a tuple such as ``(seed, scene_id, step_index)``.  The same tuple
always yields the same stream, independent of call order or worker count.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _word(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def key_words(*parts) -> list[int]:
    """Map a heterogeneous key tuple to a list of 64-bit words."""
    return [_word(p) for p in parts]


def keyed_generator(*parts) -> np.random.Generator:
    """Return a Philox-backed generator keyed by ``parts``.

    Strings are hashed with BLAKE2b so keys are stable across processes and
    Python versions (``hash()`` is salted per process and is never used).
    """
    seq = np.random.SeedSequence(key_words(*parts))
    return np.random.Generator(np.random.Philox(seq))
