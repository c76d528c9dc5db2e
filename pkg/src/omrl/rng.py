"""Deterministic random-stream factory.

One master seed fans out into independent named streams. Each stream is a
Philox (counter-based) generator keyed by the SHA-256 digest of
``"<seed>:<label>"``, so environment, trainer, and evaluation randomness
never share state and any stream can be reproduced from (seed, label) alone.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _digest_words(seed: int, stream_label: str) -> list[int]:
    digest = hashlib.sha256(f"{int(seed) & _MASK64}:{stream_label}".encode()).digest()
    return [int.from_bytes(digest[i : i + 8], "little") for i in range(0, 32, 8)]


def seeded_rng(seed: int, stream_label: str) -> np.random.Generator:
    """Return the deterministic generator for (seed, stream_label)."""
    ss = np.random.SeedSequence(entropy=_digest_words(seed, stream_label))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed: int, stream_label: str) -> int:
    """Derive a scalar seed (e.g. for env resets) from a master seed and label."""
    return _digest_words(seed, stream_label)[0]
