"""Named, splittable random streams.

All randomness in a run flows from one root seed. Every consumer asks for
a substream by name (plus optional integer keys such as epoch or node id),
which yields an independent counter-based Philox generator. Identical
(seed, names) always reproduce the identical stream, regardless of how
many other streams were drawn from in between.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_words(parts: tuple) -> list[int]:
    h = hashlib.blake2b(digest_size=16)
    for part in parts:
        if isinstance(part, (int, np.integer)):
            h.update(b"i" + int(part).to_bytes(16, "little", signed=True))
        elif isinstance(part, str):
            h.update(b"s" + part.encode("utf-8") + b"\x00")
        else:
            raise TypeError(f"stream key parts must be str or int, got {type(part)!r}")
    digest = h.digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def substream(seed: int, *parts: str | int) -> np.random.Generator:
    """Return the generator for the substream named by ``parts``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + _key_words(parts)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *parts: str | int) -> int:
    """A stable derived integer seed (for nested runs such as k-fold members)."""
    words = _key_words((int(seed),) + parts)
    return (words[0] << 32 | words[1]) & 0x7FFFFFFFFFFFFFFF


class StreamFactory:
    """Root seed plus a convenience handle for deriving substreams."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, *parts: str | int) -> np.random.Generator:
        return substream(self.seed, *parts)
