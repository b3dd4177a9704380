"""Deterministic splittable random streams.

Every stochastic routine in this package draws from a substream keyed by
(seed, purpose tag, indices).  Streams are counter-based (Philox), so any
worker can open any substream independently and the reduction order — not
the scheduling order — determines the output.  Identical key, identical
bytes, on any machine and with any worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["substream", "SEED_MAX"]

# Seeds are unsigned 64-bit, per the experiment config contract.
SEED_MAX = 2**64 - 1


def _encode(part) -> bytes:
    """Stable byte encoding for one key component."""
    if isinstance(part, bool):  # bool is an int subclass; tag separately
        return b"b" + (b"1" if part else b"0")
    if isinstance(part, (int, np.integer)):
        v = int(part)
        return b"i" + v.to_bytes(16, "little", signed=True)
    if isinstance(part, str):
        raw = part.encode("utf-8")
        return b"s" + len(raw).to_bytes(4, "little") + raw
    raise TypeError(f"substream key parts must be int or str, got {type(part)!r}")


def substream(seed: int, *key) -> np.random.Generator:
    """Open the generator for substream ``(seed, *key)``.

    Parameters
    ----------
    seed : int
        Master seed, 0 <= seed <= 2**64 - 1.
    *key : int or str
        Purpose tag and indices, e.g. ``("br-noise",)`` or
        ``("dev", pin_index, agent)``.  The same tuple always yields a
        generator producing identical draws; python's salted ``hash`` is
        never involved.
    """
    if not 0 <= int(seed) <= SEED_MAX:
        raise ValueError(f"seed must be in [0, 2**64-1], got {seed}")
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little"))
    for part in key:
        h.update(_encode(part))
    counter_key = int.from_bytes(h.digest(), "little")
    return np.random.Generator(np.random.Philox(key=counter_key))
