"""Stable 64-bit hashing for splits, token buckets, and derived RNG seeds.

FNV-1a is used everywhere a hash must be reproducible across processes and
platforms (Python's builtin ``hash`` is salted per process).
"""

from __future__ import annotations

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes | str) -> int:
    """64-bit FNV-1a hash of a byte string (str is encoded as UTF-8)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK
    return h


def derive_seed(seed: int, *labels) -> int:
    """Deterministic child seed from a root seed and a purpose path.

    Distinct label paths give independent streams, so e.g. data shuffling and
    model initialization can't perturb each other when one of them changes.
    """
    key = ":".join([str(int(seed))] + [str(l) for l in labels])
    return fnv1a_64(key) & 0x7FFFFFFF
