"""Stable seed derivation shared by every randomized component.

Python's builtin hash() is salted per process, so all derived seeds go
through sha256 of a string key instead. Same inputs -> same seed on any
machine, any run.
"""

from __future__ import annotations

import hashlib
import random


def derive_seed(*parts: object) -> int:
    """Derive a 63-bit seed from an arbitrary key tuple."""
    key = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def derive_rng(*parts: object) -> random.Random:
    return random.Random(derive_seed(*parts))
