"""Deterministic seed derivation shared by every module.

All randomness in a run flows from one 64-bit run seed. Independent
streams (per client, per round, per purpose) are derived by hashing a
tuple of labels, so no stream ever depends on execution order or thread
scheduling.
"""
from __future__ import annotations

import hashlib


def derive_seed(*parts) -> int:
    """Collapse a tuple of labels into a non-negative 64-bit integer.

    Parts may be ints or strings (anything with a stable repr). The same
    parts give the same seed on every platform; distinct tuples give
    independent-looking seeds via sha256.
    """
    text = "\x1f".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")
