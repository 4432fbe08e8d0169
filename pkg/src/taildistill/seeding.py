"""Deterministic seed derivation for independent random streams.

One master seed per run is not enough: weight init, augmentation, and
per-epoch sampling must not share a stream, and a re-initialized network
must not replay the first network's draws.  ``derive_seed`` hashes the
master seed together with string tags so every (purpose, stage, epoch)
combination gets its own stable 63-bit seed.
"""

from __future__ import annotations

import hashlib


def derive_seed(base: int, *tags) -> int:
    """Derive a child seed from ``base`` and a sequence of string/int tags."""
    text = ":".join([str(int(base))] + [str(t) for t in tags])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
