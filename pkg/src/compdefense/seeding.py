"""Sub-seed derivation. Every random stream in the package starts here."""
from __future__ import annotations

import hashlib


def derive_seed(seed: int, purpose: str, key: str = "") -> int:
    """Stable 63-bit seed for ``(seed, purpose, key)``; independent of PYTHONHASHSEED."""
    digest = hashlib.blake2b(f"{seed}\x1f{purpose}\x1f{key}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1
