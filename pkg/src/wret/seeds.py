"""Deterministic per-stage seed derivation from a single root seed."""

from __future__ import annotations

import hashlib


def derive_seed(root: int, label: str) -> int:
    """Stable 64-bit seed for a named consumer of the root seed.

    First 8 bytes of sha256("{root}:{label}"), little-endian. Every random
    draw in the pipeline goes through this, so stages are independently
    reproducible from (root seed, stage label).
    """
    digest = hashlib.sha256(f"{root}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
