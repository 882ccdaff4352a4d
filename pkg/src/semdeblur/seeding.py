"""Stable seed derivation shared by the data and model pipelines."""

from __future__ import annotations

import hashlib


def derive_seed(master_seed: int, name: str) -> int:
    """Per-component seed from a master seed and a label; stable across runs."""
    digest = hashlib.sha256(f"{master_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63 - 1)
