"""Deterministic derivation of independent random streams from one seed."""

import hashlib


def derive_seed(parent_seed: int, label: str) -> int:
    """Child seed for the stream named `label`.

    Distinct labels give independent streams, and introducing a new label
    never perturbs the streams of existing ones.
    """
    digest = hashlib.sha256(f"{parent_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
