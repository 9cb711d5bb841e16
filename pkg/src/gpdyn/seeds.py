"""Schedule-independent seed derivation."""

import hashlib

import numpy as np


def _word(part) -> int:
    digest = hashlib.sha256(repr(part).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(*parts) -> np.random.SeedSequence:
    """Seed sequence determined only by ``parts`` (ints, strings, tuples)."""
    return np.random.SeedSequence([_word(p) for p in parts])


def derive_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
