"""Deterministic random substreams.

Every random draw in the package flows from a single root seed through a
named substream, so that e.g. media noise and read noise stay reproducible
independently of how many draws each consumes.
"""

import hashlib

import numpy as np


def substream(root_seed: int, label: str) -> np.random.Generator:
    """Generator for the named noise source under the given root seed."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    seq = np.random.SeedSequence(entropy=[int(root_seed) & 0xFFFFFFFFFFFFFFFF, key])
    return np.random.default_rng(seq)
