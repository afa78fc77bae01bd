"""Named, per-purpose random streams derived from a root seed.

Every consumer asks for a stream by label (``"init"``, ``"shuffle"``,
``"task", 3, "bags"`` ...).  Labels are hashed together with the root seed,
so adding a new consumer never shifts the numbers another one sees.
"""

import hashlib

import numpy as np


def derive_seed(root: int, *labels) -> int:
    text = "/".join([str(int(root))] + [str(label) for label in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(root: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *labels))
