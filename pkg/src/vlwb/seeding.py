"""Domain-separated seed derivation.

Seeds are derived by hashing the master seed together with string labels so
that per-stage and per-sample random streams are independent of each other
and of execution order.
"""

import hashlib

import numpy as np


def derive_seed(seed, *labels):
    h = hashlib.blake2b(digest_size=8, person=b"vlwb-seed")
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little")


def rng_for(seed, *labels):
    return np.random.default_rng(derive_seed(seed, *labels))
