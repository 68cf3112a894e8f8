"""Named random sub-streams derived from a single master seed.

Every random draw in the package comes from ``stream(root, *keys)``: the keys
(ints or strings) are appended to the root's spawn key, so a stream depends
only on its name and never on how many other streams were drawn before it.
"""

import hashlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)) and not isinstance(k, bool) and k >= 0:
        return int(k)
    return int.from_bytes(hashlib.blake2b(str(k).encode(), digest_size=4).digest(), "little")


def seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def child(root, *keys) -> np.random.SeedSequence:
    root = seed_sequence(root)
    return np.random.SeedSequence(root.entropy, spawn_key=tuple(root.spawn_key) + tuple(_key(k) for k in keys))


def stream(root, *keys) -> np.random.Generator:
    return np.random.default_rng(child(root, *keys))


def cluster_key(cluster_id: str) -> str:
    return "cluster:" + str(cluster_id)
