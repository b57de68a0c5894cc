"""Splittable, counter-based random streams keyed by a run seed.

Every stream is a Philox generator whose key is derived from the run seed and a
slash-separated path, so draws for one tensor never depend on how many draws
happened elsewhere.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, path: str) -> int:
    digest = hashlib.blake2b(f"{int(seed)}|{path}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


class KeyedRNG:
    """A named node in a tree of random streams.

    >>> a = KeyedRNG(42).child("backbone", "emb").generator().standard_normal(2)
    >>> b = KeyedRNG(42).child("backbone/emb").generator().standard_normal(2)
    >>> bool((a == b).all())
    True
    """

    def __init__(self, seed: int, path: str = "", registry: dict[str, str] | None = None):
        self.seed = int(seed)
        self.path = path
        # shared between a root and all its children
        self.registry = registry if registry is not None else {}

    def child(self, *names: str) -> "KeyedRNG":
        parts = [self.path] if self.path else []
        parts.extend(str(n) for n in names)
        return KeyedRNG(self.seed, "/".join(parts), self.registry)

    @property
    def subkey(self) -> int:
        return derive_key(self.seed, self.path)

    def generator(self) -> np.random.Generator:
        key = self.subkey
        self.registry[self.path] = f"{key:032x}"
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape, std: float, dtype=np.float32) -> np.ndarray:
        draw = self.generator().standard_normal(size=shape)
        return (draw * std).astype(dtype)
