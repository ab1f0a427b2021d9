"""Small shared helpers: canonical JSON, seed derivation, digests."""

import hashlib
import json

import numpy as np


def canonical_json(obj) -> str:
    """Serialize with sorted keys and no insignificant whitespace.

    The same dict always produces the same byte string, so digests and
    manifests are stable across runs.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def spawn_rng(seed: int, *keys) -> np.random.Generator:
    """Derive an independent generator from a base seed and a key path.

    Hashing the key path keeps per-sample / per-epoch streams decoupled
    while remaining a pure function of (seed, keys).
    """
    h = hashlib.sha256(repr((int(seed),) + tuple(keys)).encode("utf-8")).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(h[:8], "little")))
