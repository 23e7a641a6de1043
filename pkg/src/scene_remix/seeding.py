"""Deterministic seed derivation and counter-based jitter streams.

One master seed drives every randomized component.  Sub-seeds are derived
from (seed, label) so no two modules ever share an RNG stream by accident,
and per-ray jitter is a pure function of (seed, pixel id, sample index) so
a patch render and a full-image render of the same pixels agree exactly.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def derive_seed(master_seed: int, label: str) -> int:
    """Derive a 63-bit sub-seed from (master_seed, label) via SHA-256."""
    h = hashlib.sha256()
    h.update(int(master_seed).to_bytes(8, "little", signed=True))
    h.update(label.encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFFFFFFFFFFFFFF


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; plain integer hashing, wraps mod 2^64
    z = (x + _GOLDEN) & _MASK64
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
    return z ^ (z >> np.uint64(31))


def jitter_uniform(seed: int, stream_ids: np.ndarray, n_samples: int) -> np.ndarray:
    """Per-stream uniforms in [0,1), shape (len(stream_ids), n_samples).

    Counter-based: value (i,k) depends only on (seed, stream_ids[i], k),
    never on batch layout or call order.
    """
    ids = np.asarray(stream_ids, dtype=np.uint64).reshape(-1, 1)
    ks = np.arange(n_samples, dtype=np.uint64).reshape(1, -1)
    base = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _mix64(ids))
    bits = _mix64(base + (ks + np.uint64(1)) * _GOLDEN)
    # top 53 bits -> double in [0,1)
    return (bits >> np.uint64(11)).astype(np.float64) * (2.0**-53)
