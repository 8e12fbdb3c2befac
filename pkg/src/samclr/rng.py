"""Deterministic random streams keyed by (seed, purpose, epoch, sample, view).

Each key is hashed with BLAKE2b (16-byte digest over a fixed little-endian
packing of the fields) and the digest becomes the 128-bit key of a Philox
counter-based generator, so streams are portable and independent of call order.
"""

from __future__ import annotations

import hashlib
import struct
from typing import NamedTuple

import numpy as np

PURPOSES = ("sampling", "jitter", "init", "probe")


class RngStreamKey(NamedTuple):
    seed: int
    purpose: str
    epoch: int = 0
    sample: int = 0
    view: int = 0


def stream_key_digest(key: RngStreamKey) -> bytes:
    if key.purpose not in PURPOSES:
        raise ValueError(f"unknown stream purpose {key.purpose!r}")
    packed = struct.pack("<qBqqq", key.seed, PURPOSES.index(key.purpose), key.epoch, key.sample, key.view)
    return hashlib.blake2b(packed, digest_size=16, person=b"samclr-rng").digest()


def derive_stream(key: RngStreamKey) -> np.random.Generator:
    k = int.from_bytes(stream_key_digest(key), "little")
    return np.random.Generator(np.random.Philox(key=k))
