import hashlib
import struct

import numpy as np
import pytest

from samclr.rng import PURPOSES, RngStreamKey, derive_stream, stream_key_digest


def test_same_key_same_draws():
    key = RngStreamKey(7, "jitter", 3, 11, 1)
    np.testing.assert_array_equal(derive_stream(key).random(100), derive_stream(key).random(100))


def test_digest_is_documented_hash():
    key = RngStreamKey(1, "probe", 2, 3, 4)
    packed = struct.pack("<qBqqq", 1, PURPOSES.index("probe"), 2, 3, 4)
    assert stream_key_digest(key) == hashlib.blake2b(packed, digest_size=16, person=b"samclr-rng").digest()


def test_known_first_draws_are_pinned():
    # regression pin: a silent change to the key derivation breaks saved experiments
    a = derive_stream(RngStreamKey(0, "sampling")).integers(0, 2**32, 4)
    assert a.tolist() == [3149922755, 2319723812, 4184765439, 1439662824]


def test_single_field_changes_stream():
    base = RngStreamKey(5, "sampling", 1, 2, 0)
    first = derive_stream(base).random()
    for variant in (base._replace(seed=6), base._replace(purpose="init"), base._replace(epoch=2),
                    base._replace(sample=3), base._replace(view=1)):
        assert derive_stream(variant).random() != first


def test_no_collisions():
    firsts = set()
    for i in range(100_000):
        key = RngStreamKey(i % 7, PURPOSES[i % 4], i % 13, i, i % 2)
        firsts.add(stream_key_digest(key))
    assert len(firsts) == 100_000
    # first 64-bit draws over the same keys (sampled subset for speed)
    draws = {int(derive_stream(RngStreamKey(0, "sampling", 0, i, 0)).integers(0, 2**63)) for i in range(10_000)}
    assert len(draws) == 10_000


def test_uniformity_chi_square():
    x = derive_stream(RngStreamKey(9, "probe")).random(100_000)
    counts = np.histogram(x, bins=20, range=(0, 1))[0]
    expected = len(x) / 20
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 19 degrees of freedom, 0.999 quantile is about 43.8
    assert chi2 < 43.8


def test_unknown_purpose():
    with pytest.raises(ValueError):
        stream_key_digest(RngStreamKey(0, "other"))
