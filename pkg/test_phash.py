#!/usr/bin/env python3
"""
Perceptual hash against a direct-summation DCT, Hamming distance, and the
sqlite hash cache.
"""

import numpy as np
import pandas as pd

from dataset_manager import Sample
from phash_manager import COEFF_DECIMALS, HashCache, HashCode, dct_block, hamming, phash


def direct_dct_hash(image: np.ndarray) -> int:
    """Hash from the textbook DCT-II sum over a 32x32 image, low 8x8 block."""
    n = image.shape[0]
    idx = np.arange(n)
    block = np.zeros((8, 8))
    for u in range(8):
        cu = np.cos(np.pi * u * (2 * idx + 1) / (2 * n))
        for v in range(8):
            cv = np.cos(np.pi * v * (2 * idx + 1) / (2 * n))
            total = 0.0
            for m in range(n):
                for k in range(n):
                    total += image[m, k] * cu[m] * cv[k]
            block[u, v] = 4.0 * total
    flat = np.round(block, COEFF_DECIMALS).flatten()
    median = np.median(flat[1:])
    value = 0
    for i, c in enumerate(flat):
        value = (value << 1) | int(i > 0 and c > median)
    return value


def test_constant_image_hashes_to_zero():
    assert phash(np.full((32, 32), 0.3)).bits == 0
    assert phash(np.zeros((64, 64))).bits == 0


def test_centred_square_matches_direct_dct():
    image = np.zeros((32, 32))
    image[12:20, 12:20] = 1.0
    assert phash(image).bits == direct_dct_hash(image)


def test_random_images_match_direct_dct():
    rng = np.random.default_rng(0)
    for _ in range(3):
        image = rng.random((32, 32))
        assert phash(image).bits == direct_dct_hash(image)


def test_dct_block_is_the_low_frequency_corner():
    image = np.random.default_rng(1).random((32, 32))
    block = dct_block(image)
    assert block.shape == (8, 8)
    assert np.isclose(block[0, 0], 4.0 * image.sum(), atol=1e-5)


def test_dc_bit_is_never_set():
    rng = np.random.default_rng(2)
    for _ in range(10):
        assert phash(rng.random((32, 32))).bits >> 63 == 0


def test_hash_ignores_exact_upsampling():
    rng = np.random.default_rng(3)
    small = rng.integers(0, 256, size=(32, 32)) / 256.0
    large = np.kron(small, np.ones((2, 2)))
    assert phash(large) == phash(small)


def test_image_vs_itself_has_distance_zero():
    image = np.random.default_rng(4).random((64, 64))
    assert hamming(phash(image), phash(image)) == 0


def test_hamming_of_complements_is_64():
    assert hamming(HashCode(0), HashCode(0xFFFFFFFFFFFFFFFF)) == 64


def test_hamming_matches_bit_loop():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a, b = (int(v) for v in rng.integers(0, 2 ** 63, size=2, dtype=np.uint64))
        expected = sum(((a >> k) & 1) != ((b >> k) & 1) for k in range(64))
        assert hamming(HashCode(a), HashCode(b)) == expected


def test_hamming_is_a_metric():
    rng = np.random.default_rng(6)
    codes = [HashCode(int(v)) for v in rng.integers(0, 2 ** 63, size=12, dtype=np.uint64)]
    for a in codes:
        assert hamming(a, a) == 0
        for b in codes:
            assert hamming(a, b) == hamming(b, a)
            assert (hamming(a, b) == 0) == (a.bits == b.bits)
            for c in codes:
                assert hamming(a, c) <= hamming(a, b) + hamming(b, c)


def test_small_brightness_shift_moves_few_bits():
    rng = np.random.default_rng(7)
    for _ in range(10):
        image = rng.uniform(0.1, 0.9, size=(64, 64))
        eps = rng.uniform(0.01, 0.05) * rng.choice([-1.0, 1.0])
        assert hamming(phash(image), phash(image + eps)) <= 8


def test_hex_round_trip():
    code = HashCode(0x00F0A5A5DEADBEEF)
    assert code.hex16 == "00f0a5a5deadbeef"
    assert HashCode.from_hex(code.hex16) == code


def _sample(sid, image):
    return Sample(sid, image.astype(np.float32), np.array([1, 0], dtype=np.uint8), "p")


def test_cache_reuses_rows_and_rehashes_changed_images(tmp_path):
    db = str(tmp_path / "phash.sqlite")
    rng = np.random.default_rng(6)
    first = rng.random((32, 32)).astype(np.float32)
    second = rng.random((32, 32)).astype(np.float32)

    cache = HashCache(db)
    code = cache.get_or_compute("a.png", first)
    assert cache.lookup("a.png") == code
    cache.close()

    reopened = HashCache(db)
    assert reopened.lookup("a.png") == code
    assert reopened.get_or_compute("a.png", first) == code
    assert reopened.get_or_compute("a.png", second) == phash(second)
    assert reopened.lookup("a.png") == phash(second)
    reopened.close()


def test_cache_build_and_export(tmp_path):
    rng = np.random.default_rng(7)
    samples = [_sample(f"s{i}.png", rng.random((32, 32))) for i in range(5)]
    cache = HashCache()
    codes = cache.build(samples)
    assert set(codes) == {s.sample_id for s in samples}

    path = tmp_path / "phash.csv"
    cache.export_csv(str(path))
    table = pd.read_csv(path, dtype=str)
    assert list(table.columns) == ["sample_id", "hex16"]
    assert dict(zip(table.sample_id, table.hex16)) == {sid: c.hex16 for sid, c in codes.items()}
