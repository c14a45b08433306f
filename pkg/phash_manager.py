# phash_manager.py

"""
64-bit DCT perceptual hash, Hamming distance, and a sqlite-backed cache of
hashes keyed by sample id.
"""

import hashlib
import logging
import sqlite3
from dataclasses import dataclass
from typing import Dict, Iterable, Optional

import numpy as np
import pandas as pd
from PIL import Image
from scipy import fft

logger = logging.getLogger(__name__)

HASH_WORK_SIZE = 32
HASH_BLOCK = 8
# Coefficients are rounded before thresholding so analytically-zero terms
# compare as exact zeros regardless of the DCT routine's rounding noise.
COEFF_DECIMALS = 6


@dataclass(frozen=True)
class HashCode:
    bits: int

    @property
    def hex16(self) -> str:
        return f"{self.bits:016x}"

    @classmethod
    def from_hex(cls, text: str) -> "HashCode":
        return cls(int(text, 16))

    def __str__(self):
        return self.hex16


def downscale(image: np.ndarray, size: int = HASH_WORK_SIZE) -> np.ndarray:
    """Area-average an image down (or up) to size x size."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if h % size == 0 and w % size == 0:
        return image.reshape(size, h // size, size, w // size).mean(axis=3).mean(axis=1)
    im = Image.fromarray(image.astype(np.float32))
    return np.asarray(im.resize((size, size), Image.Resampling.BOX), dtype=np.float64)


def dct_block(image: np.ndarray) -> np.ndarray:
    """Unnormalized type-II 2-D DCT of the working image, lowest 8x8 block."""
    coeffs = fft.dctn(downscale(image), type=2, norm=None)
    return np.round(coeffs[:HASH_BLOCK, :HASH_BLOCK], COEFF_DECIMALS)


def bits_from_block(block: np.ndarray) -> HashCode:
    """
    Bit k (row-major, most significant first) is set when coefficient k is
    strictly above the median of the 63 AC coefficients. The DC bit is
    always 0.
    """
    flat = block.flatten()
    median = np.median(flat[1:])
    above = flat > median
    above[0] = False
    value = 0
    for bit in above:
        value = (value << 1) | int(bit)
    return HashCode(value)


def phash(image: np.ndarray) -> HashCode:
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("cannot hash an empty image")
    if np.ptp(image) == 0:
        return HashCode(0)
    return bits_from_block(dct_block(image))


def hamming(a: HashCode, b: HashCode) -> int:
    return bin(a.bits ^ b.bits).count("1")


def content_digest(image: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(image, dtype=np.float32).tobytes()).hexdigest()


class HashCache:
    """
    Stores one perceptual hash per sample in SQLite.

    A row is reused only while the stored content digest still matches the
    image; otherwise the hash is recomputed and the row replaced. Build the
    cache from one thread, then readers may share it.
    """

    def __init__(self, db_path: str = ":memory:"):
        self.db = sqlite3.connect(db_path, check_same_thread=False)
        self.db.row_factory = sqlite3.Row
        self.db.execute("""
            CREATE TABLE IF NOT EXISTS phash (
                sample_id TEXT PRIMARY KEY,
                content_digest TEXT,
                hex16 TEXT
            )
        """)
        self.db.commit()

    def get_or_compute(self, sample_id: str, image: np.ndarray, commit: bool = True) -> HashCode:
        digest = content_digest(image)
        row = self.db.execute("SELECT content_digest, hex16 FROM phash WHERE sample_id=?",
                              (sample_id,)).fetchone()
        if row and row["content_digest"] == digest:
            return HashCode.from_hex(row["hex16"])

        if row:
            logger.debug(f"Image content of {sample_id} changed; rehashing")
        code = phash(image)
        self.db.execute("INSERT OR REPLACE INTO phash (sample_id, content_digest, hex16) VALUES (?,?,?)",
                        (sample_id, digest, code.hex16))
        if commit:
            self.db.commit()
        return code

    def build(self, samples: Iterable) -> Dict[str, HashCode]:
        codes = {s.sample_id: self.get_or_compute(s.sample_id, s.image, commit=False) for s in samples}
        self.db.commit()
        logger.info(f"Hash cache holds {len(codes)} entries")
        return codes

    def lookup(self, sample_id: str) -> Optional[HashCode]:
        row = self.db.execute("SELECT hex16 FROM phash WHERE sample_id=?", (sample_id,)).fetchone()
        return HashCode.from_hex(row["hex16"]) if row else None

    def export_csv(self, path: str) -> None:
        rows = self.db.execute("SELECT sample_id, hex16 FROM phash ORDER BY sample_id").fetchall()
        pd.DataFrame([dict(r) for r in rows], columns=["sample_id", "hex16"]).to_csv(path, index=False)

    def close(self):
        self.db.close()
