"""
Counter-based random streams.

Every random draw in nearquery comes from numpy's Philox-4x64 generator keyed
by a (seed, word) pair: parameter initialisation uses the CRC32 of the
parameter name as the word, phantom generation the sample index. Streams are
independent of call order and identical on every platform.
"""
import zlib
from typing import Union

import numpy as np

_MASK64 = (1 << 64) - 1


def name_word(name: str) -> int:
    """Stable 32-bit word for a string key"""
    return zlib.crc32(name.encode("utf-8")) & 0xFFFFFFFF


def stream(seed: int, word: Union[int, str] = 0) -> np.random.Generator:
    """Generator for the (seed, word) stream"""
    if isinstance(word, str):
        word = name_word(word)
    key = np.array([int(seed) & _MASK64, int(word) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


__all__ = ["stream", "name_word"]
