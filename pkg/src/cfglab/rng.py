"""Counter-based random streams built on Philox4x64-10.

Every draw is a pure function of ``(seed, substream, counter)``, so sample
trajectories do not depend on evaluation order or on how work is split across
processes.  Block ``i`` of a stream is ``philox(key=(seed, 0),
counter=(counter + i, substream, 0, 0))``; each block yields four 64-bit words.

Sequential streams use numpy's Philox bit generator; per-row streams use the
vectorised :func:`philox4x64` below, which produces the same blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)

PHILOX_M0 = 0xD2E7470EE14C6C93
PHILOX_M1 = 0xCA5A826395121157
PHILOX_W0 = 0x9E3779B97F4A7C15
PHILOX_W1 = 0xBB67AE8584CAA73B
PHILOX_ROUNDS = 10


def _mulhilo(a: int, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full 64x64 -> 128 bit product of a constant and a uint64 array."""
    a_lo = np.uint64(a & 0xFFFFFFFF)
    a_hi = np.uint64(a >> 32)
    b_lo = b & _MASK32
    b_hi = b >> _SHIFT32
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    hh = a_hi * b_hi
    mid = (ll >> _SHIFT32) + (lh & _MASK32) + (hl & _MASK32)
    hi = hh + (lh >> _SHIFT32) + (hl >> _SHIFT32) + (mid >> _SHIFT32)
    lo = np.uint64(a) * b
    return hi, lo


def philox4x64(counters: np.ndarray, key: tuple[int, int]) -> np.ndarray:
    """Apply Philox4x64-10 to each row of a ``[n, 4]`` uint64 counter array."""
    ctr = np.asarray(counters, dtype=np.uint64)
    if ctr.ndim != 2 or ctr.shape[1] != 4:
        raise ValueError(f"counters must have shape [n, 4], got {ctr.shape}")
    c0, c1, c2, c3 = (ctr[:, i].copy() for i in range(4))
    k0, k1 = key[0] & _MASK64, key[1] & _MASK64
    with np.errstate(over="ignore"):
        for r in range(PHILOX_ROUNDS):
            if r:
                k0 = (k0 + PHILOX_W0) & _MASK64
                k1 = (k1 + PHILOX_W1) & _MASK64
            hi0, lo0 = _mulhilo(PHILOX_M0, c0)
            hi1, lo1 = _mulhilo(PHILOX_M1, c2)
            c0, c1, c2, c3 = hi1 ^ c1 ^ np.uint64(k0), lo1, hi0 ^ c3 ^ np.uint64(k1), lo0
    return np.stack([c0, c1, c2, c3], axis=1)


def _to_unit(words: np.ndarray) -> np.ndarray:
    # top 53 bits -> (0, 1]; never 0 so log() below is safe
    return ((words >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53


def _box_muller(words: np.ndarray) -> np.ndarray:
    """Map ``[n, 4]`` uint64 blocks to ``[n, 4]`` standard normals."""
    u = _to_unit(words)
    r0 = np.sqrt(-2.0 * np.log(u[:, 0]))
    r1 = np.sqrt(-2.0 * np.log(u[:, 2]))
    a0 = 2.0 * np.pi * u[:, 1]
    a1 = 2.0 * np.pi * u[:, 3]
    return np.stack([r0 * np.cos(a0), r0 * np.sin(a0), r1 * np.cos(a1), r1 * np.sin(a1)], axis=1)


def _blocks(seed: int, counter: int, substreams: np.ndarray, n_blocks: int) -> np.ndarray:
    """Raw blocks for ``n_blocks`` consecutive counters on each substream.

    Returns ``[len(substreams), n_blocks, 4]``.
    """
    subs = np.asarray(substreams, dtype=np.uint64).reshape(-1)
    ctr = np.zeros((subs.size, n_blocks, 4), dtype=np.uint64)
    ctr[:, :, 0] = (np.arange(n_blocks, dtype=np.uint64) + np.uint64(counter & _MASK64))[None, :]
    ctr[:, :, 1] = subs[:, None]
    out = philox4x64(ctr.reshape(-1, 4), (seed, 0))
    return out.reshape(subs.size, n_blocks, 4)


@dataclass
class RandomStream:
    """A position in a counter-based random sequence.

    Draws advance ``counter`` by the number of 4-word blocks they consume, so
    consecutive draws never overlap.
    """

    seed: int
    counter: int = 0
    substream: int = 0

    def _take(self, n: int) -> np.ndarray:
        n_blocks = -(-n // 4)
        # numpy's Philox pre-increments its 256-bit counter, so start one below
        start = (self.counter + (self.substream << 64) - 1) % (1 << 256)
        bitgen = np.random.Philox(key=[self.seed & _MASK64, 0], counter=start)
        words = bitgen.random_raw(4 * n_blocks).reshape(n_blocks, 4)
        self.counter += n_blocks
        return words

    def normal(self, shape) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        return _box_muller(self._take(n)).reshape(-1)[:n].reshape(shape)

    def uniform(self, shape) -> np.ndarray:
        """Uniform draws in (0, 1]."""
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        return _to_unit(self._take(n)).reshape(-1)[:n].reshape(shape)

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        """Integers in ``[low, high)`` via floor of a uniform draw."""
        span = high - low
        u = self.uniform(shape)
        return low + np.minimum((u * span).astype(np.int64), span - 1)

    def fork(self, substream: int) -> "RandomStream":
        """Independent stream sharing the seed, on another substream."""
        return RandomStream(self.seed, 0, substream)


class RowStreams:
    """One independent stream per batch row, addressed by row id.

    Row ``r`` draws exactly what ``RandomStream(seed, counter, substream=r)``
    would, so results are independent of batch order and of how rows are split
    across workers.  Each call consumes one counter value per row.
    """

    def __init__(self, seed: int, rows, counter: int = 0):
        self.seed = seed
        self.rows = np.asarray(rows, dtype=np.int64)
        self.counter = counter

    def normal(self, shape) -> np.ndarray:
        shape = tuple(shape)
        if shape[0] != self.rows.size:
            raise ValueError(f"expected {self.rows.size} rows, got shape {shape}")
        per_row = int(np.prod(shape[1:], dtype=np.int64))
        n_blocks = -(-per_row // 4)
        words = _blocks(self.seed, self.counter, self.rows, n_blocks)
        self.counter += n_blocks
        z = _box_muller(words.reshape(-1, 4)).reshape(self.rows.size, -1)[:, :per_row]
        return z.reshape(shape)


def gaussian(stream: RandomStream, n: int) -> np.ndarray:
    """``n`` i.i.d. standard normal draws; advances ``stream``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return stream.normal(n)
