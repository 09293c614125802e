"""YCSB-style workload generation: scrambled zipfian request streams.

Implements the standard Gray et al. zipfian sampler with theta = 0.99 (the
YCSB convention) plus the scrambled and latest variants, and the A-F
operation mixes.  Zeta sums are cached incrementally so growing key spaces
(insert-heavy workloads) stay cheap.
"""

import random

ZIPF_THETA = 0.99

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


def fnv64(x: int) -> int:
    h = FNV64_OFFSET
    for _ in range(8):
        h = ((h ^ (x & 0xFF)) * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
        x >>= 8
    return h


class ZipfianGenerator:
    def __init__(self, n: int, rng: random.Random, theta: float = ZIPF_THETA):
        self.rng = rng
        self.theta = theta
        self.n = 0
        self.zetan = 0.0
        self._grow(n)
        self.zeta2 = 1.0 + 0.5 ** theta
        self.alpha = 1.0 / (1.0 - theta)

    def _grow(self, n: int):
        for i in range(self.n + 1, n + 1):
            self.zetan += 1.0 / i ** self.theta
        self.n = n

    def next(self) -> int:
        n = self.n
        eta = (1.0 - (2.0 / n) ** (1.0 - self.theta)) / (1.0 - self.zeta2 / self.zetan)
        u = self.rng.random()
        uz = u * self.zetan
        if uz < 1.0:
            return 0
        if uz < self.zeta2:
            return 1
        return int(n * (eta * u - eta + 1.0) ** self.alpha)


class ScrambledZipfian:
    """Zipfian popularity spread over the key space by hashing."""

    def __init__(self, n: int, rng: random.Random):
        self.gen = ZipfianGenerator(n, rng)

    def grow(self, n: int):
        self.gen._grow(n)

    def next(self) -> int:
        return fnv64(self.gen.next()) % self.gen.n


class LatestGenerator:
    """Skewed towards recently inserted keys (workload D reads)."""

    def __init__(self, n: int, rng: random.Random):
        self.gen = ZipfianGenerator(n, rng)

    def grow(self, n: int):
        self.gen._grow(n)

    def next(self) -> int:
        return self.gen.n - 1 - self.gen.next()


# operation mixes: (read, update, insert, scan, rmw)
WORKLOAD_MIXES = {
    "a": (0.5, 0.5, 0.0, 0.0, 0.0),
    "b": (0.95, 0.05, 0.0, 0.0, 0.0),
    "c": (1.0, 0.0, 0.0, 0.0, 0.0),
    "d": (0.95, 0.0, 0.05, 0.0, 0.0),
    "e": (0.0, 0.0, 0.05, 0.95, 0.0),
    "f": (0.5, 0.0, 0.0, 0.0, 0.5),
}

MAX_SCAN_LEN = 100


class YcsbStream:
    """Yields (op, key_index, extra) tuples for one workload letter."""

    def __init__(self, letter: str, n_keys: int, rng: random.Random):
        letter = letter.lower()
        if letter not in WORKLOAD_MIXES:
            raise ValueError(f"unknown YCSB workload {letter!r}")
        self.letter = letter
        self.mix = WORKLOAD_MIXES[letter]
        self.rng = rng
        self.n_keys = n_keys
        if letter == "d":
            self.chooser = LatestGenerator(n_keys, rng)
        else:
            self.chooser = ScrambledZipfian(n_keys, rng)

    def _pick_existing(self) -> int:
        return self.chooser.next()

    def next_op(self):
        r = self.rng.random()
        read, update, insert, scan, rmw = self.mix
        if r < read:
            return ("read", self._pick_existing(), None)
        r -= read
        if r < update:
            return ("update", self._pick_existing(), self.rng.getrandbits(63))
        r -= update
        if r < insert:
            k = self.n_keys
            self.n_keys += 1
            self.chooser.grow(self.n_keys)
            return ("insert", k, self.rng.getrandbits(63))
        r -= insert
        if r < scan:
            return ("scan", self._pick_existing(),
                    self.rng.randrange(1, MAX_SCAN_LEN + 1))
        return ("rmw", self._pick_existing(), self.rng.getrandbits(63))
