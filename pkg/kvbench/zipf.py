"""
Zipfian key-access distribution over a ranked key space.

P(k) = (1/k^a) / H(N, a), where H is the generalized harmonic number. The
table stores the cumulative distribution once; draws are inverse-CDF lookups
by binary search, so each draw costs O(log N).

Randomness comes from SplitMix64, a counter-based 64-bit generator with
published constants: output i of seed s depends only on (s, i), which keeps
test vectors reproducible from any language.
"""

import functools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Union

import numpy as np
import numpy.typing as npt

from .exceptions import InvalidParameterError
from .structs import KeyMapping, KeyScheme

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_1 = 0xBF58476D1CE4E5B9
MIX_2 = 0x94D049BB133111EB
DOUBLE_UNIT = 1.0 / (1 << 53)

CHUNK = 4096


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX_1) & MASK64
    z = ((z ^ (z >> 27)) * MIX_2) & MASK64
    return z ^ (z >> 31)


def derive_seed(base_seed: int, *path: int) -> int:
    """Fold integers into a seed; distinct paths give unrelated streams."""
    seed = base_seed & MASK64
    for part in path:
        seed = mix64(seed + (part + 1) * GOLDEN_GAMMA)
    return seed


class SplitMix64:
    """Counter-based generator: the i-th output is mix64(seed + i * gamma)."""

    def __init__(self, seed: int) -> None:
        self.seed = seed & MASK64
        self.counter = 0

    def next_u64(self) -> int:
        self.counter += 1
        return mix64(self.seed + self.counter * GOLDEN_GAMMA)

    def next_double(self) -> float:
        return (self.next_u64() >> 11) * DOUBLE_UNIT

    def block(self, count: int) -> npt.NDArray[np.uint64]:
        """The next ``count`` raw outputs, vectorised."""
        if count < 0:
            raise InvalidParameterError("count must be non-negative")
        steps = np.arange(
            self.counter + 1, self.counter + count + 1, dtype=np.uint64
        )
        self.counter += count
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + steps * np.uint64(GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX_1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX_2)
            z = z ^ (z >> np.uint64(31))
        return z

    def doubles(self, count: int) -> npt.NDArray[np.float64]:
        """Uniform draws in [0, 1) built from the top 53 bits of each output."""
        return (self.block(count) >> np.uint64(11)).astype(np.float64) * DOUBLE_UNIT


@dataclass(frozen=True)
class ZipfianParams:
    key_count: int
    skew: float

    def __post_init__(self) -> None:
        if isinstance(self.key_count, bool) or not isinstance(self.key_count, int):
            raise InvalidParameterError("key_count must be an integer")
        if self.key_count < 1:
            raise InvalidParameterError(f"key_count must be >= 1, got {self.key_count}")
        if not math.isfinite(self.skew) or self.skew < 0:
            raise InvalidParameterError(f"skew must be >= 0, got {self.skew}")


class ZipfianTable:
    """Cumulative probabilities C[1..N]; immutable and shared by all workers."""

    __slots__ = ("params", "harmonic", "cumulative")

    def __init__(
        self,
        params: ZipfianParams,
        harmonic: float,
        cumulative: npt.NDArray[np.float64],
    ) -> None:
        cumulative.flags.writeable = False
        self.params = params
        self.harmonic = harmonic
        self.cumulative = cumulative

    @property
    def key_count(self) -> int:
        return self.params.key_count

    @property
    def skew(self) -> float:
        return self.params.skew

    def probability(self, rank: int) -> float:
        _check_rank(rank, self.key_count)
        return float(rank ** -self.skew / self.harmonic)

    def probabilities(self) -> npt.NDArray[np.float64]:
        return np.diff(self.cumulative, prepend=0.0)

    def top_share(self, k: int) -> float:
        """Probability mass of the k hottest ranks."""
        if k <= 0:
            return 0.0
        return float(self.cumulative[min(k, self.key_count) - 1])

    def __repr__(self) -> str:
        return f"<ZipfianTable N={self.key_count} skew={self.skew} H={self.harmonic:.6f}>"


def _check_rank(rank: int, key_count: int) -> None:
    if not 1 <= rank <= key_count:
        raise InvalidParameterError(f"rank {rank} outside 1..{key_count}")


def build_table(params: ZipfianParams) -> ZipfianTable:
    n = params.key_count
    weights = np.arange(1, n + 1, dtype=np.float64) ** -params.skew
    # smallest terms first
    harmonic = math.fsum(weights[::-1].tolist())
    cumulative = np.cumsum(weights / harmonic)
    return ZipfianTable(params, harmonic, cumulative)


def _lookup(
    table: ZipfianTable, r: Union[float, npt.NDArray[np.float64]]
) -> npt.NDArray[np.int64]:
    # smallest k with C[k] > r; the clamp covers C[N] rounding just below 1
    idx = np.searchsorted(table.cumulative, r, side="right") + 1
    return np.minimum(idx, table.key_count).astype(np.int64)


def sample_rank(table: ZipfianTable, r: float) -> int:
    if not (math.isfinite(r) and 0.0 <= r < 1.0):
        raise InvalidParameterError(f"r must lie in [0, 1), got {r}")
    return int(_lookup(table, r))


def sample_stream(table: ZipfianTable, seed: int, count: int) -> npt.NDArray[np.int64]:
    """``count`` ranks from successive draws of SplitMix64(seed)."""
    if count < 0:
        raise InvalidParameterError("count must be non-negative")
    return _lookup(table, SplitMix64(seed).doubles(count))


class RankStream:
    """Endless rank sequence for one worker, drawn in chunks."""

    def __init__(self, table: ZipfianTable, seed: int, chunk: int = CHUNK) -> None:
        self.table = table
        self.rng = SplitMix64(seed)
        self.chunk = chunk
        self._buffer: list[int] = []
        self._pos = 0

    def __iter__(self) -> Iterator[int]:
        return self

    def __next__(self) -> int:
        if self._pos >= len(self._buffer):
            self._buffer = _lookup(self.table, self.rng.doubles(self.chunk)).tolist()
            self._pos = 0
        rank = self._buffer[self._pos]
        self._pos += 1
        return rank


@functools.lru_cache(maxsize=4)
def _permutation(seed: int, key_count: int) -> npt.NDArray[np.int64]:
    # Fisher-Yates driven by SplitMix64 so the mapping is language-independent
    order = list(range(1, key_count + 1))
    draws = SplitMix64(seed).doubles(max(key_count - 1, 0)).tolist()
    for pos, i in enumerate(range(key_count - 1, 0, -1)):
        j = int(draws[pos] * (i + 1))
        order[i], order[j] = order[j], order[i]
    perm = np.array(order, dtype=np.int64)
    perm.flags.writeable = False
    return perm


def rank_to_key(mapping: KeyMapping, rank: int) -> bytes:
    _check_rank(rank, mapping.key_count)
    if mapping.scheme is KeyScheme.SEEDED_PERMUTATION:
        rank = int(_permutation(mapping.permutation_seed, mapping.key_count)[rank - 1])
    return f"{mapping.prefix}{rank}".encode()


def format_vector(seed: int, params: ZipfianParams, ranks: list[int]) -> str:
    return " ".join([str(seed), str(params.key_count), repr(params.skew), *map(str, ranks)])


def load_vectors(path: Union[str, Path]) -> list[tuple[int, ZipfianParams, list[int]]]:
    """Read ``seed N alpha r1 r2 ...`` lines; '#' starts a comment."""
    vectors = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        seed, n, alpha, *ranks = line.split()
        vectors.append(
            (int(seed), ZipfianParams(int(n), float(alpha)), [int(r) for r in ranks])
        )
    return vectors
