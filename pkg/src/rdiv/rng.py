"""Deterministic keyed randomness.

Every random artifact in the system (permutations, sign masks, coefficient
subsets, weight init, shuffle order) is derived from a single 64-bit master
key through the functions in this module. The generator is SplitMix64, chosen
because it is trivially portable and bit-exact: the same key must yield the
same transforms at training and test time, on any platform. The exact
recurrence, the sub-key derivation constants, and the modulo rule used in the
shuffle are part of the wire-level contract; saved models are only valid as
long as these stay fixed.

There is no cryptographic claim here and no hidden global state: all
functions are pure, and the RNG state is passed by value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1

# SplitMix64 constants (Steele, Lea, Flood 2014).
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# Second mixing constant for the branch index in sub-key derivation.
_BRANCH_C = 0xC2B2AE3D27D4EB4F

# Purpose tags keep the derived streams for one (j, i) lineage disjoint.
TAG_PREPROCESS = 0
TAG_INIT = 1
TAG_SHUFFLE = 2
TAG_PER_COLOR_BASE = 16  # per-color permutations use TAG_PER_COLOR_BASE + c


@dataclass(frozen=True)
class MasterKey:
    """Secret 64-bit key shared between training and testing."""

    value: int

    def __post_init__(self):
        if not 0 <= self.value <= _MASK64:
            raise ValueError(f"master key must be a 64-bit unsigned value, got {self.value}")

    @classmethod
    def from_hex(cls, text: str) -> "MasterKey":
        """Parse the 16-hex-digit serialized form."""
        if len(text) != 16:
            raise ValueError(f"key hex must be 16 digits, got {text!r}")
        return cls(int(text, 16))

    def to_hex(self) -> str:
        return f"{self.value:016x}"


@dataclass(frozen=True)
class SubKey:
    """Key derived from a master key for one (group, branch, purpose) lineage."""

    value: int
    j: int
    i: int
    tag: int

    def to_hex(self) -> str:
        return f"{self.value:016x}"


@dataclass(frozen=True)
class RngState:
    """SplitMix64 state. next_u64 is a pure transition on this value."""

    state: int


def next_u64(state: RngState) -> tuple[int, RngState]:
    """Advance SplitMix64 one step; returns (output, next state).

    Bit-exact recurrence, all arithmetic mod 2**64:
        state' = state + 0x9E3779B97F4A7C15
        z = state'
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        output = z ^ (z >> 31)
    """
    s = (state.state + _GAMMA) & _MASK64
    z = s
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31), RngState(s)


def u64_stream(state: RngState, count: int) -> np.ndarray:
    """Vectorized SplitMix64: the next `count` outputs as a uint64 array.

    Produces exactly the values of `count` sequential next_u64 calls. The
    state sequence is the arithmetic progression state + k * gamma, so the
    whole stream can be mixed elementwise.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    with np.errstate(over="ignore"):
        s = np.uint64(state.state) + (np.arange(1, count + 1, dtype=np.uint64)
                                      * np.uint64(_GAMMA))
        z = s
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


def skip(state: RngState, count: int) -> RngState:
    """State after `count` next_u64 steps, in O(1)."""
    return RngState((state.state + count * _GAMMA) & _MASK64)


def derive_subkey(master: MasterKey, j: int, i: int, tag: int) -> SubKey:
    """Derive the sub-key for lineage (j, i, tag).

    One SplitMix64 step from state master ^ (j * gamma) ^ (i * branch_c) ^ tag.
    Pure in its inputs; distinct lineages give distinct keys with
    overwhelming probability.
    """
    if j < 0 or i < 0 or tag < 0:
        raise ValueError("lineage indices must be non-negative")
    seed = (master.value
            ^ ((j * _GAMMA) & _MASK64)
            ^ ((i * _BRANCH_C) & _MASK64)
            ^ tag) & _MASK64
    value, _ = next_u64(RngState(seed))
    return SubKey(value, j, i, tag)


def uniform_floats(key: SubKey, count: int) -> np.ndarray:
    """`count` keyed floats in [0, 1), float64, from the key's stream.

    Uses the top 53 bits of each draw so every value is exactly
    representable.
    """
    raw = u64_stream(RngState(key.value), count)
    return (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53


def keyed_permutation(key: SubKey, n: int) -> np.ndarray:
    """Keyed bijection of [0..n-1] as an int64 array.

    Descending Fisher-Yates over the key's stream with swap index
    draw mod (i+1). Modulo (not rejection) sampling: the bias is negligible
    for n <= 4096 and the output is fully pinned down by the key.
    """
    if n < 1:
        raise ValueError("permutation length must be at least 1")
    perm = list(range(n))
    draws = u64_stream(RngState(key.value), n - 1)
    for k, i in enumerate(range(n - 1, 0, -1)):
        j = int(draws[k]) % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return np.asarray(perm, dtype=np.int64)


def keyed_sign_mask(key: SubKey, shape: tuple[int, int],
                    region: tuple[int, int, int, int]) -> np.ndarray:
    """Keyed {-1,+1} mask over `shape`, flipping only inside `region`.

    `region` is (row0, row1, col0, col1), half-open. Entries outside the
    region are +1. Inside, the low bit of each draw (row-major over the
    region) selects -1 (bit 1) or +1 (bit 0).
    """
    rows, cols = shape
    r0, r1, c0, c1 = region
    if not (0 <= r0 <= r1 <= rows and 0 <= c0 <= c1 <= cols):
        raise ValueError(f"region {region} out of bounds for shape {shape}")
    mask = np.ones(shape, dtype=np.float64)
    count = (r1 - r0) * (c1 - c0)
    if count == 0:
        return mask
    bits = u64_stream(RngState(key.value), count) & np.uint64(1)
    block = 1.0 - 2.0 * bits.astype(np.float64)  # bit 1 -> -1, bit 0 -> +1
    mask[r0:r1, c0:c1] = block.reshape(r1 - r0, c1 - c0)
    return mask


def keyed_subset(key: SubKey, n: int, l: int) -> np.ndarray:
    """`l` distinct keyed indices of [0..n-1], sorted ascending.

    The first l entries of keyed_permutation(key, n).
    """
    if not 1 <= l <= n:
        raise ValueError(f"need 1 <= l <= n, got l={l}, n={n}")
    return np.sort(keyed_permutation(key, n)[:l])
