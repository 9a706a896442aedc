"""Session-key generation, positional (n, n) splitting, shuffling and reassembly.

Keys and fragments are carried as '0'/'1' strings so that fragment boundaries
may fall anywhere, not only on byte edges.  ``to_bytes`` gives the padded byte
form used on the wire.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .errors import ConflictError, IncompleteSetError, ParameterError, StateError

_BITS = frozenset("01")


def bits_to_bytes(bits: str) -> bytes:
    """Left-aligned big-endian packing; the final byte is zero-padded."""
    if not bits:
        return b""
    pad = (-len(bits)) % 8
    return int(bits + "0" * pad, 2).to_bytes((len(bits) + pad) // 8, "big")


def bytes_to_bits(data: bytes, bit_length: int) -> str:
    if bit_length > 8 * len(data):
        raise ParameterError(f"bit_length {bit_length} exceeds {len(data)} bytes")
    if not data:
        return ""
    return format(int.from_bytes(data, "big"), f"0{8 * len(data)}b")[:bit_length]


@dataclass(frozen=True)
class SessionKey:
    bits: str

    def __post_init__(self):
        if not set(self.bits) <= _BITS:
            raise ParameterError("key bits must be a '0'/'1' string")
        _check_key_type(len(self.bits))

    @property
    def key_type(self) -> int:
        return len(self.bits)

    def to_bytes(self) -> bytes:
        return bits_to_bytes(self.bits)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SessionKey":
        return cls(bytes_to_bits(data, 8 * len(data)))


@dataclass(frozen=True)
class Fragment:
    index: int
    total: int
    bits: str

    def __post_init__(self):
        if self.total < 1:
            raise ParameterError(f"fragment total must be >= 1, got {self.total}")
        if not 1 <= self.index <= self.total:
            raise ParameterError(f"fragment index {self.index} outside [1, {self.total}]")
        if not self.bits or not set(self.bits) <= _BITS:
            raise ParameterError("fragment payload must be a non-empty '0'/'1' string")

    @property
    def bit_length(self) -> int:
        return len(self.bits)

    def payload_bytes(self) -> bytes:
        return bits_to_bytes(self.bits)

    def label(self) -> str:
        return f"Part {self.index} of {self.total}"


@dataclass(frozen=True)
class FragmentSet:
    """Fragments in dispatch order.

    ``permutation[p]`` is the original index of the fragment dispatched at
    position ``p``.
    """

    fragments: tuple[Fragment, ...]
    permutation: tuple[int, ...]
    shuffled: bool = False

    def __post_init__(self):
        n = len(self.fragments)
        if n == 0:
            raise ParameterError("a fragment set needs at least one fragment")
        if sorted(f.index for f in self.fragments) != list(range(1, n + 1)):
            raise ConflictError("fragment indices must cover 1..n exactly once")
        if tuple(f.index for f in self.fragments) != tuple(self.permutation):
            raise ConflictError("permutation does not match dispatch order")
        if not self.shuffled and self.permutation != tuple(range(1, n + 1)):
            raise StateError("an unshuffled set must be in index order")

    @property
    def total(self) -> int:
        return len(self.fragments)

    def __iter__(self):
        return iter(self.fragments)

    def __len__(self):
        return len(self.fragments)


def _check_key_type(key_type: int) -> None:
    if isinstance(key_type, bool) or not isinstance(key_type, (int, np.integer)):
        raise ParameterError(f"key_type must be an integer, got {key_type!r}")
    if key_type < 8 or key_type % 8:
        raise ParameterError(f"key_type must be a positive multiple of 8 (>= 8), got {key_type}")


def generate_key(key_type: int, rng: np.random.Generator) -> SessionKey:
    """Draw ``key_type`` uniformly random bits from ``rng``."""
    _check_key_type(key_type)
    raw = rng.integers(0, 256, size=key_type // 8, dtype=np.uint8).tobytes()
    return SessionKey.from_bytes(raw)


def fragment_lengths(length: int, n: int) -> list[int]:
    """The first ``length % n`` slices get the extra bit."""
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)):
        raise ParameterError(f"n must be an integer, got {n!r}")
    if not 1 <= n <= length:
        raise ParameterError(f"n must lie in [1, {length}], got {n}")
    q, r = divmod(length, n)
    return [q + 1] * r + [q] * (n - r)


def split_key(key: SessionKey, n: int) -> FragmentSet:
    lengths = fragment_lengths(key.key_type, n)
    frags = []
    start = 0
    for i, size in enumerate(lengths, start=1):
        frags.append(Fragment(i, n, key.bits[start:start + size]))
        start += size
    return FragmentSet(tuple(frags), tuple(range(1, n + 1)), shuffled=False)


def fisher_yates(n: int, rng: np.random.Generator) -> list[int]:
    """Uniform permutation of ``range(n)`` (Durstenfeld's in-place variant)."""
    order = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return order


def shuffle_fragments(fset: FragmentSet, rng: np.random.Generator) -> FragmentSet:
    if fset.shuffled:
        raise StateError("fragment set is already shuffled")
    order = fisher_yates(fset.total, rng)
    frags = tuple(fset.fragments[k] for k in order)
    return replace(fset, fragments=frags, permutation=tuple(f.index for f in frags), shuffled=True)


def reassemble(fragments: Iterable[Fragment]) -> SessionKey:
    """Concatenate fragments in index order, whatever order they arrive in."""
    by_index: dict[int, Fragment] = {}
    total = None
    for frag in fragments:
        if total is None:
            total = frag.total
        elif frag.total != total:
            raise ConflictError(f"fragment totals disagree: {total} vs {frag.total}")
        seen = by_index.get(frag.index)
        if seen is not None and seen.bits != frag.bits:
            raise ConflictError(f"conflicting payloads for fragment {frag.index}")
        by_index[frag.index] = frag
    if total is None:
        raise IncompleteSetError([], 0)
    missing = set(range(1, total + 1)) - by_index.keys()
    if missing:
        raise IncompleteSetError(missing, total)
    return SessionKey("".join(by_index[i].bits for i in range(1, total + 1)))
