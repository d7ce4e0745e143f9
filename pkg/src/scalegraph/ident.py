"""B-bit identifier space shared by nodes and accounts.

Node IDs and account addresses live in the same space and are compared
with the XOR metric: distance(a, b) = a ^ b, read as an unsigned B-bit
integer. For a fixed target the map id -> distance is a bijection, so
distinct IDs never tie when sorted by distance.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable, List, Sequence

DEFAULT_BITS = 32

Identifier = int
Distance = int


@dataclass(frozen=True)
class IdSpace:
    """Identifier space of a fixed bit width.

    bits must be a multiple of 4 so identifiers print as fixed-width hex.
    """

    bits: int = DEFAULT_BITS

    def __post_init__(self):
        if self.bits <= 0 or self.bits % 4 != 0:
            raise ValueError(f"bits must be a positive multiple of 4, got {self.bits}")

    @property
    def size(self) -> int:
        return 1 << self.bits

    @property
    def hex_digits(self) -> int:
        return self.bits // 4

    def contains(self, ident: Identifier) -> bool:
        return 0 <= ident < self.size

    def check(self, ident: Identifier) -> Identifier:
        if not self.contains(ident):
            raise ValueError(f"identifier {ident!r} outside [0, 2^{self.bits})")
        return ident

    def distance(self, a: Identifier, b: Identifier) -> Distance:
        """XOR distance between two identifiers."""
        return self.check(a) ^ self.check(b)

    def sort_by_distance(
        self, ids: Iterable[Identifier], target: Identifier
    ) -> List[Identifier]:
        """All ids ordered by ascending XOR distance to target.

        Distinct ids always have distinct distances, so the order is a
        strict total order and the result is a permutation of the input.
        """
        self.check(target)
        return sorted(ids, key=lambda i: self.check(i) ^ target)

    def closest(
        self, ids: Iterable[Identifier], target: Identifier, count: int
    ) -> List[Identifier]:
        """The count ids closest to target (fewer if ids has fewer)."""
        if count < 1:
            raise ValueError("count must be >= 1")
        return self.sort_by_distance(ids, target)[:count]

    def random_identifier(self, rng: random.Random) -> Identifier:
        """Uniform identifier; deterministic for a seeded rng."""
        return rng.getrandbits(self.bits)

    def distinct_identifiers(
        self,
        rng: random.Random,
        count: int,
        exclude: Iterable[Identifier] = (),
    ) -> List[Identifier]:
        """count distinct fresh identifiers, also distinct from exclude.

        Collisions are rejected and redrawn; at practical widths they are
        vanishingly rare.
        """
        seen = set(exclude)
        out: List[Identifier] = []
        while len(out) < count:
            ident = rng.getrandbits(self.bits)
            if ident in seen:
                continue
            seen.add(ident)
            out.append(ident)
        return out

    def to_hex(self, ident: Identifier) -> str:
        """Lowercase hex, zero-padded to bits/4 digits."""
        return format(self.check(ident), f"0{self.hex_digits}x")

    def from_hex(self, text: str) -> Identifier:
        ident = int(text, 16)
        return self.check(ident)

    def bucket_index(self, owner: Identifier, other: Identifier) -> int:
        """Position of the highest differing bit; -1 if identical.

        Bucket i holds ids whose distance to owner has its highest set
        bit at position i (0 = least significant).
        """
        d = self.distance(owner, other)
        return d.bit_length() - 1


def distance(a: Identifier, b: Identifier, space: IdSpace | None = None) -> Distance:
    """Module-level convenience wrapper around IdSpace.distance."""
    return (space or IdSpace()).distance(a, b)


def sort_by_distance(
    ids: Sequence[Identifier], target: Identifier, space: IdSpace | None = None
) -> List[Identifier]:
    return (space or IdSpace()).sort_by_distance(ids, target)


def random_identifier(rng: random.Random, space: IdSpace | None = None) -> Identifier:
    return (space or IdSpace()).random_identifier(rng)
