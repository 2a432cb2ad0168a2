"""Subset and partition combinatorics for the moment hierarchy.

A *partial partition* is a set of pairwise-disjoint nonempty site subsets;
its canonical form (blocks sorted by mask) is the index type of the moment
systems.  The disruption predicate and the lumped rate sums below govern
which recombination sets create or break blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

from .core import EMPTY, SiteSet

PARTITION_SITE_CAP = 10


@dataclass(frozen=True, order=True)
class PartialPartition:
    """Canonically sorted collection of pairwise-disjoint nonempty site sets."""

    blocks: tuple

    def __post_init__(self):
        blocks = tuple(sorted(self.blocks))
        seen = 0
        for b in blocks:
            if not isinstance(b, SiteSet):
                raise TypeError("blocks must be SiteSets")
            if not b:
                raise ValueError("empty block in partial partition")
            if seen & b.mask:
                raise ValueError(f"overlapping blocks in {blocks}")
            seen |= b.mask
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def of(cls, *site_lists: Iterable[int]) -> "PartialPartition":
        return cls(tuple(SiteSet.from_sites(s) for s in site_lists))

    @property
    def support(self) -> SiteSet:
        u = 0
        for b in self.blocks:
            u |= b.mask
        return SiteSet(u)

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def label(self) -> str:
        """Stable textual encoding, e.g. "{1,3}|{2}"; "{}" for the empty collection."""
        if not self.blocks:
            return "{}"
        return "|".join(str(b) for b in self.blocks)


EMPTY_PARTITION = PartialPartition(())


def disrupts(G: SiteSet, blocks: Sequence[SiteSet]) -> bool:
    """True iff G splits every block nontrivially: {} != G & A != A for all blocks A."""
    for a in blocks:
        cut = G.mask & a.mask
        if cut == 0 or cut == a.mask:
            return False
    return True


def marginal_rates(rho: Mapping[SiteSet, object], restrict_to: SiteSet) -> dict:
    """Lump a recombination rate map onto a site subset.

    Returns H |-> sum of rho over all G with G & restrict_to == H, for every
    H within ``restrict_to`` (the rates of the induced process on those sites).
    """
    out = {h: 0 for h in restrict_to.subsets()}
    for g, r in rho.items():
        h = g & restrict_to
        out[h] = out[h] + r
    return out


def composite_split_rate(
    rho: Mapping[SiteSet, object],
    free_sites: SiteSet,
    broken_blocks: Sequence[SiteSet],
    base_split: SiteSet,
) -> object:
    """Total rate of recombination sets of the form H | D | base_split, where D
    is any subset of ``free_sites`` and H splits every one of ``broken_blocks``
    nontrivially.  The three regions must be pairwise disjoint."""
    broken_union = EMPTY
    for b in broken_blocks:
        broken_union = broken_union | b
    regions = (free_sites, broken_union, base_split)
    for i, a in enumerate(regions):
        for b in regions[i + 1:]:
            if not a.isdisjoint(b):
                raise ValueError("free sites, broken blocks, and base split must be disjoint")
    total = 0
    for d in free_sites.subsets():
        for h in broken_union.subsets():
            if not disrupts(h, broken_blocks):
                continue
            total = total + rho.get(h | d | base_split, 0)
    return total


def partial_partitions(sites: SiteSet) -> list:
    """All partial partitions of ``sites`` (every set of disjoint nonempty
    subsets, including the empty collection), canonical and deterministic."""
    if len(sites) > PARTITION_SITE_CAP:
        raise ValueError(f"partial partition enumeration capped at {PARTITION_SITE_CAP} sites")

    def rec(mask: int) -> list:
        if mask == 0:
            return [()]
        low = mask & -mask
        rest = mask & ~low
        out = []
        # lowest site left out of every block
        for tail in rec(rest):
            out.append(tail)
        # lowest site in a block together with each subset of the rest
        sub = rest
        while True:
            block = low | sub
            for tail in rec(rest & ~sub):
                out.append((block,) + tail)
            if sub == 0:
                break
            sub = (sub - 1) & rest
        return out

    found = {
        PartialPartition(tuple(SiteSet(m) for m in blocks))
        for blocks in rec(sites.mask)
    }
    return sorted(found)


def full_partitions(sites: SiteSet) -> list:
    """Partial partitions whose blocks cover ``sites`` exactly."""
    return [p for p in partial_partitions(sites) if p.support == sites]


class BlockAssignment(NamedTuple):
    """Disjoint roles for the blocks of an m-block partition: indices kept
    fixed, indices whose block gets joined, and indices whose block breaks."""

    kept: tuple
    joined: tuple
    broken: tuple


def block_assignments(m: int) -> list:
    """All ways to assign m block indices to (kept, joined, broken), except
    the all-kept assignment; 3^m - 1 entries."""
    if m < 0:
        raise ValueError("block count must be nonnegative")
    out = []
    for code in range(3**m):
        kept, joined, broken = [], [], []
        c = code
        for i in range(m):
            role = c % 3
            c //= 3
            (kept, joined, broken)[role].append(i)
        if len(kept) == m:
            continue
        out.append(BlockAssignment(tuple(kept), tuple(joined), tuple(broken)))
    return out


def bell_number(n: int) -> int:
    """Bell numbers via the triangle recurrence (used to cross-check counts)."""
    row = [1]
    for _ in range(n):
        nxt = [row[-1]]
        for v in row:
            nxt.append(nxt[-1] + v)
        row = nxt
    return row[0]
