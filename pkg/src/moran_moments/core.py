"""Type space, population states, model parameters, and per-event rate formulas.

Sites are numbered 1..n (n <= 16) and site subsets are stored as bitmasks
(site i <-> bit i-1).  Genotypes are tuples of 0-based allele indices, one
per site.  A population state is a counting measure on the genotype space
with fixed total mass N.

All rate formulas below work with any numeric type that supports the ring
operations (int, float, fractions.Fraction), so exact-arithmetic checks can
reuse the same code paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

MAX_SITES = 16

Genotype = tuple  # tuple of per-site allele indices


@dataclass(frozen=True, order=True)
class SiteSet:
    """An immutable subset of the site index set {1,..,n}, encoded as a bitmask."""

    mask: int = 0

    def __post_init__(self):
        if not 0 <= self.mask < (1 << MAX_SITES):
            raise ValueError(f"site mask {self.mask:#x} outside the supported 1..{MAX_SITES} range")

    @classmethod
    def of(cls, *sites: int) -> "SiteSet":
        return cls.from_sites(sites)

    @classmethod
    def from_sites(cls, sites: Iterable[int]) -> "SiteSet":
        mask = 0
        for s in sites:
            if not 1 <= s <= MAX_SITES:
                raise ValueError(f"site {s} outside 1..{MAX_SITES}")
            mask |= 1 << (s - 1)
        return cls(mask)

    @classmethod
    def full(cls, n: int) -> "SiteSet":
        if not 0 <= n <= MAX_SITES:
            raise ValueError(f"site count {n} outside 0..{MAX_SITES}")
        return cls((1 << n) - 1)

    @property
    def sites(self) -> tuple:
        """Member sites in increasing order (1-based)."""
        return tuple(i + 1 for i in range(MAX_SITES) if self.mask >> i & 1)

    def __len__(self) -> int:
        return self.mask.bit_count()

    def __bool__(self) -> bool:
        return self.mask != 0

    def __contains__(self, site: int) -> bool:
        return 1 <= site <= MAX_SITES and self.mask >> (site - 1) & 1 == 1

    def __iter__(self) -> Iterator[int]:
        return iter(self.sites)

    def __or__(self, other: "SiteSet") -> "SiteSet":
        return SiteSet(self.mask | other.mask)

    def __and__(self, other: "SiteSet") -> "SiteSet":
        return SiteSet(self.mask & other.mask)

    def __sub__(self, other: "SiteSet") -> "SiteSet":
        return SiteSet(self.mask & ~other.mask)

    def issubset(self, other: "SiteSet") -> bool:
        return self.mask & ~other.mask == 0

    def isdisjoint(self, other: "SiteSet") -> bool:
        return self.mask & other.mask == 0

    def complement_in(self, universe: "SiteSet") -> "SiteSet":
        """Complement relative to an explicit universe (never an implicit one)."""
        if not self.issubset(universe):
            raise ValueError(f"{self} is not contained in the universe {universe}")
        return SiteSet(universe.mask & ~self.mask)

    def subsets(self) -> Iterator["SiteSet"]:
        """All subsets, in increasing mask order."""
        sub = self.mask
        out = []
        while True:
            out.append(SiteSet(sub))
            if sub == 0:
                break
            sub = (sub - 1) & self.mask
        return iter(sorted(out))

    def __str__(self) -> str:
        return "{" + ",".join(str(s) for s in self.sites) + "}"


EMPTY = SiteSet(0)


def validate_genotype(x: Sequence[int], allele_counts: Sequence[int]) -> Genotype:
    x = tuple(int(a) for a in x)
    if len(x) != len(allele_counts):
        raise ValueError(f"genotype {x} has {len(x)} sites, model has {len(allele_counts)}")
    for i, (a, k) in enumerate(zip(x, allele_counts), start=1):
        if not 0 <= a < k:
            raise ValueError(f"allele {a} at site {i} outside 0..{k - 1}")
    return x


@dataclass(frozen=True)
class PopulationState:
    """Counting measure on the genotype space with total mass N."""

    counts: Mapping[Genotype, int]
    N: int

    def __post_init__(self):
        cleaned = {}
        for x, c in self.counts.items():
            c = int(c)
            if c < 0:
                raise ValueError(f"negative count {c} for genotype {x}")
            if c > 0:
                cleaned[tuple(x)] = c
        if sum(cleaned.values()) != self.N:
            raise ValueError(f"counts sum to {sum(cleaned.values())}, expected N={self.N}")
        object.__setattr__(self, "counts", cleaned)

    def count(self, x: Genotype) -> int:
        return self.counts.get(tuple(x), 0)

    def types(self) -> tuple:
        return tuple(sorted(self.counts))


@dataclass(frozen=True)
class SignedUpdate:
    """An integer-valued change of a population state; deltas sum to zero for
    recombination, mutation, and resampling events."""

    deltas: Mapping[Genotype, int]

    def __post_init__(self):
        object.__setattr__(
            self, "deltas", {tuple(x): int(d) for x, d in self.deltas.items() if d != 0}
        )

    def is_zero(self) -> bool:
        return not self.deltas

    def total(self) -> int:
        return sum(self.deltas.values())

    def apply_to(self, z: PopulationState) -> PopulationState:
        counts = dict(z.counts)
        for x, d in self.deltas.items():
            counts[x] = counts.get(x, 0) + d
        return PopulationState(counts, z.N)


def _mirror_rho(n: int, rho: Mapping[SiteSet, object]) -> dict:
    """Expand a one-entry-per-unordered-pair rate map to the full symmetric map.

    Conflicting duplicate entries (both a set and its complement given, with
    different rates) are rejected.  Rates for the empty and the full site set
    must be zero.
    """
    full = SiteSet.full(n)
    out: dict = {}
    for g, r in rho.items():
        if not isinstance(g, SiteSet):
            g = SiteSet.from_sites(g)
        if not g.issubset(full):
            raise ValueError(f"recombination set {g} not within {full}")
        if r < 0:
            raise ValueError(f"negative recombination rate for {g}")
        gc = g.complement_in(full)
        for key in (g, gc):
            if key in out and out[key] != r:
                raise ValueError(
                    f"conflicting rates for the pair {g}/{gc}: {out[key]} vs {r}"
                )
        out[g] = r
        out[gc] = r
    for trivial in (EMPTY, full):
        if out.get(trivial, 0) != 0:
            raise ValueError(f"rate for {trivial or '{}'} must be 0")
        out.pop(trivial, None)
    return out


@dataclass(frozen=True)
class ModelParams:
    """Moran-model parameters: recombination rates per site subset, per-site
    mutation rate matrices, and the resampling (birth) rate.

    ``rho`` is given once per unordered pair {G, complement} and mirrored; the
    empty and full set carry rate zero by convention.  Mutation matrices are
    indexed [site][from_allele][to_allele] with zero diagonal.
    """

    allele_counts: tuple
    N: int
    rho: Mapping[SiteSet, object] = field(default_factory=dict)
    mu: Mapping[int, Sequence[Sequence[object]]] = field(default_factory=dict)
    b: object = 0

    def __post_init__(self):
        counts = tuple(int(k) for k in self.allele_counts)
        if not 1 <= len(counts) <= MAX_SITES:
            raise ValueError(f"site count {len(counts)} outside 1..{MAX_SITES}")
        if any(k < 1 for k in counts):
            raise ValueError("every site needs at least one allele")
        if self.N < 1:
            raise ValueError("population size must be positive")
        if self.b < 0:
            raise ValueError("resampling rate must be nonnegative")
        object.__setattr__(self, "allele_counts", counts)
        object.__setattr__(self, "rho", _mirror_rho(len(counts), self.rho))
        mu = {}
        for site, mat in self.mu.items():
            site = int(site)
            if site not in SiteSet.full(len(counts)):
                raise ValueError(f"mutation matrix for unknown site {site}")
            k = counts[site - 1]
            rows = []
            for a in range(k):
                row = list(mat[a])
                if len(row) != k:
                    raise ValueError(f"mutation matrix at site {site} is not {k}x{k}")
                row[a] = 0  # diagonal forced to zero
                if any(r < 0 for r in row):
                    raise ValueError(f"negative mutation rate at site {site}")
                rows.append(tuple(row))
            if any(any(r != 0 for r in row) for row in rows):
                mu[site] = tuple(rows)
        object.__setattr__(self, "mu", mu)

    @property
    def n(self) -> int:
        return len(self.allele_counts)

    @property
    def all_sites(self) -> SiteSet:
        return SiteSet.full(self.n)

    def nonzero_rho(self) -> tuple:
        """(G, rate) pairs with positive rate, both complements listed, stable order."""
        return tuple(sorted(((g, r) for g, r in self.rho.items() if r > 0)))

    def rho_sum(self):
        return sum((r for _, r in self.nonzero_rho()), 0)

    def mu_rate(self, site: int, a: int, b: int):
        mat = self.mu.get(site)
        return mat[a][b] if mat is not None else 0

    def has_mutation(self) -> bool:
        return bool(self.mu)

    def genotypes(self) -> tuple:
        """All genotypes in lexicographic order."""
        out = [()]
        for k in self.allele_counts:
            out = [x + (a,) for x in out for a in range(k)]
        return tuple(out)

    def genotype_count(self) -> int:
        return math.prod(self.allele_counts)


def recombine(x: Genotype, y: Genotype, keep: SiteSet) -> Genotype:
    """The offspring that keeps x's alleles on ``keep`` and y's elsewhere."""
    return tuple(
        x[i] if (i + 1) in keep else y[i] for i in range(len(x))
    )


def project(x: Genotype, sites: SiteSet) -> Genotype:
    """Restriction of a genotype to a site subset, preserving site order."""
    return tuple(x[s - 1] for s in sites.sites)


def marginalize(z: PopulationState, sites: SiteSet) -> PopulationState:
    """Marginal counting measure on the restricted type space; total mass N."""
    counts: dict = {}
    for x, c in z.counts.items():
        u = project(x, sites)
        counts[u] = counts.get(u, 0) + c
    return PopulationState(counts, z.N)


def marginal_count(z: PopulationState, sites: SiteSet, reference: Genotype) -> int:
    """Number of individuals matching ``reference`` on ``sites`` ([A] of the reference)."""
    want = project(reference, sites)
    return sum(c for x, c in z.counts.items() if project(x, sites) == want)


def recombination_update(G: SiteSet, x: Genotype, y: Genotype) -> SignedUpdate:
    """Net state change of the recombination event (G, x, y); may be zero."""
    deltas: dict = {}
    for g, d in ((x, -1), (y, -1)):
        deltas[g] = deltas.get(g, 0) + d
    universe = SiteSet.full(len(x))
    for child in (recombine(x, y, G), recombine(x, y, G.complement_in(universe))):
        deltas[child] = deltas.get(child, 0) + 1
    return SignedUpdate(deltas)


def true_jump_rates(z: PopulationState, xstar: Genotype, params: ModelParams):
    """Rates of the transitions z(x*) -> z(x*) +/- 1 in the recombination-only model.

    up   = sum_G rho_G/(2N) ([G] - z(x*)) ([Gbar] - z(x*))
    down = sum_G rho_G/(2N) z(x*) (N - [G] - [Gbar] + z(x*))

    where [G] counts individuals matching x* on G.  Only meaningful without
    mutation and resampling, where the full-type count moves in unit steps.
    """
    if params.b != 0 or params.has_mutation():
        raise ValueError("true jump rates require b = 0 and no mutation")
    N = params.N
    zx = z.count(xstar)
    universe = params.all_sites
    up = 0
    down = 0
    for g, r in params.nonzero_rho():
        mg = marginal_count(z, g, xstar)
        mgc = marginal_count(z, g.complement_in(universe), xstar)
        up = up + r * (mg - zx) * (mgc - zx) / (2 * N)
        down = down + r * zx * (N - mg - mgc + zx) / (2 * N)
    return up, down
