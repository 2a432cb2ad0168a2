import random
from fractions import Fraction

import pytest

from moran_moments.core import EMPTY, SiteSet
from moran_moments.partitions import (
    PartialPartition,
    bell_number,
    block_assignments,
    composite_split_rate,
    disrupts,
    marginal_rates,
    partial_partitions,
)


class TestDisrupts:
    def test_empty_set_never_disrupts(self):
        assert not disrupts(EMPTY, [SiteSet.of(1, 2)])

    def test_whole_block_never_disrupts(self):
        assert not disrupts(SiteSet.of(1, 2), [SiteSet.of(1, 2)])

    def test_single_block_proper_subsets(self):
        # exhaustive over subsets of a 2-site block
        block = SiteSet.of(1, 2)
        hits = [SiteSet(m) for m in range(4) if disrupts(SiteSet(m), [block])]
        assert hits == [SiteSet.of(1), SiteSet.of(2)]

    def test_two_blocks_exhaustive(self):
        blocks = [SiteSet.of(1, 2), SiteSet.of(3, 4)]
        assert disrupts(SiteSet.of(1, 3), blocks)
        assert not disrupts(SiteSet.of(1, 2, 3), blocks)  # contains a block
        expected = {
            SiteSet(m)
            for m in range(16)
            if all(
                0 != (m & b.mask) != b.mask for b in blocks
            )
        }
        got = {SiteSet(m) for m in range(16) if disrupts(SiteSet(m), blocks)}
        assert got == expected
        assert len(got) == 4

    def test_complement_within_support_also_disrupts(self):
        blocks = [SiteSet.of(1, 2), SiteSet.of(3, 4)]
        support = SiteSet.of(1, 2, 3, 4)
        for m in range(16):
            g = SiteSet(m)
            if disrupts(g, blocks):
                assert disrupts(g.complement_in(support), blocks)


class TestMarginalRates:
    def rho3(self, r1, r2, r3):
        return {
            SiteSet.of(1): r1, SiteSet.of(2, 3): r1,
            SiteSet.of(2): r2, SiteSet.of(1, 3): r2,
            SiteSet.of(3): r3, SiteSet.of(1, 2): r3,
        }

    def test_restrict_to_everything_is_identity(self):
        rho = self.rho3(1.0, 2.0, 3.0)
        out = marginal_rates(rho, SiteSet.full(3))
        for g, r in rho.items():
            assert out[g] == r

    def test_three_site_example(self):
        r1, r2, r3 = 1.25, 0.5, 2.0
        out = marginal_rates(self.rho3(r1, r2, r3), SiteSet.of(1, 2))
        # {1} collects G = {1} and G = {1,3}
        assert out[SiteSet.of(1)] == r1 + r2
        assert out[SiteSet.of(2)] == r2 + r1
        assert out[EMPTY] == r3
        assert out[SiteSet.of(1, 2)] == r3

    def test_symmetry_under_complement(self):
        rng = random.Random(1)
        for _ in range(20):
            rho = self.rho3(rng.random(), rng.random(), rng.random())
            restrict = SiteSet(rng.randint(0, 7))
            out = marginal_rates(rho, restrict)
            for h, r in out.items():
                assert out[h.complement_in(restrict)] == pytest.approx(r)

    def test_iterated_lumping(self):
        rng = random.Random(2)
        rho = self.rho3(rng.random(), rng.random(), rng.random())
        outer = SiteSet.of(1, 2)
        inner = SiteSet.of(2)
        once = marginal_rates(rho, inner)
        twice = marginal_rates(marginal_rates(rho, outer), inner)
        for h in inner.subsets():
            assert twice[h] == pytest.approx(once[h])


class TestCompositeSplitRate:
    def test_no_free_region_reduces_to_lookup(self):
        rho = {SiteSet.of(1): Fraction(2, 3), SiteSet.of(2): Fraction(2, 3)}
        got = composite_split_rate(rho, EMPTY, [], SiteSet.of(1))
        assert got == Fraction(2, 3)

    def test_single_broken_block_hand_enumeration(self):
        rho = {SiteSet.of(1): Fraction(1, 2), SiteSet.of(2): Fraction(1, 3)}
        got = composite_split_rate(rho, EMPTY, [SiteSet.of(1, 2)], EMPTY)
        assert got == Fraction(1, 2) + Fraction(1, 3)

    def test_overlapping_regions_rejected(self):
        with pytest.raises(ValueError):
            composite_split_rate({}, SiteSet.of(1), [SiteSet.of(1, 2)], EMPTY)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        rng = random.Random(seed)
        n = 4
        universe = SiteSet.full(n)
        rho = {}
        for m in range(1, 2**n - 1):
            g = SiteSet(m)
            gc = g.complement_in(universe)
            if g in rho or gc in rho:
                continue
            r = Fraction(rng.randint(0, 5), rng.randint(1, 7))
            rho[g] = r
            rho[gc] = r
        # random disjoint free / broken / base regions
        free = SiteSet.of(4)
        broken = [SiteSet.of(1, 2)]
        base = SiteSet.of(3)
        got = composite_split_rate(rho, free, broken, base)
        expected = Fraction(0)
        for d_mask in range(16):
            d = SiteSet(d_mask)
            if not d.issubset(free):
                continue
            for h_mask in range(16):
                h = SiteSet(h_mask)
                if not h.issubset(SiteSet.of(1, 2)):
                    continue
                if not all(0 != (h.mask & b.mask) != b.mask for b in broken):
                    continue
                expected += rho.get(h | d | base, 0)
        assert got == expected


class TestPartialPartitions:
    def test_empty_support(self):
        out = partial_partitions(EMPTY)
        assert out == [PartialPartition(())]

    def test_two_sites_listed(self):
        out = partial_partitions(SiteSet.of(1, 2))
        expected = {
            PartialPartition(()),
            PartialPartition.of([1]),
            PartialPartition.of([2]),
            PartialPartition.of([1], [2]),
            PartialPartition.of([1, 2]),
        }
        assert set(out) == expected and len(out) == 5

    @pytest.mark.parametrize("n", range(6))
    def test_counts_follow_bell_numbers(self, n):
        out = partial_partitions(SiteSet.full(n))
        assert len(out) == bell_number(n + 1)
        assert len(out) == len(set(out))

    def test_four_sites_count(self):
        assert len(partial_partitions(SiteSet.full(4))) == 52

    def test_deterministic_order(self):
        a = partial_partitions(SiteSet.of(1, 3, 4))
        b = partial_partitions(SiteSet.of(1, 3, 4))
        assert a == b == sorted(a)

    def test_cap(self):
        with pytest.raises(ValueError):
            partial_partitions(SiteSet.full(11))

    def test_canonical_form_rejects_overlap(self):
        with pytest.raises(ValueError):
            PartialPartition.of([1, 2], [2, 3])
        with pytest.raises(ValueError):
            PartialPartition((EMPTY,))

    def test_labels(self):
        # canonical block order is by encoded mask
        assert PartialPartition.of([1, 3], [2]).label() == "{2}|{1,3}"
        assert PartialPartition.of([1, 3], [2]) == PartialPartition.of([2], [1, 3])
        assert PartialPartition(()).label() == "{}"


class TestBlockAssignments:
    def test_one_block(self):
        got = set(block_assignments(1))
        assert got == {((), (0,), ()), ((), (), (0,))}

    def test_counts(self):
        for m in range(5):
            assert len(block_assignments(m)) == 3**m - 1

    def test_roles_partition_indices(self):
        for roles in block_assignments(3):
            combined = sorted(roles.kept + roles.joined + roles.broken)
            assert combined == [0, 1, 2]
            assert len(roles.kept) < 3
