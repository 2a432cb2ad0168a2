import math
from fractions import Fraction

import numpy as np
import pytest
import scipy.sparse as sp

from moran_moments.core import ModelParams, PopulationState, SiteSet
from moran_moments.oracle import (
    ExactModel,
    build_generator,
    enumerate_states,
    state_count,
)
from moran_moments.partitions import PartialPartition
from moran_moments.stats import estimate_moments


def taylor_reference(q: sp.csr_matrix, p0: np.ndarray, t: float, terms=60):
    """Independent truncated Taylor expansion of exp(Q^T t) p0."""
    qt = q.T.tocsr()
    out = p0.copy()
    term = p0.copy()
    for k in range(1, terms):
        term = qt @ term * (t / k)
        out = out + term
    return out


class TestStateEnumeration:
    def test_count_formula(self):
        params = ModelParams((2, 2), 3)
        states = enumerate_states(params)
        assert len(states) == math.comb(3 + 4 - 1, 3) == state_count(params)
        assert sorted(map(tuple, states)) == list(map(tuple, states))
        assert all(s.sum() == 3 for s in states)

    def test_cap_enforced(self):
        with pytest.raises(ValueError):
            enumerate_states(ModelParams((2, 2, 2, 2), 50))


class TestGenerator:
    def test_zero_rates_zero_matrix(self):
        params = ModelParams((2, 2), 2)
        q = build_generator(params)
        assert q.nnz == 0 or np.all(q.toarray() == 0)

    def test_hand_enumerated_transition(self):
        # from {(0,0):1,(1,1):1} to {(0,1):1,(1,0):1}: of the 8 (G, x, y)
        # labelings, the four with positive rate and distinct parents each
        # carry rho_G/(4N) z(x) z(y) = 1/8; the empty and full set carry rate
        # zero and identical parents give empty updates
        params = ModelParams((2, 2), 2, rho={SiteSet.of(1): Fraction(1)})
        model = ExactModel.build(params)
        exact = model.exact_generator()
        src = model.state_index[(1, 0, 0, 1)]  # lexicographic genotype order
        dst = model.state_index[(0, 1, 1, 0)]
        assert exact[src][dst] == Fraction(4, 8)
        assert list(exact[src]) == [dst]
        # the float generator agrees, and so does the true-jump formula for
        # the count of (0,1) rising from 0 to 1 (the same physical jump)
        assert model.generator[src, dst] == pytest.approx(0.5)
        from moran_moments.core import true_jump_rates

        z = PopulationState({(0, 0): 1, (1, 1): 1}, 2)
        up, _ = true_jump_rates(z, (0, 1), params)
        assert up == Fraction(1, 2)

    def test_row_sums_zero(self):
        params = ModelParams((2, 2), 3, rho={SiteSet.of(1): 0.37},
                             mu={2: ((0, 0.21), (0.11, 0))}, b=0.53)
        q = build_generator(params)
        assert np.max(np.abs(np.asarray(q.sum(axis=1)).ravel())) < 1e-12
        off_diag = q.toarray() - np.diag(q.diagonal())
        assert np.all(off_diag >= 0)

    def test_resampling_rates(self):
        params = ModelParams((2,), 2, b=1.0)
        model = ExactModel.build(params)
        # state (1,1): offspring of either type replaces the other at b/(2N)*1*1
        src = model.state_index[(1, 1)]
        up = model.state_index[(2, 0)]
        down = model.state_index[(0, 2)]
        assert model.generator[src, up] == pytest.approx(1.0 / 4)
        assert model.generator[src, down] == pytest.approx(1.0 / 4)


class TestTransient:
    def params(self):
        return ModelParams((2, 2), 3, rho={SiteSet.of(1): 0.8}, b=0.4)

    def test_t_zero_and_zero_generator(self):
        params = self.params()
        model = ExactModel.build(params)
        p0 = model.point_mass(PopulationState({(0, 0): 2, (1, 1): 1}, 3))
        assert np.array_equal(model.transient(p0, 0.0), p0)
        quiet = ExactModel.build(ModelParams((2, 2), 3))
        p0q = quiet.point_mass(PopulationState({(0, 0): 2, (1, 1): 1}, 3))
        assert np.array_equal(quiet.transient(p0q, 2.5), p0q)

    def test_matches_taylor_reference(self):
        model = ExactModel.build(self.params())
        p0 = model.point_mass(PopulationState({(0, 0): 2, (1, 1): 1}, 3))
        for t in (0.05, 0.2):
            a = model.transient(p0, t)
            b = taylor_reference(model.generator, p0, t)
            assert np.abs(a - b).sum() < 1e-9
            assert abs(a.sum() - 1.0) < 1e-10

    def test_probability_conservation_longer_horizon(self):
        model = ExactModel.build(self.params())
        p0 = model.point_mass(PopulationState({(0, 1): 3}, 3))
        for t in (1.0, 5.0, 20.0):
            p = model.transient(p0, t)
            assert abs(p.sum() - 1.0) < 1e-10
            assert np.all(p >= -1e-12)


class TestMoments:
    def test_empty_partition_is_one(self):
        model = ExactModel.build(ModelParams((2, 2), 2, rho={SiteSet.of(1): 1.0}))
        p0 = model.point_mass(PopulationState({(0, 0): 1, (1, 1): 1}, 2))
        assert model.moment(PartialPartition(()), (0, 0), 0.5, p0=p0) == pytest.approx(1.0)

    def test_t_zero_deterministic_products(self):
        model = ExactModel.build(ModelParams((2, 2), 4, rho={SiteSet.of(1): 1.0}))
        z0 = PopulationState({(0, 0): 1, (0, 1): 2, (1, 0): 1}, 4)
        p0 = model.point_mass(z0)
        part = PartialPartition.of([1], [2])
        # [1]=3 (allele 0 at site 1), [2]=2 -> product 6
        assert model.moment(part, (0, 0), 0.0, p0=p0) == pytest.approx(6.0)

    def test_one_site_margins_constant_in_time(self):
        model = ExactModel.build(ModelParams((2, 2), 4, rho={SiteSet.of(1): 1.0}))
        z0 = PopulationState({(0, 0): 1, (0, 1): 2, (1, 1): 1}, 4)
        p0 = model.point_mass(z0)
        part = PartialPartition.of([1])
        v0 = model.moment(part, (0, 0), 0.0, p0=p0)
        for t in (0.5, 2.0):
            assert model.moment(part, (0, 0), t, p0=p0) == pytest.approx(v0, abs=1e-10)

    def test_derivative_zero_generator(self):
        model = ExactModel.build(ModelParams((2, 2), 2))
        p0 = model.point_mass(PopulationState({(0, 0): 1, (1, 1): 1}, 2))
        part = PartialPartition.of([1, 2])
        assert model.moment_derivative(part, (0, 0), p0) == 0.0

    def test_derivative_matches_richardson_finite_difference(self):
        model = ExactModel.build(
            ModelParams((2, 2), 3, rho={SiteSet.of(1): 0.8}, b=0.3)
        )
        p0 = model.point_mass(PopulationState({(0, 0): 2, (1, 1): 1}, 3))
        part = PartialPartition.of([1], [2])
        ref = (0, 0)
        t = 0.4
        p_t = model.transient(p0, t)
        exact = model.moment_derivative(part, ref, p_t)

        def central(h):
            up = model.moment(part, ref, t + h, p0=p0)
            dn = model.moment(part, ref, t - h, p0=p0)
            return (up - dn) / (2 * h)

        d1, d2 = central(0.02), central(0.01)
        richardson = (4 * d2 - d1) / 3
        assert abs(richardson - exact) < 5e-7
        assert abs(central(0.01) - exact) < abs(central(0.04) - exact) + 1e-12

    def test_mean_dynamics_display(self):
        # d/dt E[[S]] = sum_G rho_G/(2N) (E[[G][Gbar]] - N E[[S]])
        params = ModelParams((2, 2, 2), 3,
                             rho={SiteSet.of(1): 0.5, SiteSet.of(2): 0.3,
                                  SiteSet.of(3): 0.7})
        model = ExactModel.build(params)
        z0 = PopulationState({(0, 0, 0): 1, (1, 1, 0): 1, (0, 1, 1): 1}, 3)
        p0 = model.point_mass(z0)
        ref = (0, 0, 0)
        full = PartialPartition((params.all_sites,))
        for t in (0.0, 0.6):
            p_t = model.transient(p0, t)
            lhs = model.moment_derivative(full, ref, p_t)
            rhs = 0.0
            for g, r in params.nonzero_rho():
                pair = PartialPartition((g, g.complement_in(params.all_sites)))
                rhs += r / (2 * params.N) * (
                    model.moment(pair, ref, t, p_t=p_t)
                    - params.N * model.moment(full, ref, t, p_t=p_t)
                )
            assert abs(lhs - rhs) < 1e-9

    def test_moment_matches_monte_carlo(self):
        params = ModelParams((2, 2), 4, rho={SiteSet.of(1): 1.0})
        z0 = PopulationState({(0, 0): 1, (0, 1): 1, (1, 0): 1, (1, 1): 1}, 4)
        ref = (0, 0)
        part = PartialPartition.of([1, 2])
        model = ExactModel.build(params)
        truth = model.moment(part, ref, 1.0, p0=model.point_mass(z0))
        est = estimate_moments(params, z0, [part], ref, [0.0, 1.0],
                               replicates=20000, seed=3)[-1]
        assert abs(est.mean - truth) <= 3 * est.se
