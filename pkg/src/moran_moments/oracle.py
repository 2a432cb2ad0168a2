"""Exact finite-state engine for tiny instances.

Enumerates every population state (compositions of N over the genotype
space), assembles the full generator from the base events, and computes
transient distributions by uniformization.  This is the ground truth against
which the simulator's conventions and the moment systems are pinned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.stats import poisson

from .core import (
    Genotype,
    ModelParams,
    PopulationState,
    project,
    recombine,
)
from .partitions import PartialPartition
from .simulate import mutation_slots

STATE_CAP = 200_000


def state_count(params: ModelParams) -> int:
    nx = params.genotype_count()
    return math.comb(params.N + nx - 1, params.N)


def enumerate_states(params: ModelParams) -> np.ndarray:
    """All count vectors over the genotype space summing to N, lexicographic."""
    if state_count(params) > STATE_CAP:
        raise ValueError(
            f"state space of size {state_count(params)} exceeds the cap {STATE_CAP}"
        )
    nx = params.genotype_count()
    states = []

    def rec(prefix, remaining, slots):
        if slots == 1:
            states.append(prefix + (remaining,))
            return
        for c in range(remaining + 1):
            rec(prefix + (c,), remaining - c, slots - 1)

    rec((), params.N, nx)
    return np.array(states, dtype=np.int64)


def _base_event_updates(params: ModelParams, counts, genotypes, index):
    """Yield (delta_dict, rate) for every base event with nonzero rate from a
    state given as a count vector; empty events are skipped."""
    N = params.N
    present = [i for i in range(len(genotypes)) if counts[i] > 0]
    universe = params.all_sites
    for g, r in params.nonzero_rho():
        for xi in present:
            x = genotypes[xi]
            for yi in present:
                y = genotypes[yi]
                c1 = index[recombine(x, y, g)]
                c2 = index[recombine(x, y, g.complement_in(universe))]
                delta: dict = {}
                for i, d in ((xi, -1), (yi, -1), (c1, 1), (c2, 1)):
                    delta[i] = delta.get(i, 0) + d
                delta = {i: d for i, d in delta.items() if d != 0}
                if delta:
                    yield delta, r * counts[xi] * counts[yi] / (4 * N)
    if params.has_mutation():
        for xi in present:
            x = genotypes[xi]
            for site, target, r in mutation_slots(params, x):
                x2 = list(x)
                x2[site - 1] = target
                yi = index[tuple(x2)]
                yield {xi: -1, yi: 1}, r * counts[xi]
    if params.b != 0:
        for xi in present:
            for yi in present:
                if xi == yi:
                    continue
                yield {yi: -1, xi: 1}, params.b * counts[xi] * counts[yi] / (2 * N)


@dataclass
class ExactModel:
    """State enumeration plus the generator matrix Q (Q[i, j] = rate i -> j)."""

    params: ModelParams
    states: np.ndarray
    state_index: dict
    generator: sp.csr_matrix

    @classmethod
    def build(cls, params: ModelParams) -> "ExactModel":
        states = enumerate_states(params)
        state_index = {tuple(s): i for i, s in enumerate(states)}
        genotypes = params.genotypes()
        index = {g: i for i, g in enumerate(genotypes)}
        rows, cols, vals = [], [], []
        for si, counts in enumerate(states):
            agg: dict = {}
            for delta, rate in _base_event_updates(params, counts, genotypes, index):
                target = list(counts)
                for i, d in delta.items():
                    target[i] += d
                ti = state_index[tuple(target)]
                agg[ti] = agg.get(ti, 0.0) + float(rate)
            out = 0.0
            for ti, rate in sorted(agg.items()):
                rows.append(si)
                cols.append(ti)
                vals.append(rate)
                out += rate
            rows.append(si)
            cols.append(si)
            vals.append(-out)
        n = len(states)
        q = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        return cls(params=params, states=states, state_index=state_index, generator=q)

    def exact_generator(self):
        """Generator assembled in exact rational arithmetic (dict of dicts),
        for the smallest instances where rate equivalences are tested exactly."""
        genotypes = self.params.genotypes()
        index = {g: i for i, g in enumerate(genotypes)}
        out = []
        for counts in self.states:
            agg: dict = {}
            for delta, rate in _base_event_updates(self.params, counts, genotypes, index):
                target = list(counts)
                for i, d in delta.items():
                    target[i] += d
                ti = self.state_index[tuple(target)]
                agg[ti] = agg.get(ti, 0) + rate
            out.append(agg)
        return out

    def point_mass(self, z0: PopulationState) -> np.ndarray:
        genotypes = self.params.genotypes()
        counts = [0] * len(genotypes)
        index = {g: i for i, g in enumerate(genotypes)}
        for g, c in z0.counts.items():
            counts[index[g]] = c
        p0 = np.zeros(len(self.states))
        p0[self.state_index[tuple(counts)]] = 1.0
        return p0

    def transient(self, p0: np.ndarray, t: float) -> np.ndarray:
        return transient_distribution(self.generator, p0, t)

    def marginal_count_vector(self, sites, reference: Genotype) -> np.ndarray:
        """[A] evaluated at every state (as a vector over the state space)."""
        genotypes = self.params.genotypes()
        ref = project(reference, sites)
        mask = np.array(
            [1 if project(x, sites) == ref else 0 for x in genotypes], dtype=np.int64
        )
        return self.states @ mask

    def moment_vector(self, partition: PartialPartition, reference: Genotype) -> np.ndarray:
        f = np.ones(len(self.states))
        for block in partition:
            f = f * self.marginal_count_vector(block, reference)
        return f

    def moment(
        self,
        partition: PartialPartition,
        reference: Genotype,
        t: float,
        p0: Optional[np.ndarray] = None,
        p_t: Optional[np.ndarray] = None,
    ) -> float:
        """E[prod_A [A]_t] for a deterministic or distributed initial state."""
        if p_t is None:
            p_t = self.transient(p0, t)
        return float(p_t @ self.moment_vector(partition, reference))

    def moment_derivative(
        self,
        partition: PartialPartition,
        reference: Genotype,
        p_t: np.ndarray,
    ) -> float:
        """d/dt E[prod_A [A]_t] evaluated under the distribution p_t."""
        f = self.moment_vector(partition, reference)
        return float(p_t @ (self.generator @ f))


def build_generator(params: ModelParams) -> sp.csr_matrix:
    return ExactModel.build(params).generator


def transient_distribution(q: sp.csr_matrix, p0: np.ndarray, t: float) -> np.ndarray:
    """exp(Q^T t) p0 by uniformization with the Poisson tail below 1e-12."""
    if t < 0:
        raise ValueError("time must be nonnegative")
    lam = float(-q.diagonal().min())
    if t == 0.0 or lam == 0.0:
        return p0.copy()
    rate = lam * t
    k_max = int(poisson.isf(1e-13, rate)) + 2
    weights = poisson.pmf(np.arange(k_max + 1), rate)
    pt_op = (q / lam).T.tocsr()
    v = p0.copy()
    out = weights[0] * v
    for k in range(1, k_max + 1):
        v = v + pt_op @ v
        out = out + weights[k] * v
    s = out.sum()
    if abs(s - 1.0) > 1e-10:
        raise RuntimeError(f"uniformization lost probability mass: sum={s!r}")
    return out
