"""Closed linear moment systems for the recombination(+mutation) model.

For a fixed reference genotype x*, the expectations m_A = E[prod_{A in A}[A]_t]
over partial partitions of a tracked site set satisfy a finite linear ODE
system.  The recombination rows are assembled from the generator acting on the
product functionals:

    d/dt E[prod_l [A_l]]  =  sum over assignments of blocks to roles
        (kept I, joined J, broken K), I != all, of (-1)^{|K|} times
        sum over events (full recombination set Gf, ordered parents):
        the expected product of the per-block creation counters (J) and
        destruction counters (K), with the kept blocks at current value.

Working out the parent sums, each event contributes, for every subset Jt of J
and Kt of K, the moment indexed by the two "sides"

    side1 = union_{j in Jt}(W & A_j)  |  union_{j notin Jt}(A_j - W)  |  A_Kt
    side2 = (A_J - side1_J)                                           |  A_{K-Kt}

with W = Gf & A_J (which must split every J-block nontrivially) and
Gf & A_K splitting every K-block nontrivially; the coefficient is
(-1)^{|K|} rho_{Gf} / (4N), with a factor N for every empty side dropped.
The sum over the 2^{|J|} side assignments is easy to drop by accident
(keeping a single assignment loses a factor 2 at |J| = 1 and mixes block
sides at |J| >= 2); the convention is pinned against the exact engine by a
calibration instance at build time.

Mutation adds linear terms.  The gain from alleles mutating into the
reference allele at site j closes within the index set only when all
incoming rates to the reference allele agree (automatic for two-allele
sites); the builder rejects other structures.  The per-block terms are

    + g_j   toward  A with A_l -> A_l - {j}     (drop empty blocks, factor N)
    - g_j - sum_{y != x*_j} mu^j(x*_j -> y)  on the diagonal,

with g_j the common incoming rate.  (Dropping the -g_j diagonal
compensation is the natural slip; the exact engine confirms the form used
here.)

Resampling destroys this closure property for the tracked index sets; the
builder refuses b != 0.  The two-site mean/linkage-disequilibrium system,
which stays closed with resampling, ships as a closed form separately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp

from .core import EMPTY, Genotype, ModelParams, PopulationState, SiteSet, marginal_count
from .partitions import (
    EMPTY_PARTITION,
    PartialPartition,
    block_assignments,
    disrupts,
    marginal_rates,
    partial_partitions,
)

HIERARCHY_SITE_CAP = 8


class ClosureError(ValueError):
    """The requested moments do not form a closed finite system."""


@dataclass
class MomentSystem:
    """Linear system d/dt m = Q m over partial-partition moments.

    ``rows`` keeps the assembled coefficients exactly as built (row partition
    -> {column partition -> coefficient}); ``matrix`` is the float version
    used by the integrator.  ``meta`` records the normalization convention
    and the calibration evidence.
    """

    params: ModelParams
    reference: Genotype
    tracked: SiteSet
    index: tuple
    position: dict
    rows: dict
    matrix: sp.csr_matrix
    meta: dict = field(default_factory=dict)

    def initial_vector(self, z0: PopulationState) -> np.ndarray:
        v = np.empty(len(self.index))
        for i, part in enumerate(self.index):
            prod = 1.0
            for block in part:
                prod *= marginal_count(z0, block, self.reference)
            v[i] = prod
        return v

    def row_coefficients(self, partition: PartialPartition) -> dict:
        return dict(self.rows[partition])

    def export_csv(self, path) -> None:
        """Sparse coefficient dump: row_index, col_index, coefficient plus the
        stable textual block encodings (csv-quoted, labels contain commas)."""
        import csv

        with open(path, "w", newline="") as fh:
            fh.write(
                "# moran-moments moment-system csv v1: "
                "row_index,col_index,coefficient,row_partition,col_partition\n"
            )
            writer = csv.writer(fh)
            writer.writerow(
                ["row_index", "col_index", "coefficient", "row_partition",
                 "col_partition"]
            )
            for part in self.index:
                i = self.position[part]
                for col, coeff in sorted(
                    self.rows[part].items(), key=lambda kv: self.position[kv[0]]
                ):
                    writer.writerow(
                        [i, self.position[col], repr(float(coeff)),
                         part.label(), col.label()]
                    )


@dataclass
class MomentSolution:
    times: np.ndarray
    system: MomentSystem
    values: np.ndarray  # shape (n_times, n_moments)

    def series(self, partition: PartialPartition) -> np.ndarray:
        return self.values[:, self.system.position[partition]]

    def at(self, partition: PartialPartition, time_index: int) -> float:
        return float(self.values[time_index, self.system.position[partition]])


def _mutation_terms(params: ModelParams, reference: Genotype, partition, add):
    """Accumulate the per-block mutation gain/loss terms for one row."""
    for li, block in enumerate(partition.blocks):
        for site in block.sites:
            a_ref = reference[site - 1]
            k = params.allele_counts[site - 1]
            loss = sum(params.mu_rate(site, a_ref, y) for y in range(k) if y != a_ref)
            if loss:
                add(partition, -loss)
            incoming = [params.mu_rate(site, y, a_ref) for y in range(k) if y != a_ref]
            if not any(r != 0 for r in incoming):
                continue
            gain = incoming[0]
            if any(r != gain for r in incoming):
                raise ClosureError(
                    f"site {site}: incoming mutation rates to the reference allele "
                    f"differ across source alleles; the tracked moments close only "
                    f"for a common incoming rate (automatic with two alleles)"
                )
            add(partition, -gain)
            shrunk = block - SiteSet.of(site)
            if shrunk:
                target = PartialPartition(
                    tuple(b for j, b in enumerate(partition.blocks) if j != li)
                    + (shrunk,)
                )
                add(target, gain)
            else:
                target = PartialPartition(
                    tuple(b for j, b in enumerate(partition.blocks) if j != li)
                )
                add(target, gain * params.N)


def _recombination_terms(params: ModelParams, partition, add):
    N = params.N
    blocks = partition.blocks
    m = len(blocks)
    entries = params.nonzero_rho()
    for roles in block_assignments(m):
        joined = [blocks[j] for j in roles.joined]
        broken = [blocks[k] for k in roles.broken]
        kept = tuple(blocks[i] for i in roles.kept)
        a_joined = EMPTY
        for b in joined:
            a_joined = a_joined | b
        sign = -1 if len(broken) % 2 else 1
        for gf, rate in entries:
            w = gf & a_joined
            if not disrupts(w, joined):
                continue
            if not disrupts(gf, broken):
                continue
            base = sign * rate / (4 * N)
            for jt_code in range(1 << len(joined)):
                side1_j = EMPTY
                for jbit, b in enumerate(joined):
                    if jt_code >> jbit & 1:
                        side1_j = side1_j | (w & b)
                    else:
                        side1_j = side1_j | (b - w)
                side2_j = a_joined - side1_j
                for kt_code in range(1 << len(broken)):
                    side1 = side1_j
                    side2 = side2_j
                    for kbit, b in enumerate(broken):
                        if kt_code >> kbit & 1:
                            side1 = side1 | b
                        else:
                            side2 = side2 | b
                    new_blocks = kept + tuple(s for s in (side1, side2) if s)
                    coeff = base
                    for s in (side1, side2):
                        if not s:
                            coeff = coeff * N
                    add(PartialPartition(new_blocks), coeff)


def build_system(
    params: ModelParams,
    reference: Genotype,
    tracked: Optional[SiteSet] = None,
    calibrate: bool = True,
) -> MomentSystem:
    """Assemble the closed moment system over partial partitions of ``tracked``.

    Requires b = 0: with resampling the tracked moments no longer close.
    The first build in a process runs the oracle calibration instance and the
    m=1 mean-dynamics row is checked structurally on every build.
    """
    if params.b != 0:
        raise ClosureError(
            "resampling (b != 0) destroys closure of the tracked moments; "
            "only the two-site mean/LD system is available with resampling"
        )
    tracked = params.all_sites if tracked is None else tracked
    if not tracked.issubset(params.all_sites):
        raise ValueError(f"tracked sites {tracked} outside the model's {params.all_sites}")
    if len(tracked) > HIERARCHY_SITE_CAP:
        raise ValueError(f"hierarchy support capped at {HIERARCHY_SITE_CAP} sites")

    index = tuple(partial_partitions(tracked))
    position = {p: i for i, p in enumerate(index)}
    rows: dict = {}
    for part in index:
        row: dict = {}

        def add(target, coeff, row=row):
            row[target] = row.get(target, 0) + coeff

        _recombination_terms(params, part, add)
        if params.has_mutation():
            _mutation_terms(params, reference, part, add)
        rows[part] = {t: c for t, c in row.items() if c != 0}

    mat = sp.dok_matrix((len(index), len(index)))
    for part, row in rows.items():
        i = position[part]
        for target, coeff in row.items():
            mat[i, position[target]] += float(coeff)
    system = MomentSystem(
        params=params,
        reference=reference,
        tracked=tracked,
        index=index,
        position=position,
        rows=rows,
        matrix=mat.tocsr(),
        meta={
            "normalization": "two-sided split assignment (2^|J| terms per joined set)",
        },
    )
    _check_mean_row(system)
    if calibrate:
        system.meta["calibration"] = calibration_report()
    return system


def _check_mean_row(system: MomentSystem) -> None:
    """The single-block row must match the mean dynamics
    d/dt E[[T]] = sum_H rho^(T)_H/(2N) (E[[H][T-H]] - N E[[T]]) coefficient
    for coefficient; asserted structurally on every build."""
    t_set = system.tracked
    if len(t_set) == 0:
        return
    part = PartialPartition((t_set,))
    lumped = marginal_rates(system.params.rho, t_set)
    n = system.params.N
    expect: dict = {}
    for h, r in lumped.items():
        if r == 0 or h.mask == 0 or h.mask == t_set.mask:
            continue
        pair = PartialPartition((h, h.complement_in(t_set)))
        expect[pair] = expect.get(pair, 0) + r / (2 * n)
        expect[part] = expect.get(part, 0) - r / 2
    # compare against the recombination part of the row only
    probe: dict = {}

    def add(target, coeff):
        probe[target] = probe.get(target, 0) + coeff

    _recombination_terms(system.params, part, add)
    got = {t: c for t, c in probe.items() if c != 0}
    expect = {k: v for k, v in expect.items() if v != 0}
    for key in set(expect) | set(got):
        a = float(expect.get(key, 0))
        b = float(got.get(key, 0))
        if not math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-15):
            raise AssertionError(
                f"mean-dynamics row mismatch at {key.label()}: built {b}, expected {a}"
            )


_CALIBRATION: dict = {}


def calibration_report() -> dict:
    """Verify the row convention once per process: on a small generic-rate
    instance, every row applied to the exact moments must equal the exact
    moment derivative.  Returns the cached evidence record."""
    if _CALIBRATION:
        return dict(_CALIBRATION)
    from fractions import Fraction

    from .oracle import ExactModel

    params = ModelParams(
        allele_counts=(2, 2, 2),
        N=3,
        rho={
            SiteSet.of(1): Fraction(3, 7),
            SiteSet.of(2): Fraction(2, 5),
            SiteSet.of(3): Fraction(5, 11),
        },
    )
    reference = (0, 0, 0)
    z0 = PopulationState({(0, 0, 0): 1, (1, 1, 0): 1, (0, 1, 1): 1}, 3)
    system = build_system(params, reference, calibrate=False)
    model = ExactModel.build(params)
    p0 = model.point_mass(z0)
    worst = 0.0
    for t in (0.0, 0.7):
        p_t = model.transient(p0, t)
        moments = np.array(
            [model.moment(part, reference, t, p_t=p_t) for part in system.index]
        )
        derivs = system.matrix @ moments
        for i, part in enumerate(system.index):
            exact = model.moment_derivative(part, reference, p_t)
            err = abs(derivs[i] - exact) / max(1.0, abs(exact), abs(derivs[i]))
            worst = max(worst, err)
    if worst > 1e-8:
        raise AssertionError(
            f"moment-system calibration failed: worst relative row error {worst:g}"
        )
    _CALIBRATION.update(
        {
            "instance": "n=3, N=3, rates 3/7, 2/5, 5/11, deterministic start",
            "times": (0.0, 0.7),
            "worst_rel_err": worst,
        }
    )
    return dict(_CALIBRATION)


def solve(system: MomentSystem, z0: PopulationState, t_grid) -> MomentSolution:
    """Integrate the linear system from the deterministic initial moments."""
    grid = np.asarray(t_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or np.any(np.diff(grid) <= 0) or grid[0] < 0:
        raise ValueError("time grid must be increasing and nonnegative")
    v0 = system.initial_vector(z0)
    if grid[-1] == 0.0:
        return MomentSolution(times=grid, system=system, values=v0[None, :].copy())
    mat = system.matrix

    sol = solve_ivp(
        lambda _, v: mat @ v,
        (0.0, float(grid[-1])),
        v0,
        method="DOP853",
        rtol=1e-10,
        atol=1e-10,
        t_eval=grid,
        dense_output=False,
    )
    if not sol.success:
        raise RuntimeError(f"moment integration failed: {sol.message}")
    values = sol.y.T.copy()
    values[:, system.position[EMPTY_PARTITION]] = 1.0
    return MomentSolution(times=grid, system=system, values=values)


def poisson_parameter(params: ModelParams, z0: PopulationState, pair: SiteSet,
                      reference: Genotype):
    """Constant intensity a of the pair-association creation counter <g1,g2>:
    a = sum over H meeting the pair in one site of rho_H/(2N) [g1]_0 [g2]_0."""
    if len(pair) != 2:
        raise ValueError("the counter law applies to two-site observables")
    if params.b != 0 or params.has_mutation():
        raise ValueError("requires b = 0 and no mutation (one-site margins constant)")
    g1, g2 = (SiteSet.of(s) for s in pair.sites)
    c1 = marginal_count(z0, g1, reference)
    c2 = marginal_count(z0, g2, reference)
    total = 0
    for h, r in params.nonzero_rho():
        if len(h & pair) == 1:
            total = total + r * c1 * c2 / (2 * params.N)
    return total


def two_site_mean_ld(params: ModelParams, z0: PopulationState, reference: Genotype):
    """Closed-form mean system for two sites with resampling allowed.

    Solves d/dt E[[1,2]] = rho1/N (E[[1][2]] - N E[[1,2]]) and
    d/dt E[[1][2]] = b/N (N E[[1,2]] - E[[1][2]]); the linkage disequilibrium
    D_t = E[N [1,2] - [1][2]] then decays exponentially at rate rho1 + b/N.
    Returns (mean_pair, mean_product, ld) as functions of t.

    Note the decay constant: differentiating N E[[1,2]] scales the first
    equation by N, so recombination enters at full rate rho1, drift at b/N.
    """
    if params.n != 2:
        raise ValueError("two-site system requires exactly two sites")
    if params.has_mutation():
        raise ValueError("two-site mean/LD system excludes mutation")
    rho1 = float(params.rho.get(SiteSet.of(1), 0))
    b = float(params.b)
    n = params.N
    pair0 = marginal_count(z0, SiteSet.of(1, 2), reference)
    prod0 = marginal_count(z0, SiteSet.of(1), reference) * marginal_count(
        z0, SiteSet.of(2), reference
    )
    ld0 = n * pair0 - prod0
    lam = rho1 + b / n

    def ld(t):
        return ld0 * np.exp(-lam * np.asarray(t, dtype=float))

    def _shape(t):
        # int_0^t exp(-lam s) ds, stable for lam -> 0
        t = np.asarray(t, dtype=float)
        if lam == 0.0:
            return t
        return -np.expm1(-lam * t) / lam

    def mean_pair(t):
        return pair0 - rho1 * ld0 * _shape(t) / n

    def mean_product(t):
        return prod0 + b * ld0 * _shape(t) / n

    return mean_pair, mean_product, ld


def ld_decay_rate(params: ModelParams) -> float:
    if params.n != 2:
        raise ValueError("two-site system requires exactly two sites")
    return float(params.rho.get(SiteSet.of(1), 0)) + float(params.b) / params.N


def two_site_moments(params: ModelParams, z0: PopulationState, reference: Genotype,
                     order: int):
    """Closed linear system for E[[1,2]^k], k = 0..order, at two sites without
    mutation or resampling (the one-site counts enter as path constants).

    The pair count jumps by +/-1 at the rates
        up(v)   = rho1/N ([1]-v)([2]-v)
        down(v) = rho1/N v (N-[1]-[2]+v)
    and the k-th row is the binomial expansion of E[(v+-1)^k - v^k] under
    those rates.  Returns (matrix, v0, solver) where solver(t_grid) yields
    the moments on a grid.
    """
    if params.n != 2:
        raise ValueError("two-site moments require exactly two sites")
    if params.b != 0 or params.has_mutation():
        raise ValueError("requires b = 0 and no mutation")
    if order < 0:
        raise ValueError("moment order must be nonnegative")
    rho1 = float(params.rho.get(SiteSet.of(1), 0))
    n = params.N
    c1 = marginal_count(z0, SiteSet.of(1), reference)
    c2 = marginal_count(z0, SiteSet.of(2), reference)
    # rates as polynomials in v: up = r0 + r1 v + r2 v^2, down likewise
    up = np.array([c1 * c2, -(c1 + c2), 1.0]) * (rho1 / n)
    down = np.array([0.0, n - c1 - c2, 1.0]) * (rho1 / n)

    dim = order + 1
    mat = np.zeros((dim, dim))
    for m in range(dim):
        row_poly = np.zeros(dim)
        for k in range(m):
            coeff = math.comb(m, k)
            plus = np.zeros(dim)
            minus = np.zeros(dim)
            for p, r in enumerate(up):
                if k + p < dim and r != 0.0:
                    plus[k + p] += r
            for p, r in enumerate(down):
                if k + p < dim and r != 0.0:
                    minus[k + p] += r * (1 if (m - k) % 2 == 0 else -1)
            row_poly += coeff * (plus + minus)
        mat[m, :] = row_poly

    v0 = np.array([float(marginal_count(z0, SiteSet.of(1, 2), reference)) ** k
                   for k in range(dim)])

    def solver(t_grid) -> np.ndarray:
        grid = np.asarray(t_grid, dtype=float)
        if grid[-1] == 0.0:
            return np.tile(v0, (grid.size, 1))
        sol = solve_ivp(
            lambda _, v: mat @ v,
            (0.0, float(grid[-1])),
            v0,
            method="DOP853",
            rtol=1e-10,
            atol=1e-12,
            t_eval=grid,
        )
        if not sol.success:
            raise RuntimeError(f"moment integration failed: {sol.message}")
        return sol.y.T.copy()

    return mat, v0, solver


def _is_end_interval(mask: int, n: int) -> bool:
    """True for contiguous site runs touching either end (prefixes/suffixes)."""
    if mask == 0:
        return False
    low = mask & -mask
    width = mask.bit_length() - (low.bit_length() - 1)
    contiguous = mask.bit_count() == width
    touches_end = (mask & 1) or (mask >> (n - 1)) & 1
    return bool(contiguous and touches_end)


def single_crossover_system(
    params: ModelParams,
    z0: PopulationState,
    reference: Genotype,
    t_grid,
):
    """Mean dynamics under crossover-at-one-point rates via the nonlinear
    interval recursion d/dt E[[I]] = sum_H rho^(I)_H/(2N)(E[[H]]E[[I-H]] - N E[[I]]).

    The product factorizes because the split-off interval processes are
    independent.  Rates must vanish outside end-interval splits; mutation and
    resampling are excluded.  Returns (intervals, values) with values indexed
    (time, interval).
    """
    if params.b != 0 or params.has_mutation():
        raise ValueError("single-crossover system requires b = 0 and no mutation")
    n = params.n
    for g, r in params.nonzero_rho():
        if not _is_end_interval(g.mask, n):
            raise ValueError(
                f"rate on {g} is not a single-crossover set (one contiguous "
                f"exchange point); use the general moment system instead"
            )
    intervals = [
        SiteSet(((1 << (j + 1)) - 1) & ~((1 << i) - 1))
        for i in range(n)
        for j in range(i, n)
    ]
    pos = {s: i for i, s in enumerate(intervals)}
    splits = []
    for s in intervals:
        lumped = marginal_rates(params.rho, s)
        terms = []
        for h, r in lumped.items():
            if r == 0 or h.mask == 0 or h.mask == s.mask:
                continue
            terms.append((float(r), pos[h], pos[h.complement_in(s)]))
        splits.append(terms)

    nvar = len(intervals)
    n_pop = params.N

    def rhs(_, v):
        out = np.zeros(nvar)
        for i, terms in enumerate(splits):
            acc = 0.0
            for r, ih, ic in terms:
                acc += r * (v[ih] * v[ic] - n_pop * v[i]) / (2 * n_pop)
            out[i] = acc
        return out

    v0 = np.array(
        [float(marginal_count(z0, s, reference)) for s in intervals]
    )
    grid = np.asarray(t_grid, dtype=float)
    if grid[-1] == 0.0:
        return intervals, np.tile(v0, (grid.size, 1))
    sol = solve_ivp(rhs, (0.0, float(grid[-1])), v0, method="DOP853",
                    rtol=1e-10, atol=1e-12, t_eval=grid)
    if not sol.success:
        raise RuntimeError(f"interval integration failed: {sol.message}")
    return intervals, sol.y.T.copy()
