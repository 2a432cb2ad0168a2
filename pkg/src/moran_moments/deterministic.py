"""Infinite-population recombination dynamics and the law-of-large-numbers link.

Measures on the genotype space are stored densely as arrays shaped by the
per-site allele counts.  The flow is

    d omega / dt = sum_G rho_G/2 (R_G - 1) omega,

with the recombinator R_G replacing a measure by the normalized product of
its G- and complement-marginals.  Mass and every one-site marginal are
invariants of the flow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .core import ModelParams, PopulationState, SiteSet
from .partitions import PartialPartition

DENSE_CAP = 4096


def _check_shape(params: ModelParams):
    if params.genotype_count() > DENSE_CAP:
        raise ValueError(f"dense measures capped at {DENSE_CAP} genotypes")
    return tuple(params.allele_counts)


def state_to_measure(params: ModelParams, z: PopulationState) -> np.ndarray:
    shape = _check_shape(params)
    w = np.zeros(shape)
    for x, c in z.counts.items():
        w[x] = c
    return w


def _axes(params: ModelParams, sites: SiteSet) -> tuple:
    return tuple(s - 1 for s in sites.sites)


def marginal_measure(params: ModelParams, omega: np.ndarray, sites: SiteSet) -> np.ndarray:
    """Marginal onto ``sites`` (total mass preserved)."""
    drop = tuple(i for i in range(params.n) if (i + 1) not in sites)
    return omega.sum(axis=drop) if drop else omega.copy()


def recombinator(params: ModelParams, omega: np.ndarray, keep: SiteSet) -> np.ndarray:
    """Normalized product of the keep- and complement-marginals; zero maps to zero."""
    mass = float(omega.sum())
    if mass == 0.0:
        return np.zeros_like(omega)
    comp = keep.complement_in(params.all_sites)
    shape_keep = [
        k if (i + 1) in keep else 1 for i, k in enumerate(params.allele_counts)
    ]
    shape_comp = [
        k if (i + 1) in comp else 1 for i, k in enumerate(params.allele_counts)
    ]
    mg = marginal_measure(params, omega, keep).reshape(shape_keep)
    mc = marginal_measure(params, omega, comp).reshape(shape_comp)
    return mg * mc / mass


def deterministic_rhs(params: ModelParams, omega: np.ndarray) -> np.ndarray:
    """sum_G rho_G/2 (R_G(omega) - omega); a signed measure of total mass zero."""
    out = np.zeros_like(omega)
    for g, r in params.nonzero_rho():
        out += float(r) / 2 * (recombinator(params, omega, g) - omega)
    return out


def integrate(params: ModelParams, omega0: np.ndarray, t_grid) -> np.ndarray:
    """Flow path on a grid; returns array (n_times,) + allele shape."""
    grid = np.asarray(t_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or np.any(np.diff(grid) <= 0) or grid[0] < 0:
        raise ValueError("time grid must be increasing and nonnegative")
    shape = omega0.shape

    def rhs(_, v):
        return deterministic_rhs(params, v.reshape(shape)).ravel()

    if grid[-1] == 0.0:
        return np.tile(omega0, (grid.size,) + (1,) * omega0.ndim)
    sol = solve_ivp(
        rhs, (0.0, float(grid[-1])), omega0.ravel(), method="DOP853",
        rtol=1e-10, atol=1e-12, t_eval=grid,
    )
    if not sol.success:
        raise RuntimeError(f"deterministic integration failed: {sol.message}")
    return sol.y.T.reshape((grid.size,) + shape)


def _tensor_of_marginals(params: ModelParams, parts: Sequence[np.ndarray],
                         blocks: Sequence[SiteSet]) -> np.ndarray:
    """Product measure on the full space assembled from per-block marginals
    (blocks partition the sites, so the product is a genuine measure on X)."""
    out = np.ones((1,) * params.n)
    for block, marg in zip(blocks, parts):
        shape = [
            k if (i + 1) in block else 1 for i, k in enumerate(params.allele_counts)
        ]
        out = out * marg.reshape(shape)
    return out


def product_derivative_check(
    params: ModelParams, omega: np.ndarray, blocks: PartialPartition
) -> float:
    """Residual between the two expressions for the time derivative of the
    product of block marginals along the flow.

    Chain-rule side: replace one factor at a time by the marginal of the flow
    derivative.  Explicit side: sum over blocks and subsets B of the block of
    rho_B/2 [normalized product of B/rest marginals - block marginal], with
    rho_B the lumped rate and the 1/2 inherited from the flow.  The two sides
    are computed independently, so a wrong factor in the explicit form would
    surface as a nonzero residual.  Returns the max-norm difference on the
    full space.
    """
    if blocks.support != params.all_sites:
        raise ValueError("blocks must partition all sites")
    block_list = list(blocks)
    margs = [marginal_measure(params, omega, b) for b in block_list]
    rhs_measure = deterministic_rhs(params, omega)
    mass = float(omega.sum())

    chain = np.zeros((1,) * params.n)
    for j, block in enumerate(block_list):
        parts = list(margs)
        parts[j] = marginal_measure(params, rhs_measure, block)
        chain = chain + _tensor_of_marginals(params, parts, block_list)

    explicit = np.zeros((1,) * params.n)
    for j, block in enumerate(block_list):
        lumped_rho = {}
        for g, r in params.nonzero_rho():
            h = g & block
            lumped_rho[h] = lumped_rho.get(h, 0) + r
        acc = np.zeros_like(margs[j])
        for h, r in lumped_rho.items():
            if r == 0:
                continue
            if h.mask == 0 or h.mask == block.mask:
                replaced = np.zeros_like(margs[j])  # null split: R leaves the marginal
            else:
                mg = marginal_measure(params, omega, h)
                mc = marginal_measure(params, omega, block - h)
                sh_g = [k if (i + 1) in h else 1
                        for i, k in enumerate(params.allele_counts) if (i + 1) in block]
                sh_c = [k if (i + 1) in (block - h) else 1
                        for i, k in enumerate(params.allele_counts) if (i + 1) in block]
                replaced = mg.reshape(sh_g) * mc.reshape(sh_c) / mass - margs[j]
            acc = acc + float(r) / 2 * replaced
        parts = list(margs)
        parts[j] = acc
        explicit = explicit + _tensor_of_marginals(params, parts, block_list)

    return float(np.max(np.abs(chain - explicit)))


@dataclass
class LlnResult:
    population_sizes: tuple
    median_distances: tuple
    fitted_exponent: float

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(
                "# moran-moments lln csv v1: population_size,median_sup_distance"
                f" (fitted exponent {self.fitted_exponent!r})\n"
            )
            fh.write("population_size,median_sup_distance\n")
            for n, d in zip(self.population_sizes, self.median_distances):
                fh.write(f"{n},{float(d)!r}\n")


def lln_experiment(
    params_template: ModelParams,
    profile: np.ndarray,
    population_sizes: Sequence[int],
    t: float,
    replicates: int,
    seed: int = 0,
    grid_points: int = 41,
) -> LlnResult:
    """Convergence of the rescaled process to the flow.

    ``profile`` is a probability measure over genotypes; each N starts from
    the rounded profile.  Per N, reports the median over replicates of the
    sup over the grid of the l1 distance between Z_t/N and the flow started
    at the same rounded point, plus the fitted log-log slope of the medians.
    """
    if params_template.b != 0 or params_template.has_mutation():
        raise ValueError("the limit statement covers recombination only")
    from .compiled import build_tables, run_many

    profile = np.asarray(profile, dtype=float).ravel()
    profile = profile / profile.sum()
    genotypes = ModelParams(params_template.allele_counts, 1,
                            rho=params_template.rho).genotypes()
    if profile.size != len(genotypes):
        raise ValueError("profile size does not match the genotype space")
    grid = np.linspace(0.0, t, grid_points)
    medians = []
    for ni, n_pop in enumerate(population_sizes):
        counts = np.floor(profile * n_pop).astype(int)
        remainder = profile * n_pop - counts
        short = n_pop - counts.sum()
        for idx in np.argsort(-remainder)[:short]:
            counts[idx] += 1
        params = ModelParams(params_template.allele_counts, int(n_pop),
                             rho=params_template.rho)
        z0 = PopulationState(
            {genotypes[i]: int(c) for i, c in enumerate(counts) if c}, int(n_pop)
        )
        omega0 = state_to_measure(params, z0) / n_pop
        flow = integrate(params, omega0, grid).reshape(grid.size, -1)
        tables = build_tables(params, ())
        _, _, _, states = run_many(
            tables, z0, grid, seed + ni, replicates, record_states=True
        )
        scaled = states.astype(float) / n_pop
        dists = np.abs(scaled - flow[None, :, :]).sum(axis=2).max(axis=1)
        medians.append(float(np.median(dists)))
    slope = float(
        np.polyfit(np.log(np.asarray(population_sizes, float)), np.log(medians), 1)[0]
    )
    return LlnResult(
        population_sizes=tuple(int(n) for n in population_sizes),
        median_distances=tuple(medians),
        fitted_exponent=slope,
    )
