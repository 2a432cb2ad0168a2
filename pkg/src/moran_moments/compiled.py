"""Compiled event loop for the simulator.

The kernel consumes the identical xoshiro256** stream as the pure Python
reference in ``simulate``; trajectories from the two paths are bitwise equal,
which the test suite asserts.  Replicates map to independent streams, so
batch results do not depend on thread scheduling.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import ModelParams, PopulationState, project, recombine
from .rng import stream_state
from .simulate import (
    Observable,
    Trajectory,
    mutation_slots,
    recombination_total_rate,
    resampling_total_rate,
)

try:
    from numba import njit

    NUMBA_OK = True
except ImportError:  # pragma: no cover - numba is a hard dependency
    NUMBA_OK = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap


_GENOTYPE_CAP = 512

U64 = np.uint64


@njit(inline="always")
def _next_u64(s):
    s1 = s[1]
    tmp = s1 * U64(5)
    result = ((tmp << U64(7)) | (tmp >> U64(57))) * U64(9)
    t = s1 << U64(17)
    s[2] ^= s[0]
    s[3] ^= s1
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = (s[3] << U64(45)) | (s[3] >> U64(19))
    return result


@njit(inline="always")
def _uniform(s):
    return np.float64(_next_u64(s) >> U64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True, nogil=True)
def _run_path(
    counts,
    N,
    grid,
    rec_total,
    res_total,
    rho_rates,
    rho_sum,
    rec_tab,
    out_rate,
    mut_ptr,
    mut_rate,
    mut_target,
    mut_site,
    match,
    rec_gate,
    mut_gate,
    s,
    counts_out,
    created_out,
    destroyed_out,
    states_out,
    record_states,
):
    nx = counts.size
    n_t = grid.size
    n_obs = match.shape[0]
    n_g = rho_rates.size

    cur = np.zeros(n_obs, dtype=np.int64)
    created = np.zeros(n_obs, dtype=np.int64)
    destroyed = np.zeros(n_obs, dtype=np.int64)
    for j in range(n_obs):
        acc = 0
        for i in range(nx):
            acc += counts[i] * match[j, i]
        cur[j] = acc

    t = 0.0
    k = 0
    while k < n_t:
        mut_total = 0.0
        for i in range(nx):
            mut_total += counts[i] * out_rate[i]
        total = rec_total + mut_total + res_total
        if total <= 0.0:
            while k < n_t:
                for j in range(n_obs):
                    counts_out[k, j] = cur[j]
                    created_out[k, j] = created[j]
                    destroyed_out[k, j] = destroyed[j]
                if record_states:
                    for i in range(nx):
                        states_out[k, i] = counts[i]
                k += 1
            break

        u = _uniform(s)
        dt = -math.log(1.0 - u) / total
        t_next = t + dt
        c = _uniform(s) * total

        kind = 2
        gsel = 0
        xi = 0
        yi = 0
        slot = 0
        if c < rec_total:
            kind = 0
            r = _uniform(s) * rho_sum
            acc = 0.0
            gsel = n_g - 1
            for g in range(n_g):
                acc += rho_rates[g]
                if r < acc:
                    gsel = g
                    break
            v = _uniform(s) * N
            acc = 0.0
            xi = -1
            for i in range(nx):
                if counts[i] == 0:
                    continue
                acc += counts[i]
                xi = i
                if v < acc:
                    break
            v = _uniform(s) * N
            acc = 0.0
            yi = -1
            for i in range(nx):
                if counts[i] == 0:
                    continue
                acc += counts[i]
                yi = i
                if v < acc:
                    break
        elif c < rec_total + mut_total:
            kind = 1
            w = _uniform(s) * mut_total
            acc = 0.0
            xi = -1
            for i in range(nx):
                term = counts[i] * out_rate[i]
                if term <= 0.0:
                    continue
                acc += term
                xi = i
                if w < acc:
                    break
            w2 = _uniform(s) * out_rate[xi]
            acc = 0.0
            slot = mut_ptr[xi + 1] - 1
            for q in range(mut_ptr[xi], mut_ptr[xi + 1]):
                acc += mut_rate[q]
                if w2 < acc:
                    slot = q
                    break
        else:
            v = _uniform(s) * N
            acc = 0.0
            xi = -1
            for i in range(nx):
                if counts[i] == 0:
                    continue
                acc += counts[i]
                xi = i
                if v < acc:
                    break
            v = _uniform(s) * N
            acc = 0.0
            yi = -1
            for i in range(nx):
                if counts[i] == 0:
                    continue
                acc += counts[i]
                yi = i
                if v < acc:
                    break

        while k < n_t and grid[k] < t_next:
            for j in range(n_obs):
                counts_out[k, j] = cur[j]
                created_out[k, j] = created[j]
                destroyed_out[k, j] = destroyed[j]
            if record_states:
                for i in range(nx):
                    states_out[k, i] = counts[i]
            k += 1
        if k == n_t:
            break

        if kind == 0:
            c1 = rec_tab[gsel, xi, yi]
            c2 = rec_tab[gsel, yi, xi]
            counts[xi] -= 1
            counts[yi] -= 1
            counts[c1] += 1
            counts[c2] += 1
            for j in range(n_obs):
                m1 = match[j, c1]
                m2 = match[j, c2]
                mx = match[j, xi]
                my = match[j, yi]
                cur[j] += m1 + m2 - mx - my
                if rec_gate[j, gsel] != 0:
                    created[j] += m1 + m2
                    destroyed[j] += mx + my
        elif kind == 1:
            x2 = mut_target[slot]
            sitej = mut_site[slot]
            counts[xi] -= 1
            counts[x2] += 1
            for j in range(n_obs):
                if mut_gate[j, sitej] != 0:
                    mc = match[j, x2]
                    mo = match[j, xi]
                    created[j] += mc
                    destroyed[j] += mo
                    cur[j] += mc - mo
        else:
            counts[yi] -= 1
            counts[xi] += 1
            for j in range(n_obs):
                mx = match[j, xi]
                my = match[j, yi]
                cur[j] += mx - my
                created[j] += mx
                destroyed[j] += my
        t = t_next

    return counts


@njit(cache=True, nogil=True)
def _run_paths(
    seeds,
    rep_lo,
    rep_hi,
    counts0,
    N,
    grid,
    rec_total,
    res_total,
    rho_rates,
    rho_sum,
    rec_tab,
    out_rate,
    mut_ptr,
    mut_rate,
    mut_target,
    mut_site,
    match,
    rec_gate,
    mut_gate,
    counts_out,
    created_out,
    destroyed_out,
    states_out,
    record_states,
):
    for r in range(rep_lo, rep_hi):
        s = seeds[r].copy()
        counts = counts0.copy()
        _run_path(
            counts,
            N,
            grid,
            rec_total,
            res_total,
            rho_rates,
            rho_sum,
            rec_tab,
            out_rate,
            mut_ptr,
            mut_rate,
            mut_target,
            mut_site,
            match,
            rec_gate,
            mut_gate,
            s,
            counts_out[r],
            created_out[r],
            destroyed_out[r],
            states_out[r],
            record_states,
        )


@dataclass
class KernelTables:
    """Precomputed genotype-indexed arrays for one (params, observables) pair."""

    params: ModelParams
    observables: tuple
    genotypes: tuple
    index: dict
    counts_template: np.ndarray
    rho_rates: np.ndarray
    rho_sum: float
    rec_total: float
    res_total: float
    rec_tab: np.ndarray
    out_rate: np.ndarray
    mut_ptr: np.ndarray
    mut_rate: np.ndarray
    mut_target: np.ndarray
    mut_site: np.ndarray
    match: np.ndarray
    rec_gate: np.ndarray
    mut_gate: np.ndarray

    def encode_state(self, z: PopulationState) -> np.ndarray:
        counts = np.zeros(len(self.genotypes), dtype=np.int64)
        for g, c in z.counts.items():
            counts[self.index[g]] = c
        return counts

    def decode_state(self, counts: np.ndarray, N: int) -> PopulationState:
        return PopulationState(
            {self.genotypes[i]: int(c) for i, c in enumerate(counts) if c}, N
        )


def kernel_available(params: ModelParams) -> bool:
    return NUMBA_OK and params.genotype_count() <= _GENOTYPE_CAP


def build_tables(params: ModelParams, observables: Sequence[Observable]) -> KernelTables:
    genotypes = params.genotypes()
    nx = len(genotypes)
    index = {g: i for i, g in enumerate(genotypes)}
    entries = params.nonzero_rho()
    n_g = len(entries)
    universe = params.all_sites

    rho_rates = np.array([float(r) for _, r in entries], dtype=np.float64)
    rho_sum = float(sum(float(v) for _, v in entries))
    rec_tab = np.zeros((max(n_g, 1), nx, nx), dtype=np.int64)
    for gi, (g, _) in enumerate(entries):
        for xi, x in enumerate(genotypes):
            for yi, y in enumerate(genotypes):
                rec_tab[gi, xi, yi] = index[recombine(x, y, g)]

    out_rate = np.zeros(nx, dtype=np.float64)
    ptr = [0]
    m_rate, m_target, m_site = [], [], []
    for xi, x in enumerate(genotypes):
        slots = mutation_slots(params, x)
        out_rate[xi] = float(sum(r for _, _, r in slots))
        for site, target, r in slots:
            x2 = list(x)
            x2[site - 1] = target
            m_rate.append(float(r))
            m_target.append(index[tuple(x2)])
            m_site.append(site)
        ptr.append(len(m_rate))

    obs = tuple(observables)
    n_obs = len(obs)
    match = np.zeros((n_obs, nx), dtype=np.int64)
    rec_gate = np.zeros((n_obs, max(n_g, 1)), dtype=np.uint8)
    mut_gate = np.zeros((n_obs, params.n + 1), dtype=np.uint8)
    for j, o in enumerate(obs):
        ref = project(o.reference, o.sites)
        for xi, x in enumerate(genotypes):
            match[j, xi] = 1 if project(x, o.sites) == ref else 0
        for gi, (g, _) in enumerate(entries):
            cut = g & o.sites
            rec_gate[j, gi] = 1 if cut.mask != 0 and cut.mask != o.sites.mask else 0
        for site in range(1, params.n + 1):
            mut_gate[j, site] = 1 if site in o.sites else 0

    return KernelTables(
        params=params,
        observables=obs,
        genotypes=genotypes,
        index=index,
        counts_template=np.zeros(nx, dtype=np.int64),
        rho_rates=rho_rates,
        rho_sum=rho_sum,
        rec_total=float(recombination_total_rate(params)),
        res_total=float(resampling_total_rate(params)),
        rec_tab=rec_tab,
        out_rate=out_rate,
        mut_ptr=np.array(ptr, dtype=np.int64),
        mut_rate=np.array(m_rate, dtype=np.float64),
        mut_target=np.array(m_target, dtype=np.int64),
        mut_site=np.array(m_site, dtype=np.int64),
        match=match,
        rec_gate=rec_gate,
        mut_gate=mut_gate,
    )


def worker_count(requested: Optional[int] = None) -> int:
    cap = os.environ.get("MORAN_MOMENTS_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    if requested is not None:
        limit = min(limit, requested)
    return max(1, limit)


def run_many(
    tables: KernelTables,
    z0: PopulationState,
    grid: np.ndarray,
    seed: int,
    replicates: int,
    record_states: bool = False,
    threads: Optional[int] = None,
):
    """Run replicate paths 0..replicates-1; returns (counts, created, destroyed,
    states, finals) stacked along the replicate axis.  Results are identical
    for any thread count because replicates own independent streams and land
    in preallocated slots."""
    nx = len(tables.genotypes)
    n_t = grid.size
    n_obs = len(tables.observables)
    seeds = np.zeros((replicates, 4), dtype=np.uint64)
    for r in range(replicates):
        seeds[r] = stream_state(seed, r)
    counts0 = tables.encode_state(z0)

    counts_out = np.zeros((replicates, n_t, n_obs), dtype=np.int64)
    created_out = np.zeros((replicates, n_t, n_obs), dtype=np.int64)
    destroyed_out = np.zeros((replicates, n_t, n_obs), dtype=np.int64)
    states_out = np.zeros((replicates, n_t, nx if record_states else 0), dtype=np.int64)

    args = (
        counts0,
        tables.params.N,
        grid,
        tables.rec_total,
        tables.res_total,
        tables.rho_rates,
        tables.rho_sum,
        tables.rec_tab,
        tables.out_rate,
        tables.mut_ptr,
        tables.mut_rate,
        tables.mut_target,
        tables.mut_site,
        tables.match,
        tables.rec_gate,
        tables.mut_gate,
        counts_out,
        created_out,
        destroyed_out,
        states_out,
        record_states,
    )

    n_workers = worker_count(threads)
    if n_workers <= 1 or replicates < 2 * n_workers:
        _run_paths(seeds, 0, replicates, *args)
    else:
        from concurrent.futures import ThreadPoolExecutor

        bounds = np.linspace(0, replicates, n_workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            futures = [
                pool.submit(_run_paths, seeds, int(lo), int(hi), *args)
                for lo, hi in zip(bounds[:-1], bounds[1:])
                if hi > lo
            ]
            for f in futures:
                f.result()
    return counts_out, created_out, destroyed_out, states_out


def run_path_kernel(
    params: ModelParams,
    z0: PopulationState,
    grid: np.ndarray,
    observables: tuple,
    seed: int,
    replicate: int,
    record_states: bool,
) -> Trajectory:
    tables = build_tables(params, observables)
    nx = len(tables.genotypes)
    n_t = grid.size
    n_obs = len(observables)
    counts_out = np.zeros((n_t, n_obs), dtype=np.int64)
    created_out = np.zeros((n_t, n_obs), dtype=np.int64)
    destroyed_out = np.zeros((n_t, n_obs), dtype=np.int64)
    states_out = np.zeros((n_t, nx if record_states else 0), dtype=np.int64)
    s = np.array(stream_state(seed, replicate), dtype=np.uint64)
    final = _run_path(
        tables.encode_state(z0),
        params.N,
        grid,
        tables.rec_total,
        tables.res_total,
        tables.rho_rates,
        tables.rho_sum,
        tables.rec_tab,
        tables.out_rate,
        tables.mut_ptr,
        tables.mut_rate,
        tables.mut_target,
        tables.mut_site,
        tables.match,
        tables.rec_gate,
        tables.mut_gate,
        s,
        counts_out,
        created_out,
        destroyed_out,
        states_out,
        record_states,
    )
    return Trajectory(
        times=grid,
        observables=tuple(observables),
        counts=counts_out,
        created=created_out,
        destroyed=destroyed_out,
        final_state=tables.decode_state(final, params.N),
        states=states_out if record_states else None,
    )
