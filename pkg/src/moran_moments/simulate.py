"""Exact stochastic simulation of the population process.

Events are sampled from the base-event decomposition: recombination events
are indexed by (G, ordered pair (x, y)) with G over all site subsets, each at
rate rho_G/(4N) z(x) z(y); mutation events by (individual type, site, target
allele); resampling events by ordered (parent type, replaced type) at rate
b/(2N) z(x) z(y).  Empty events are kept because the creation/destruction
counters depend on them.

For each tracked observable (a site set A and a reference genotype), a
trajectory carries the matching count [A]_t together with the cumulative
creation and destruction counters <A>_t and (A)_t.  A recombination event
feeds the counters only when its set splits A nontrivially; counting is with
multiplicity (an event creating two matching individuals adds 2), the unique
reading consistent with the aggregate counter rates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    Genotype,
    ModelParams,
    PopulationState,
    SiteSet,
    marginal_count,
    project,
    recombine,
    validate_genotype,
)
from .rng import RandomStream


class AbsorbingStateError(RuntimeError):
    """Raised when an event is requested from a state with total rate zero."""


@dataclass(frozen=True)
class Observable:
    """A tracked marginal count: individuals matching ``reference`` on ``sites``."""

    sites: SiteSet
    reference: Genotype

    def label(self) -> str:
        return f"{self.sites}@{''.join(str(a) for a in self.reference)}"


@dataclass(frozen=True)
class Event:
    """One sampled transition; ``kind`` selects which fields are meaningful."""

    time: float
    kind: str  # "recombination" | "mutation" | "resampling"
    x: Genotype
    y: Optional[Genotype] = None
    keep: Optional[SiteSet] = None
    site: Optional[int] = None
    target_allele: Optional[int] = None


@dataclass(frozen=True)
class ObservedCounters:
    """Cumulative creation/destruction counts per tracked observable."""

    observables: tuple
    created: tuple
    destroyed: tuple

    @classmethod
    def zero(cls, observables: Sequence[Observable]) -> "ObservedCounters":
        obs = tuple(observables)
        return cls(obs, (0,) * len(obs), (0,) * len(obs))


@dataclass(frozen=True)
class Trajectory:
    """Piecewise-constant path sampled on a time grid.

    ``counts[k, j]`` is [A_j] at ``times[k]``; ``created``/``destroyed`` hold
    the counters <A_j>, (A_j).  ``states`` (optional) holds the full genotype
    count vector per grid time.
    """

    times: np.ndarray
    observables: tuple
    counts: np.ndarray
    created: np.ndarray
    destroyed: np.ndarray
    final_state: PopulationState
    states: Optional[np.ndarray] = None

    def to_csv(self, path) -> None:
        """Write rows (time, observable_id, value); counter series use the
        observable id wrapped in <> and () respectively.  Ids may contain
        commas, so fields are csv-quoted."""
        import csv

        with open(path, "w", newline="") as fh:
            fh.write("# moran-moments trajectory csv v1: time,observable_id,value\n")
            writer = csv.writer(fh)
            writer.writerow(["time", "observable_id", "value"])
            for k, t in enumerate(self.times):
                for j, obs in enumerate(self.observables):
                    name = obs.label()
                    writer.writerow([repr(float(t)), name, int(self.counts[k, j])])
                    writer.writerow([repr(float(t)), f"<{name}>", int(self.created[k, j])])
                    writer.writerow([repr(float(t)), f"({name})", int(self.destroyed[k, j])])


def total_rate(z: PopulationState, params: ModelParams):
    """Total event rate: state-independent recombination and resampling parts
    plus the state-dependent mutation part."""
    return (
        recombination_total_rate(params)
        + mutation_total_rate(z, params)
        + resampling_total_rate(params)
    )


def recombination_total_rate(params: ModelParams):
    return params.N * params.rho_sum() / 4


def resampling_total_rate(params: ModelParams):
    return params.b * params.N / 2


def mutation_total_rate(z: PopulationState, params: ModelParams):
    total = 0
    for x, c in sorted(z.counts.items()):
        total = total + c * sum(r for _, _, r in mutation_slots(params, x))
    return total


def mutation_slots(params: ModelParams, x: Genotype) -> tuple:
    """(site, target_allele, rate) triples available to a genotype, in the
    fixed order sites ascending then target alleles ascending."""
    out = []
    for site in range(1, params.n + 1):
        mat = params.mu.get(site)
        if mat is None:
            continue
        row = mat[x[site - 1]]
        for target, r in enumerate(row):
            if r > 0:
                out.append((site, target, r))
    return tuple(out)


def _pick_genotype(stream: RandomStream, z: PopulationState, genotypes) -> Genotype:
    v = stream.uniform() * z.N
    acc = 0.0
    last = None
    for x in genotypes:
        c = z.counts.get(x, 0)
        if c == 0:
            continue
        acc += c
        last = x
        if v < acc:
            return x
    return last


def sample_event(
    stream: RandomStream, z: PopulationState, params: ModelParams, t_now: float = 0.0
) -> Event:
    """Draw the waiting time and the next event; raises in an absorbing state.

    Recombination: the set G is drawn proportional to rho_G over all subsets,
    then the ordered pair (x, y) with both margins proportional to z(.)/N.
    """
    genotypes = params.genotypes()
    rec_total = float(recombination_total_rate(params))
    mut_total = 0.0
    out_rates = {}
    for x in genotypes:
        w = float(sum(r for _, _, r in mutation_slots(params, x)))
        out_rates[x] = w
        mut_total += z.counts.get(x, 0) * w
    res_total = float(resampling_total_rate(params))
    total = rec_total + mut_total + res_total
    if total <= 0.0:
        raise AbsorbingStateError("total event rate is zero")
    dt = stream.exponential(total)
    c = stream.uniform() * total
    if c < rec_total:
        entries = params.nonzero_rho()
        r = stream.uniform() * float(sum(float(v) for _, v in entries))
        acc = 0.0
        keep = entries[-1][0]
        for g, v in entries:
            acc += float(v)
            if r < acc:
                keep = g
                break
        x = _pick_genotype(stream, z, genotypes)
        y = _pick_genotype(stream, z, genotypes)
        return Event(time=t_now + dt, kind="recombination", x=x, y=y, keep=keep)
    if c < rec_total + mut_total:
        w = stream.uniform() * mut_total
        acc = 0.0
        x = None
        for g in genotypes:
            cnt = z.counts.get(g, 0)
            if cnt == 0 or out_rates[g] == 0.0:
                continue
            acc += cnt * out_rates[g]
            x = g
            if w < acc:
                break
        slots = mutation_slots(params, x)
        w2 = stream.uniform() * out_rates[x]
        acc = 0.0
        site, target = slots[-1][0], slots[-1][1]
        for s, tgt, r in slots:
            acc += float(r)
            if w2 < acc:
                site, target = s, tgt
                break
        return Event(time=t_now + dt, kind="mutation", x=x, site=site, target_allele=target)
    x = _pick_genotype(stream, z, genotypes)
    y = _pick_genotype(stream, z, genotypes)
    return Event(time=t_now + dt, kind="resampling", x=x, y=y)


def event_update(event: Event, params: ModelParams) -> dict:
    """Net count deltas of an event (may be empty)."""
    deltas: dict = {}

    def add(g, d):
        deltas[g] = deltas.get(g, 0) + d

    if event.kind == "recombination":
        gc = event.keep.complement_in(params.all_sites)
        add(event.x, -1)
        add(event.y, -1)
        add(recombine(event.x, event.y, event.keep), 1)
        add(recombine(event.x, event.y, gc), 1)
    elif event.kind == "mutation":
        x2 = list(event.x)
        x2[event.site - 1] = event.target_allele
        add(event.x, -1)
        add(tuple(x2), 1)
    elif event.kind == "resampling":
        add(event.y, -1)
        add(event.x, 1)
    else:
        raise ValueError(f"unknown event kind {event.kind!r}")
    return {g: d for g, d in deltas.items() if d != 0}


def apply_event(
    z: PopulationState, counters: ObservedCounters, event: Event, params: ModelParams
) -> tuple:
    """Apply an event; returns the new state and updated counters.

    Counter semantics per observable (A, x*):
      * recombination with set G splitting A nontrivially: <A> grows by the
        number of created individuals matching x* on A (multiplicity), (A)
        by the number of destroyed matching individuals; G & A in {0, A}
        leaves both untouched (the A-marginal cannot change).
      * mutation at site j in A: <A>/(A) grow by whether the new/old type
        matches on A; sites outside A leave the counters untouched.
      * resampling: <A> grows by the offspring match, (A) by the replaced
        individual's match.
    Empty events update counters but not the state.
    """
    created = list(counters.created)
    destroyed = list(counters.destroyed)
    for j, obs in enumerate(counters.observables):
        a = obs.sites
        ref = project(obs.reference, a)

        def match(g) -> int:
            return 1 if project(g, a) == ref else 0

        if event.kind == "recombination":
            cut = event.keep & a
            if cut.mask != 0 and cut.mask != a.mask:
                gc = event.keep.complement_in(params.all_sites)
                c1 = recombine(event.x, event.y, event.keep)
                c2 = recombine(event.x, event.y, gc)
                created[j] += match(c1) + match(c2)
                destroyed[j] += match(event.x) + match(event.y)
        elif event.kind == "mutation":
            if event.site in a:
                x2 = list(event.x)
                x2[event.site - 1] = event.target_allele
                created[j] += match(tuple(x2))
                destroyed[j] += match(event.x)
        else:
            created[j] += match(event.x)
            destroyed[j] += match(event.y)

    counts = dict(z.counts)
    for g, d in event_update(event, params).items():
        counts[g] = counts.get(g, 0) + d
    z2 = PopulationState(counts, z.N)
    return z2, ObservedCounters(counters.observables, tuple(created), tuple(destroyed))


def _validate_grid(t_grid) -> np.ndarray:
    grid = np.asarray(t_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("time grid must be a nonempty 1-d sequence")
    if grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise ValueError("time grid must start at 0 and increase strictly")
    return grid


def _validate_state(params: ModelParams, z0: PopulationState) -> PopulationState:
    if z0.N != params.N:
        raise ValueError(f"initial population has N={z0.N}, model expects {params.N}")
    for x in z0.counts:
        validate_genotype(x, params.allele_counts)
    return z0


def simulate(
    params: ModelParams,
    z0: PopulationState,
    t_grid,
    observables: Sequence[Observable] = (),
    seed: int = 0,
    replicate: int = 0,
    record_states: bool = False,
    use_kernel: bool = True,
) -> Trajectory:
    """Exact stochastic path sampled on ``t_grid`` (increasing, starting at 0).

    The path RNG stream is derived from (seed, replicate); a given pair is
    bit-reproducible across processes.  ``use_kernel=False`` selects the pure
    Python reference implementation, which consumes the identical stream.
    """
    grid = _validate_grid(t_grid)
    _validate_state(params, z0)
    obs = tuple(observables)
    for o in obs:
        validate_genotype(o.reference, params.allele_counts)
    if use_kernel:
        from .compiled import kernel_available, run_path_kernel

        if kernel_available(params):
            return run_path_kernel(
                params, z0, grid, obs, seed, replicate, record_states
            )
    return _simulate_reference(params, z0, grid, obs, seed, replicate, record_states)


def _simulate_reference(params, z0, grid, observables, seed, replicate, record_states):
    stream = RandomStream(seed, replicate)
    genotypes = params.genotypes()
    index = {g: i for i, g in enumerate(genotypes)}
    n_t, n_obs = grid.size, len(observables)
    counts_out = np.zeros((n_t, n_obs), dtype=np.int64)
    created_out = np.zeros((n_t, n_obs), dtype=np.int64)
    destroyed_out = np.zeros((n_t, n_obs), dtype=np.int64)
    states_out = np.zeros((n_t, len(genotypes)), dtype=np.int64) if record_states else None

    z = z0
    counters = ObservedCounters.zero(observables)
    t = 0.0
    k = 0

    def record(at: int) -> None:
        for j, o in enumerate(observables):
            counts_out[at, j] = marginal_count(z, o.sites, o.reference)
            created_out[at, j] = counters.created[j]
            destroyed_out[at, j] = counters.destroyed[j]
        if record_states:
            for g, c in z.counts.items():
                states_out[at, index[g]] = c

    while k < n_t:
        try:
            event = sample_event(stream, z, params, t_now=t)
        except AbsorbingStateError:
            while k < n_t:
                record(k)
                k += 1
            break
        while k < n_t and grid[k] < event.time:
            record(k)
            k += 1
        if k == n_t:
            break
        z, counters = apply_event(z, counters, event, params)
        t = event.time

    return Trajectory(
        times=grid,
        observables=observables,
        counts=counts_out,
        created=created_out,
        destroyed=destroyed_out,
        final_state=z,
        states=states_out,
    )
