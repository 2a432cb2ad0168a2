"""Command-line entry point: config ingestion, experiment orchestration, and
report emission.

Configs are JSON; site subsets are written as sorted 1-based site lists and
genotypes as 0-based allele-index lists.  Each experiment writes CSV artifacts
plus a machine-readable summary.json with pass/fail counts; the exit status is
nonzero iff any comparison failed (1) or the configuration/experiment was
rejected (2).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import ModelParams, PopulationState, SiteSet, validate_genotype
from .partitions import PartialPartition, partial_partitions
from .simulate import Observable, simulate
from . import deterministic, hierarchy, oracle, stats

EXPERIMENTS = (
    "simulate",
    "hierarchy",
    "oracle",
    "deterministic",
    "compare",
    "ld",
    "nonclosure",
)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Validated run description (model, initial population, experiment)."""

    params: ModelParams
    initial: PopulationState
    reference: tuple
    experiment: str
    t_grid: tuple
    replicates: int = 1000
    seed: int = 0
    z_threshold: float = 3.0
    observables: tuple = ()
    out: str = "."
    strict: bool = False
    raw: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def _parse_model(doc: dict) -> ModelParams:
    try:
        allele_counts = tuple(int(k) for k in doc["allele_counts"])
        n_pop = int(doc["N"])
    except KeyError as exc:
        raise ConfigError(f"model section missing {exc}") from None
    rho = {}
    for entry in doc.get("rho", ()):
        sites = SiteSet.from_sites(entry["sites"])
        rate = float(entry["rate"])
        if sites in rho and rho[sites] != rate:
            raise ConfigError(f"duplicate rho entry for {sites} with a different rate")
        rho[sites] = rate
    mu: dict = {}
    for entry in doc.get("mu", ()):
        site = int(entry["site"])
        src, dst, rate = int(entry["from"]), int(entry["to"]), float(entry["rate"])
        if not 1 <= site <= len(allele_counts):
            raise ConfigError(f"mutation entry for unknown site {site}")
        k = allele_counts[site - 1]
        if not (0 <= src < k and 0 <= dst < k):
            raise ConfigError(f"mutation alleles {src}->{dst} outside 0..{k - 1}")
        if src == dst:
            raise ConfigError(f"mutation entry at site {site} must change the allele")
        mat = mu.setdefault(site, [[0.0] * k for _ in range(k)])
        mat[src][dst] += rate
    try:
        return ModelParams(
            allele_counts=allele_counts,
            N=n_pop,
            rho=rho,
            mu={s: tuple(tuple(r) for r in m) for s, m in mu.items()},
            b=float(doc.get("b", 0.0)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    """Parse and validate a JSON run configuration."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from None

    if "model" not in doc:
        raise ConfigError("config needs a 'model' section")
    params = _parse_model(doc["model"])

    try:
        counts = {
            tuple(int(a) for a in entry["type"]): int(entry["count"])
            for entry in doc["initial"]
        }
    except KeyError as exc:
        raise ConfigError(f"initial population entry missing {exc}") from None
    for x in counts:
        try:
            validate_genotype(x, params.allele_counts)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    total = sum(counts.values())
    if total != params.N:
        raise ConfigError(f"initial counts sum to {total}, model N is {params.N}")
    initial = PopulationState(counts, params.N)

    try:
        reference = validate_genotype(doc["reference_type"], params.allele_counts)
    except KeyError:
        raise ConfigError("config needs 'reference_type'") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    experiment = doc.get("experiment")
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {', '.join(EXPERIMENTS)}")

    t_grid = tuple(float(t) for t in doc.get("t_grid", (0.0, 1.0)))
    if len(t_grid) == 0 or t_grid[0] != 0.0 or any(
        b <= a for a, b in zip(t_grid, t_grid[1:])
    ):
        raise ConfigError("t_grid must start at 0 and increase strictly")

    observables = tuple(
        SiteSet.from_sites(entry) for entry in doc.get("observables", ())
    )
    for s in observables:
        if not s.issubset(params.all_sites):
            raise ConfigError(f"observable {s} outside the model's sites")

    replicates = int(doc.get("replicates", 1000))
    if replicates < 1:
        raise ConfigError("replicates must be positive")

    return RunConfig(
        params=params,
        initial=initial,
        reference=reference,
        experiment=experiment,
        t_grid=t_grid,
        replicates=replicates,
        seed=int(doc.get("seed", 0)),
        z_threshold=float(doc.get("z_threshold", 3.0)),
        observables=observables,
        out=str(doc.get("out", ".")),
        strict=bool(doc.get("strict", False)),
        raw=doc,
    )


def _threads(config: RunConfig) -> Optional[int]:
    return 1 if config.strict else None


def _write_summary(outdir: Path, experiment: str, rows, extra=None) -> dict:
    summary = {"experiment": experiment, **stats.summarize(rows)}
    if extra:
        summary.update(extra)
    summary["rows"] = [
        {
            "observable_id": r.observable_id,
            "time": r.time,
            "estimate": r.estimate,
            "se": r.se,
            "prediction": r.prediction,
            "z": r.z if np.isfinite(r.z) else None,
            "verdict": r.verdict,
        }
        for r in rows
    ]
    with open(outdir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def _write_moment_csv(path, rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        fh.write("# moran-moments moments csv v1: time,observable_id,value\n")
        writer = csv.writer(fh)
        writer.writerow(["time", "observable_id", "value"])
        for t, label, value in rows:
            writer.writerow([repr(t), label, repr(float(value))])


def _partitions_for(config: RunConfig):
    if config.observables:
        return [PartialPartition((s,)) for s in config.observables]
    return [PartialPartition((config.params.all_sites,))]


def _run_simulate(config: RunConfig, outdir: Path) -> int:
    obs = tuple(
        Observable(s, config.reference)
        for s in (config.observables or (config.params.all_sites,))
    )
    traj = simulate(
        config.params, config.initial, np.asarray(config.t_grid), obs,
        seed=config.seed,
    )
    traj.to_csv(outdir / "trajectory.csv")
    _write_summary(outdir, "simulate", [], {"artifact": "trajectory.csv"})
    return 0


def _run_hierarchy(config: RunConfig, outdir: Path) -> int:
    system = hierarchy.build_system(config.params, config.reference)
    system.export_csv(outdir / "system.csv")
    sol = hierarchy.solve(system, config.initial, np.asarray(config.t_grid))
    _write_moment_csv(
        outdir / "moments.csv",
        ((float(t), part.label(), sol.at(part, k))
         for k, t in enumerate(sol.times) for part in system.index),
    )
    _write_summary(outdir, "hierarchy", [], {"artifacts": ["system.csv", "moments.csv"]})
    return 0


def _run_oracle(config: RunConfig, outdir: Path) -> int:
    model = oracle.ExactModel.build(config.params)
    p0 = model.point_mass(config.initial)
    parts = partial_partitions(config.params.all_sites)

    def rows():
        for t in config.t_grid:
            pt = model.transient(p0, t)
            for part in parts:
                yield float(t), part.label(), model.moment(
                    part, config.reference, t, p_t=pt
                )

    _write_moment_csv(outdir / "oracle_moments.csv", rows())
    _write_summary(outdir, "oracle", [], {"artifact": "oracle_moments.csv"})
    return 0


def _run_deterministic(config: RunConfig, outdir: Path) -> int:
    omega0 = deterministic.state_to_measure(config.params, config.initial)
    path = deterministic.integrate(config.params, omega0, np.asarray(config.t_grid))
    genotypes = config.params.genotypes()
    import csv

    with open(outdir / "flow.csv", "w", newline="") as fh:
        fh.write("# moran-moments flow csv v1: time,genotype,weight\n")
        writer = csv.writer(fh)
        writer.writerow(["time", "genotype", "weight"])
        for k, t in enumerate(config.t_grid):
            flat = path[k].ravel()
            for g, w in zip(genotypes, flat):
                writer.writerow([repr(float(t)), "".join(map(str, g)), repr(float(w))])
    _write_summary(outdir, "deterministic", [], {"artifact": "flow.csv"})
    return 0


def _run_compare(config: RunConfig, outdir: Path) -> int:
    parts = _partitions_for(config)
    grid = np.asarray(config.t_grid)
    ests = stats.estimate_moments(
        config.params, config.initial, parts, config.reference, grid,
        config.replicates, config.seed, threads=_threads(config),
    )
    system = hierarchy.build_system(config.params, config.reference)
    sol = hierarchy.solve(system, config.initial, grid)
    preds = {
        (p.label(), float(t)): sol.at(p, k)
        for k, t in enumerate(grid)
        for p in parts
    }
    rows = stats.compare(ests, preds, config.z_threshold)
    stats.write_comparison_csv(rows, outdir / "compare.csv")
    summary = _write_summary(outdir, "compare", rows)
    return 0 if summary["fail"] == 0 else 1


def _run_ld(config: RunConfig, outdir: Path) -> int:
    params = config.params
    if params.n != 2:
        raise ConfigError("the ld experiment needs a two-site model")
    mean_pair, mean_prod, ld = hierarchy.two_site_mean_ld(
        params, config.initial, config.reference
    )
    parts = [PartialPartition.of([1, 2]), PartialPartition.of([1], [2])]
    grid = np.asarray(config.t_grid)
    values = stats.replicate_products(
        params, config.initial, parts, config.reference, grid,
        config.replicates, config.seed, threads=_threads(config),
    )
    ld_samples = params.N * values[:, :, 0] - values[:, :, 1]
    rows = []
    for k, t in enumerate(grid):
        sample = ld_samples[:, k]
        se = float(sample.std(ddof=1) / np.sqrt(len(sample)))
        est = float(sample.mean())
        pred = float(ld(t))
        if se == 0.0:
            z, verdict = 0.0, ("pass" if est == pred else "exact-mismatch")
        else:
            z = (est - pred) / se
            verdict = "pass" if abs(z) <= config.z_threshold else "fail"
        rows.append(stats.ComparisonRow("ld", float(t), est, se, pred, z, verdict))
    stats.write_comparison_csv(rows, outdir / "ld.csv")
    summary = _write_summary(
        outdir, "ld", rows, {"decay_rate": hierarchy.ld_decay_rate(params)}
    )
    return 0 if summary["fail"] == 0 else 1


def _run_nonclosure(config: RunConfig, outdir: Path) -> int:
    t = config.t_grid[-1]
    check = stats.three_site_nonclosure_check(
        config.params, config.initial, config.reference, t,
        config.replicates, seed=config.seed, z_threshold=config.z_threshold,
        threads=_threads(config),
    )
    rows = [check.row, check.control_row]
    stats.write_comparison_csv(rows, outdir / "nonclosure.csv")
    summary = _write_summary(
        outdir, "nonclosure", [check.row], {"step": check.step}
    )
    return 0 if summary["fail"] == 0 else 1


def run(config: RunConfig) -> int:
    """Execute the configured experiment; returns the process exit status."""
    outdir = Path(config.out)
    outdir.mkdir(parents=True, exist_ok=True)
    runner = {
        "simulate": _run_simulate,
        "hierarchy": _run_hierarchy,
        "oracle": _run_oracle,
        "deterministic": _run_deterministic,
        "compare": _run_compare,
        "ld": _run_ld,
        "nonclosure": _run_nonclosure,
    }[config.experiment]
    try:
        return runner(config, outdir)
    except (hierarchy.ClosureError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="moran-moments",
        description="Moran model with recombination: simulation, moment systems, reports",
    )
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--replicates", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument(
        "--strict", action="store_true",
        help="single-threaded, bit-reproducible aggregation",
    )
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    config.experiment = args.experiment
    if args.seed is not None:
        config.seed = args.seed
    if args.replicates is not None:
        config.replicates = args.replicates
    if args.out is not None:
        config.out = args.out
    if args.strict:
        config.strict = True
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
