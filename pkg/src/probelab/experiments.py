"""Seeded, reproducible experiment drivers behind the command-line interface.

Every experiment is a pure function of (config, seed): replicas get seeds
derived from the master seed, results are emitted in sorted replica order,
and output files carry no wall-clock state, so a re-run produces
byte-identical artifacts.
"""
from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field, fields
from pathlib import Path

from .addresses import AddressSpace, gen_candidates, candidate_pool_size
from .geometry import Level, geometry_preset
from .machine import MachineConfig, MachineState, mix64
from .noise import NoiseModel, attach
from .pruning import (
    ALGORITHMS,
    PruneConfig,
    build_bulk,
    build_sf_set,
    estimate_bulk_time,
)
from .timing import AttackOracle

EXPERIMENTS = ("prune-bench", "bulk", "covert-sweep", "psd-demo", "scan", "end-to-end")


@dataclass
class ExperimentConfig:
    experiment: str = "prune-bench"
    geometry: str = "skylake-sp-28"
    seed: int = 0
    replicas: int = 10
    noise_rate: float = 0.0
    noise_rates: list[float] = field(default_factory=list)
    algorithm: str = "bins"
    algorithms: list[str] = field(default_factory=list)
    scope: str = "single"
    filtering: bool = True
    page_offset: int = 0x440
    intervals: list[int] = field(default_factory=lambda: [2000, 10000, 100000])
    sender_accesses: int = 2000
    epsilon: int = 500
    scan_timeout_ms: float = 10000.0
    trace_duration_us: float = 500.0
    traces: int = 10
    max_sets: int | None = None
    out: str = "results"
    workers: int = 1

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib

        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def override(self, **kw) -> "ExperimentConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update({k: v for k, v in kw.items() if v is not None})
        return ExperimentConfig(**d)


def _write_csv(path: Path, header: list[str], rows: list[tuple]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fresh_rig(cfg: ExperimentConfig, seed: int, machine_overrides: dict | None = None):
    geo = geometry_preset(cfg.geometry)
    mc = MachineConfig(seed=seed, **(machine_overrides or {}))
    machine = MachineState(geo, mc)
    space = AddressSpace(geo, seed=seed, partition=0)
    if cfg.noise_rate > 0:
        attach(machine, NoiseModel(rate_per_ms=cfg.noise_rate, seed=seed))
    return machine, space, AttackOracle(machine, space)


# --------------------------------------------------------------- prune-bench


def prune_single(cfg: ExperimentConfig, algorithm: str, noise_rate: float, replica: int) -> dict:
    """One seeded single-set construction with in-process oracle validation.

    Returns a flat, picklable stats row so replica sweeps can run in worker
    processes.
    """
    seed = mix64(cfg.seed, replica, round(noise_rate * 1000)) & 0x7FFFFFFF
    geo = geometry_preset(cfg.geometry)
    machine = MachineState(geo, MachineConfig(seed=seed))
    space = AddressSpace(geo, seed=seed, partition=0)
    if noise_rate > 0:
        attach(machine, NoiseModel(rate_per_ms=noise_rate, seed=seed))
    oracle = AttackOracle(machine, space)
    pool = gen_candidates(space, cfg.page_offset, candidate_pool_size(geo, Level.SF))
    target, rest = pool.addrs[0], pool.subset(range(1, len(pool.addrs)))
    sf_set, stats = build_sf_set(
        oracle, target, rest, algorithm, PruneConfig(), random.Random(seed), filtering=cfg.filtering
    )
    minimal = sf_set is not None and len(set(sf_set.addrs)) == geo.shape(Level.SF).ways
    congruent = sf_set is not None and all(
        machine.congruent(space, target, a, Level.SF) for a in sf_set.addrs
    )
    return {
        "algorithm": algorithm,
        "scope": "single",
        "noise_rate": noise_rate,
        "replica": replica,
        "success": int(stats.success),
        "sim_ms": round(machine.ms(stats.duration_cycles), 4),
        "accesses": stats.accesses,
        "backtracks": stats.backtracks,
        "minimal": minimal,
        "congruent": congruent,
    }


def run_prune_bench(cfg: ExperimentConfig) -> dict:
    algorithms = cfg.algorithms or [cfg.algorithm]
    rates = cfg.noise_rates or [cfg.noise_rate]
    rows = []
    for algorithm in algorithms:
        if algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {algorithm!r}")
        for rate in rates:
            for replica in range(cfg.replicas):
                r = prune_single(cfg, algorithm, rate, replica)
                rows.append(
                    (
                        r["algorithm"],
                        r["scope"],
                        f"{rate:g}",
                        replica,
                        r["success"],
                        f"{r['sim_ms']:.4f}",
                        r["accesses"],
                        r["backtracks"],
                    )
                )
    rows.sort(key=lambda t: (t[0], float(t[2]), t[3]))
    out = Path(cfg.out)
    _write_csv(
        out / "prune_bench.csv",
        ["algorithm", "scope", "noise_rate", "replica", "success", "sim_ms", "accesses", "backtracks"],
        rows,
    )
    return {"rows": len(rows), "csv": str(out / "prune_bench.csv")}


# ---------------------------------------------------------------------- bulk


def run_bulk(cfg: ExperimentConfig) -> dict:
    scope = cfg.scope if cfg.scope in ("page-offset", "whole-sys") else "page-offset"
    machine, space, oracle = _fresh_rig(cfg, cfg.seed)
    sets, bulk = build_bulk(
        oracle,
        scope=scope,
        algorithm=cfg.algorithm,
        config=PruneConfig(),
        rng=random.Random(cfg.seed),
        page_offset=cfg.page_offset if scope == "page-offset" else None,
        filtering=cfg.filtering,
        max_sets=cfg.max_sets,
    )
    rows = [
        (
            i,
            s.algorithm,
            int(s.success),
            f"{machine.ms(s.duration_cycles):.4f}",
            s.accesses,
            s.backtracks,
        )
        for i, s in enumerate(bulk.per_target)
    ]
    out = Path(cfg.out)
    _write_csv(
        out / "bulk_targets.csv",
        ["target", "algorithm", "success", "sim_ms", "accesses", "backtracks"],
        rows,
    )
    try:
        estimate = estimate_bulk_time(bulk.per_target, bulk.targets_attempted)
    except Exception:
        estimate = None
    summary = {
        "scope": scope,
        "algorithm": cfg.algorithm,
        "noise_rate": cfg.noise_rate,
        "targets_attempted": bulk.targets_attempted,
        "built": bulk.built,
        "filterings": bulk.filterings,
        "success_rate": round(bulk.success_rate, 6),
        "sim_ms": round(machine.ms(bulk.duration_cycles), 3),
        "estimate_ms": round(machine.ms(int(estimate)), 3) if estimate else None,
    }
    _write_json(out / "bulk_summary.json", summary)
    return summary


# -------------------------------------------------------------- covert-sweep


def covert_point(cfg: ExperimentConfig, kind: str, interval: int, replica: int) -> float:
    """One covert-channel detection-rate measurement."""
    from .probing import MonitorStrategy, covert_run
    from .pruning import EvictionSet

    from .probing import STRATEGIES

    seed = mix64(cfg.seed, replica, interval, STRATEGIES.index(kind)) & 0x7FFFFFFF
    geo = geometry_preset(cfg.geometry)
    machine = MachineState(geo, MachineConfig(seed=seed, sf_policy="tree-plru"))
    space = AddressSpace(geo, seed=seed, partition=0)
    if cfg.noise_rate > 0:
        attach(machine, NoiseModel(rate_per_ms=cfg.noise_rate, seed=seed))
    oracle = AttackOracle(machine, space)

    def synth(page_off: int) -> EvictionSet:
        pool = gen_candidates(space, page_off, 3000 * 14)
        target = pool.addrs[0]
        pair = machine.pair_of(space.translate(target))
        keys = pool.level_keys(geo, Level.LLC)
        want = oracle.level_key(target, Level.LLC)
        cong = [pool.addrs[int(p)] for p in (keys == want).nonzero()[0]]
        w = geo.shape(Level.SF).ways
        return EvictionSet(addrs=tuple(cong[:w]), level=Level.SF, target=target)

    evset = synth(cfg.page_offset)
    aux = synth((cfg.page_offset + 0x80) % 4096) if kind == "ps-alt" else None
    strategy = MonitorStrategy(kind=kind, evset=evset, aux=aux)
    return covert_run(oracle, strategy, interval, cfg.sender_accesses, cfg.epsilon)


def run_covert_sweep(cfg: ExperimentConfig) -> dict:
    from .probing import STRATEGIES

    rows = []
    for kind in STRATEGIES:
        for interval in cfg.intervals:
            for replica in range(cfg.replicas):
                rate = covert_point(cfg, kind, interval, replica)
                rows.append((interval, kind, replica, f"{rate:.6f}"))
    rows.sort(key=lambda t: (t[0], t[1], t[2]))
    out = Path(cfg.out)
    _write_csv(out / "covert_sweep.csv", ["interval", "strategy", "replica", "rate"], rows)
    return {"rows": len(rows), "csv": str(out / "covert_sweep.csv")}


# ------------------------------------------------------------------ psd-demo


def run_psd_demo(cfg: ExperimentConfig) -> dict:
    """Monitor the victim's set and a quiet set; emit both PSDs as CSV."""
    from .probing import Monitor, MonitorStrategy, PARALLEL
    from .pruning import EvictionSet
    from .spectral import binarize, welch_psd
    from .victim import AttachedVictim, LadderVictim

    geo = geometry_preset(cfg.geometry)
    machine = MachineState(geo, MachineConfig(seed=cfg.seed))
    aspace = AddressSpace(geo, seed=cfg.seed, partition=0)
    vspace = AddressSpace(geo, seed=cfg.seed + 1, partition=1)
    if cfg.noise_rate > 0:
        attach(machine, NoiseModel(rate_per_ms=cfg.noise_rate, seed=cfg.seed))
    oracle = AttackOracle(machine, aspace)
    victim = LadderVictim(space=vspace, seed=cfg.seed)
    attached = AttachedVictim(machine, victim)

    page_off = victim.monitored_line & 0xFFF
    pool = gen_candidates(aspace, page_off, 3000 * 14)
    true_pair = machine.pair_of(vspace.translate(victim.monitored_line))
    keys = pool.level_keys(geo, Level.LLC)
    sets_count = geo.shape(Level.LLC).sets
    w = geo.shape(Level.SF).ways

    def evset_for(pair):
        key = pair[0] * sets_count + pair[1]
        cong = [pool.addrs[int(p)] for p in (keys == key).nonzero()[0][: w]]
        return EvictionSet(addrs=tuple(cong), level=Level.SF, target=cong[0])

    other_pair = next(
        machine.pair_of(aspace.translate(a)) for a in pool.addrs
        if machine.pair_of(aspace.translate(a)) != true_pair
    )
    duration = int(cfg.trace_duration_us * 1000 * machine.config.clock_ghz)
    sample_period = cfg.epsilon
    fs = machine.config.clock_ghz * 1e9 / sample_period
    out = Path(cfg.out)
    traces = {}
    for label, pair in (("target", true_pair), ("nontarget", other_pair)):
        mon = Monitor(oracle, MonitorStrategy(kind=PARALLEL, evset=evset_for(pair)))
        mon.prime()
        truth = attached.trigger_signing()
        trace = mon.run(duration, prime_first=False)
        traces[label] = trace
        machine.advance(victim.nonce_bits * victim.iteration_mean * 2)
        machine.sync_pair(*true_pair)
        psd = welch_psd(binarize(trace, sample_period), sample_rate=fs)
        _write_csv(out / f"psd_{label}.csv", ["freq_hz", "power"], [
            (f"{f:.3f}", f"{p:.12e}") for f, p in psd.rows()
        ])
        _write_csv(out / f"trace_{label}.csv", ["cycle", "latency"], [
            (t - trace.start, lat) for t, lat in zip(trace.detections, trace.latencies)
        ])
    return {
        "target_detections": len(traces["target"]),
        "nontarget_detections": len(traces["nontarget"]),
        "files": sorted(str(p) for p in out.glob("psd_*.csv")),
    }


# ---------------------------------------------------------------------- scan


def run_scan(cfg: ExperimentConfig) -> dict:
    from .victim import AttackConfig, end_to_end

    report = end_to_end(
        AttackConfig(
            geometry=cfg.geometry,
            seed=cfg.seed,
            noise_rate=cfg.noise_rate,
            algorithm=cfg.algorithm,
            scope="page-offset" if cfg.scope == "single" else cfg.scope,
            filtering=cfg.filtering,
            traces=0,
            scan_timeout=int(cfg.scan_timeout_ms * 2e6),
        )
    )
    payload = report.to_json_dict()
    _write_json(Path(cfg.out) / "scan_report.json", payload)
    return payload


# ----------------------------------------------------------------- end-to-end


def run_end_to_end(cfg: ExperimentConfig) -> dict:
    from .victim import AttackConfig, end_to_end

    report = end_to_end(
        AttackConfig(
            geometry=cfg.geometry,
            seed=cfg.seed,
            noise_rate=cfg.noise_rate,
            algorithm=cfg.algorithm,
            scope="page-offset" if cfg.scope == "single" else cfg.scope,
            filtering=cfg.filtering,
            traces=cfg.traces,
            scan_timeout=int(cfg.scan_timeout_ms * 2e6),
        )
    )
    payload = report.to_json_dict()
    _write_json(Path(cfg.out) / "attack_report.json", payload)
    return payload


RUNNERS = {
    "prune-bench": run_prune_bench,
    "bulk": run_bulk,
    "covert-sweep": run_covert_sweep,
    "psd-demo": run_psd_demo,
    "scan": run_scan,
    "end-to-end": run_end_to_end,
}


def run_experiment(cfg: ExperimentConfig) -> dict:
    if cfg.experiment not in RUNNERS:
        raise ValueError(f"unknown experiment {cfg.experiment!r}; known: {EXPERIMENTS}")
    return RUNNERS[cfg.experiment](cfg)


# ------------------------------------------------- acceptance-suite helpers
#
# Top-level, picklable trial functions so the heavy criteria can fan replica
# sweeps out to worker processes.


def complexity_trial(geometry: str, algorithm: str, seed: int) -> dict:
    """Unfiltered SF-set construction; reports the memory-access count."""
    cfg = ExperimentConfig(geometry=geometry, seed=seed, filtering=False)
    return prune_single(cfg, algorithm, 0.0, replica=seed)


def filter_factor_trial(seed: int) -> dict:
    """One candidate-filtering execution: kept size and oracle-congruent losses."""
    geo = geometry_preset("skylake-sp-28")
    machine = MachineState(geo, MachineConfig(seed=seed))
    space = AddressSpace(geo, seed=seed, partition=0)
    oracle = AttackOracle(machine, space)
    from .pruning import l2_filter

    pool = gen_candidates(space, 0x440, candidate_pool_size(geo, Level.SF))
    target, rest = pool.addrs[0], pool.subset(range(1, len(pool.addrs)))
    filtered, _ = l2_filter(oracle, target, rest, PruneConfig(), random.Random(seed))
    kept = set(filtered.addrs)
    lost = sum(
        1
        for a in rest.addrs
        if machine.congruent(space, target, a, Level.SF) and a not in kept
    )
    return {"n": len(rest), "kept": len(filtered), "lost": lost}


def bulk_counts_trial(scope: str, seed: int, geometry: str = "skylake-sp-28") -> dict:
    """Bulk construction attempt/filtering counters for one noiseless run."""
    geo = geometry_preset(geometry)
    machine = MachineState(geo, MachineConfig(seed=seed))
    space = AddressSpace(geo, seed=seed, partition=0)
    oracle = AttackOracle(machine, space)
    sets, bulk = build_bulk(
        oracle,
        scope=scope,
        algorithm="bins",
        config=PruneConfig(),
        rng=random.Random(seed),
        page_offset=0x440 if scope == "page-offset" else None,
    )
    pairs = {machine.pair_of(space.translate(ev.target)) for ev in sets}
    return {
        "targets_attempted": bulk.targets_attempted,
        "built": bulk.built,
        "filterings": bulk.filterings,
        "distinct_pairs": len(pairs),
    }


def _synth_sets_for_offset(machine, space, page_off, per_pair):
    """Ground-truth-synthesized minimal SF eviction sets, one per (slice, set)."""
    from .pruning import EvictionSet

    geo = machine.geometry
    pool = gen_candidates(space, page_off, candidate_pool_size(geo, Level.SF))
    keys = pool.level_keys(geo, Level.LLC)
    buckets: dict[int, list] = {}
    for pos, key in enumerate(keys.tolist()):
        b = buckets.setdefault(key, [])
        if len(b) < per_pair:
            b.append(pool.addrs[pos])
    out = []
    for key, addrs in sorted(buckets.items()):
        if len(addrs) == per_pair:
            out.append(EvictionSet(addrs=tuple(addrs), level=Level.SF, target=addrs[0]))
    return out


def scan_trial(
    seed: int,
    noise_rate: float,
    geometry: str = "skylake-sp-28",
    scope: str = "page-offset",
    timeout_ms: float = 12000.0,
    duty_cycle: float = 0.25,
) -> dict:
    """One scanner run over synthesized sets with a free-running victim."""
    from .spectral import scan
    from .victim import AttachedVictim, LadderVictim, extract_nonce

    geo = geometry_preset(geometry)
    machine = MachineState(geo, MachineConfig(seed=seed))
    aspace = AddressSpace(geo, seed=seed, partition=0)
    vspace = AddressSpace(geo, seed=seed + 1, partition=1)
    if noise_rate > 0:
        attach(machine, NoiseModel(rate_per_ms=noise_rate, seed=seed))
    oracle = AttackOracle(machine, aspace)
    victim = LadderVictim(space=vspace, seed=seed, duty_cycle=duty_cycle)
    attached = AttachedVictim(machine, victim)
    per_pair = geo.shape(Level.SF).ways
    page_off = victim.monitored_line & 0xFFF
    if scope == "page-offset":
        sets = _synth_sets_for_offset(machine, aspace, page_off, per_pair)
    else:
        sets = []
        for off in range(0, 4096, 64):
            sets.extend(_synth_sets_for_offset(machine, aspace, off, per_pair))
    # Either branch line discloses the secret; finding either set counts.
    true_pairs = {
        machine.pair_of(vspace.translate(victim.monitored_line)),
        machine.pair_of(vspace.translate(victim.if_line)),
    }
    attached.start_free_running()
    report = scan(
        oracle,
        sets,
        expected_period=victim.iteration_mean // 2,
        timeout=int(timeout_ms * machine.config.cycles_per_ms),
        bit_decoder=(lambda tr: extract_nonce(tr).values) if scope == "whole-sys" else None,
    )
    return {
        "found": report.found is not None,
        "correct": report.set_id in true_pairs,
        "sweeps": report.sweeps,
        "elapsed_ms": machine.ms(report.elapsed_cycles),
        "sets": len(sets),
    }


def psd_separation_trial(seed: int, noise_rate: float) -> dict:
    """Scores of one target-set trace vs one non-target trace for a victim
    with a 4850-cycle access period (all-zero secret)."""
    from .probing import Monitor, MonitorStrategy, PARALLEL
    from .spectral import binarize, score_peak, welch_psd
    from .victim import AttachedVictim, LadderVictim, NONCE_BITS

    geo = geometry_preset("skylake-sp-28")
    machine = MachineState(geo, MachineConfig(seed=seed))
    aspace = AddressSpace(geo, seed=seed, partition=0)
    vspace = AddressSpace(geo, seed=seed + 1, partition=1)
    if noise_rate > 0:
        attach(machine, NoiseModel(rate_per_ms=noise_rate, seed=seed))
    oracle = AttackOracle(machine, aspace)
    victim = LadderVictim(space=vspace, seed=seed)
    attached = AttachedVictim(machine, victim)
    true_pair = machine.pair_of(vspace.translate(victim.monitored_line))
    page_off = victim.monitored_line & 0xFFF
    sets = _synth_sets_for_offset(machine, aspace, page_off, geo.shape(Level.SF).ways)
    target_set = next(
        s for s in sets if machine.pair_of(aspace.translate(s.addrs[0])) == true_pair
    )
    other_set = next(
        s for s in sets if machine.pair_of(aspace.translate(s.addrs[0])) != true_pair
    )
    duration = 1_000_000
    sample_period = 500
    fs = machine.config.clock_ghz * 1e9 / sample_period
    f_expected = machine.config.clock_ghz * 1e9 / (victim.iteration_mean // 2)
    out = {}
    for label, evset in (("target", target_set), ("nontarget", other_set)):
        mon = Monitor(oracle, MonitorStrategy(kind=PARALLEL, evset=evset))
        mon.prime()
        attached.trigger_signing(bits=[0] * NONCE_BITS)
        trace = mon.run(duration, prime_first=False)
        machine.advance(NONCE_BITS * victim.iteration_mean)
        machine.sync_pair(*true_pair)
        psd = welch_psd(binarize(trace, sample_period), sample_rate=fs)
        import numpy as np

        peak_bin = int(np.argmax(psd.power[2:])) + 2
        out[label] = {
            "score": score_peak(psd, f_expected),
            "peak_bin": peak_bin,
            "bin_width": psd.bin_width,
            "count": len(trace),
        }
    return out


def e2e_trial(seed: int, noise_rate: float, traces: int = 10) -> dict:
    from .victim import AttackConfig, end_to_end

    report = end_to_end(
        AttackConfig(
            seed=seed,
            noise_rate=noise_rate,
            traces=traces,
            scan_timeout=40_000_000_000,
        )
    )
    return report.to_json_dict()
