"""Eviction-set construction algorithms and the bulk-construction driver.

All algorithms reduce an oversized candidate pool to a minimal eviction set
for the cache set a target address maps to, using only the timing oracle:

* ``group_test_prune``  - withhold-a-group testing with backtracking; the
  ``early_termination=False`` variant keeps scanning groups within a pass,
  pruning larger chunks per re-partition.
* ``prime_scope_prune`` - sequential scan that checks the target after every
  candidate access; optional "recharge" keeps fresh candidates near the scan
  front.
* ``binary_search_prune`` - repeated bisection for the tipping point, the
  smallest prefix of the candidate list that evicts the target.

Construction is LLC-first: a minimal LLC set (W_llc addresses) is found with
shared loads, extended to the snoop-filter associativity with LLC-level
tests for additional congruent addresses, and finally verified through SF
back-invalidation.

Every returned set passed its behavioral check on the simulated machine;
tests additionally hold them against the ground-truth congruence oracle.
"""
from __future__ import annotations

import random
from bisect import bisect_left, insort
from dataclasses import dataclass, field

import numpy as np

from .addresses import CandidateSet, VirtAddr, uncertainty
from .geometry import Level
from .timing import AttackOracle


class FilterError(RuntimeError):
    """Candidate filtering could not build the L2 eviction set it needs."""


class EstimateError(ValueError):
    """Bulk time estimate undefined (zero success rate)."""


@dataclass
class PruneConfig:
    max_attempts: int = 10
    max_backtracks: int = 20
    time_limit_ms: float | None = None  # default: 100 with filtering, 1000 without
    group_count: int | None = None  # default W + 1
    early_termination: bool = True
    recharge: bool = False
    recharge_count: int = 4
    backtrack_stride: int | None = None  # default max(8, N // 16)
    record_tests: bool = False

    def resolved_time_limit_ms(self, filtered: bool) -> float:
        if self.time_limit_ms is not None:
            return self.time_limit_ms
        return 100.0 if filtered else 1000.0


@dataclass
class PruneStats:
    algorithm: str
    success: bool = False
    duration_cycles: int = 0
    accesses: int = 0
    backtracks: int = 0
    attempts: int = 0
    test_lengths: list[int] = field(default_factory=list)

    def merge_into_csv_row(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "success": int(self.success),
            "sim_ms": round(self.duration_cycles, 6),
            "accesses": self.accesses,
            "backtracks": self.backtracks,
            "attempts": self.attempts,
        }


@dataclass(frozen=True)
class EvictionSet:
    """Addresses that evict any line of one target set; minimal when len == ways."""

    addrs: tuple[VirtAddr, ...]
    level: Level
    target: VirtAddr


class _Budget:
    """Tracks one construction's simulated-time budget and counters."""

    def __init__(self, oracle: AttackOracle, limit_ms: float, stats: PruneStats):
        self.oracle = oracle
        self.t0 = oracle.clock
        self.a0 = oracle.accesses
        self.deadline = oracle.clock + int(limit_ms * oracle.machine.config.cycles_per_ms)
        self.stats = stats

    def expired(self) -> bool:
        return self.oracle.clock >= self.deadline

    def close(self, success: bool) -> None:
        self.stats.success = success
        self.stats.duration_cycles = self.oracle.clock - self.t0
        self.stats.accesses = self.oracle.accesses - self.a0


def _relevant_positions(oracle: AttackOracle, target: VirtAddr, pool: CandidateSet, level: Level):
    """Positions in the pool mapping to the target's set (engine-side index)."""
    return oracle.relevant_positions(target, pool, level)


def _verify_behavioral(oracle, target, addrs, level: Level) -> bool:
    return oracle.eviction_run(target, list(addrs), len(addrs), level, parallel=True)


def _shuffled(n: int, rng: random.Random) -> list[int]:
    """Deterministic permutation of range(n), cheap for large n."""
    gen = np.random.Generator(np.random.PCG64(rng.getrandbits(63)))
    return gen.permutation(n).tolist()


# --------------------------------------------------------------------- group testing


def group_test_prune(
    oracle: AttackOracle,
    target: VirtAddr,
    candidates: CandidateSet,
    config: PruneConfig | None = None,
    rng: random.Random | None = None,
    level: Level = Level.LLC,
) -> tuple[EvictionSet | None, PruneStats]:
    cfg = config or PruneConfig()
    rng = rng or random.Random(0)
    ways = oracle.geometry.shape(level).ways
    groups = cfg.group_count or ways + 1
    stats = PruneStats(algorithm="gt" if cfg.early_termination else "gtop")
    budget = _Budget(oracle, cfg.resolved_time_limit_ms(candidates.filtered), stats)

    relevant = [int(p) for p in _relevant_positions(oracle, target, candidates, level)]
    addrs = candidates.addrs
    pas_all = candidates.pas()
    rel_pas = {p: int(pas_all[p]) for p in relevant}
    if level != Level.LLC:
        oracle.set_hygiene(list(rel_pas.values()), len(addrs))

    def test(member_set, withhold, total) -> bool:
        chosen = [rel_pas[p] for p in relevant if p in member_set and p not in withhold]
        return oracle.eviction_run(target, chosen, total, level, parallel=True, pas=True)

    for attempt in range(1, cfg.max_attempts + 1):
        stats.attempts = attempt
        if budget.expired():
            break
        order = _shuffled(len(addrs), rng)
        s = order
        s_set = set(s)
        discard_stack: list[list[int]] = []
        backtracks = 0
        singles = False
        dead = False
        while len(s) > ways and not dead:
            if budget.expired():
                dead = True
                break
            g = len(s) if singles else min(groups, len(s))
            bounds = [(k * len(s)) // g for k in range(g + 1)]
            kept = [True] * g
            removed_any = False
            size = len(s)
            for k in range(g):
                chunk = s[bounds[k] : bounds[k + 1]]
                if not chunk or size - len(chunk) < ways:
                    continue
                if budget.expired():
                    dead = True
                    break
                chunk_set = set(chunk)
                if test(s_set, chunk_set, size - len(chunk)):
                    kept[k] = False
                    removed_any = True
                    s_set -= chunk_set
                    size -= len(chunk)
                    discard_stack.append(chunk)
                    if cfg.early_termination:
                        break
            s = [p for k in range(g) if kept[k] for p in s[bounds[k] : bounds[k + 1]]]
            if dead:
                break
            if not removed_any:
                if not singles and len(s) <= 2 * groups:
                    singles = True  # retry at single-candidate granularity
                    continue
                if test(s_set, (), len(s)):
                    dead = True  # still evicts but cannot shrink further
                    break
                # Erroneous discard: restore groups until the set evicts again.
                restored = False
                while discard_stack and backtracks < cfg.max_backtracks:
                    backtracks += 1
                    stats.backtracks += 1
                    back = discard_stack.pop()
                    s.extend(back)
                    s_set |= set(back)
                    if test(s_set, (), len(s)):
                        restored = True
                        break
                singles = False
                if not restored:
                    dead = True
        if dead or len(s) != ways:
            continue
        final = [addrs[p] for p in s]
        if _verify_behavioral(oracle, target, final, level):
            budget.close(True)
            oracle.clear_hygiene()
            return EvictionSet(addrs=tuple(final), level=level, target=target), stats
    budget.close(False)
    oracle.clear_hygiene()
    return None, stats


# ---------------------------------------------------------------- sequential scanning


def prime_scope_prune(
    oracle: AttackOracle,
    target: VirtAddr,
    candidates: CandidateSet,
    config: PruneConfig | None = None,
    rng: random.Random | None = None,
    level: Level = Level.LLC,
) -> tuple[EvictionSet | None, PruneStats]:
    """Sequentially access candidates, checking the target after each one.

    A target eviction right after accessing candidate c pins c as congruent.
    The scan repeats over the remaining list until `ways` addresses are
    found. With recharge enabled, unexamined candidates from the back of the
    list are promoted to the scan front after every discovery, keeping the
    front rich in congruent addresses.
    """
    import numpy as np

    cfg = config or PruneConfig()
    rng = rng or random.Random(0)
    ways = oracle.geometry.shape(level).ways
    stats = PruneStats(algorithm="psop" if cfg.recharge else "ps")
    budget = _Budget(oracle, cfg.resolved_time_limit_ms(candidates.filtered), stats)
    lat = oracle.latency
    machine = oracle.machine
    step = lat.memory + lat.pipeline + lat.l1_hit + lat.pipeline  # access + scope check
    pair = machine.pair_of(oracle.translate(target))
    relevant = np.asarray(_relevant_positions(oracle, target, candidates, level))
    addrs = candidates.addrs
    pas_all = candidates.pas()
    target_pa = oracle.translate(target)

    def target_cached() -> bool:
        return machine.hit_level(0, target_pa) in ("l1", "l2", "llc")

    def fine_step(pos) -> bool:
        machine.make_shared(int(pas_all[pos]))
        res = machine.access(0, target_pa)
        return lat.latency(res.level) > lat.threshold_for(level)

    def consume_gap(order, lo: int, hi: int):
        """Charge the scan over order[lo:hi] (no congruent members); return a
        position blamed for a background eviction, or None."""
        i = lo
        while i < hi:
            run = hi - i
            ev = machine.next_background_event(*pair, machine.clock + run * step)
            if ev is None:
                machine.advance(run * step)
                oracle.accesses += 2 * run
                return None
            k = max(1, min(run, -(-(ev - machine.clock) // step)))
            machine.advance(k * step)
            oracle.accesses += 2 * k
            machine.sync_pair(*pair)
            i += k
            if not target_cached():
                return order[i - 1]
        return None

    for attempt in range(1, cfg.max_attempts + 1):
        stats.attempts = attempt
        if budget.expired():
            break
        order = _shuffled(len(addrs), rng)
        found: list[int] = []
        found_set: set[int] = set()
        oracle.make_shared(target)
        oracle.timed_access(target)
        dead = False
        while len(found) < ways and not dead:
            order_arr = np.asarray(order)
            rel_ranks = np.nonzero(np.isin(order_arr, relevant))[0]
            progressed = False
            cursor = 0
            finds_this_pass = 0
            for r in rel_ranks:
                if len(found) >= ways:
                    break
                if budget.expired():
                    dead = True
                    break
                r = int(r)
                pos = order[r]
                if pos in found_set:
                    cursor = r + 1
                    continue
                blamed = consume_gap(order, cursor, r)
                if blamed is not None and blamed not in found_set:
                    found.append(blamed)
                    found_set.add(blamed)
                    finds_this_pass += 1
                    progressed = True
                    oracle.make_shared(target)
                    oracle.timed_access(target)
                    if len(found) >= ways:
                        break
                oracle.accesses += 2
                machine.advance(step)
                if fine_step(pos):
                    found.append(pos)
                    found_set.add(pos)
                    finds_this_pass += 1
                    progressed = True
                    oracle.make_shared(target)
                    oracle.timed_access(target)
                cursor = r + 1
            if not dead and len(found) < ways:
                blamed = consume_gap(order, cursor, len(order))
                if blamed is not None and blamed not in found_set:
                    found.append(blamed)
                    found_set.add(blamed)
                    finds_this_pass += 1
                    progressed = True
                    oracle.make_shared(target)
                    oracle.timed_access(target)
            if dead or budget.expired():
                dead = True
                break
            if not progressed:
                break
            # Rebuild the scan order: drop found addresses; with recharge,
            # promote fresh back-of-list candidates to the front.
            order = [p for p in order if p not in found_set]
            if cfg.recharge and finds_this_pass:
                k = min(cfg.recharge_count * finds_this_pass, len(order))
                order = order[-k:] + order[:-k]
        if len(found) == ways:
            final = [addrs[p] for p in found]
            if _verify_behavioral(oracle, target, final, level):
                budget.close(True)
                return EvictionSet(addrs=tuple(final), level=level, target=target), stats
    budget.close(False)
    return None, stats


# ------------------------------------------------------------------- binary search


def binary_search_prune(
    oracle: AttackOracle,
    target: VirtAddr,
    candidates: CandidateSet,
    config: PruneConfig | None = None,
    rng: random.Random | None = None,
    level: Level = Level.LLC,
) -> tuple[EvictionSet | None, PruneStats]:
    """Find one congruent address per bisection of the list's tipping point.

    The lower bound restarts at i-1 each iteration (positions below i hold
    already-found congruent addresses); the upper bound is never reset, since
    swapping keeps the first UB positions a superset of a full eviction set.
    A post-iteration check catches false-positive tests: the upper bound is
    then grown by a large stride until the prefix evicts again, and the
    bisection restarts.
    """
    cfg = config or PruneConfig()
    rng = rng or random.Random(0)
    ways = oracle.geometry.shape(level).ways
    stats = PruneStats(algorithm="bins")
    budget = _Budget(oracle, cfg.resolved_time_limit_ms(candidates.filtered), stats)
    addrs = candidates.addrs
    n_total = len(addrs)
    if n_total < ways:
        budget.close(False)
        return None, stats
    relevant_all = [int(p) for p in _relevant_positions(oracle, target, candidates, level)]
    pas_all = candidates.pas()
    pa_of = {p: int(pas_all[p]) for p in relevant_all}
    if level != Level.LLC:
        oracle.set_hygiene(list(pa_of.values()), n_total)

    for attempt in range(1, cfg.max_attempts + 1):
        stats.attempts = attempt
        if budget.expired():
            break
        order = _shuffled(n_total, rng)
        rel_ranks = np.nonzero(np.isin(np.asarray(order), np.asarray(relevant_all, dtype=int)))[0].tolist()
        rel_rank_set = set(rel_ranks)

        def test_prefix(n: int) -> bool:
            if cfg.record_tests:
                stats.test_lengths.append(n)
            hi = bisect_left(rel_ranks, n)
            chosen = [pa_of[order[r]] for r in rel_ranks[:hi]]
            return oracle.eviction_run(target, chosen, n, level, parallel=True, pas=True)

        def swap_ranks(ra: int, rb: int) -> None:
            if ra == rb:
                return
            a_rel, b_rel = ra in rel_rank_set, rb in rel_rank_set
            order[ra], order[rb] = order[rb], order[ra]
            if a_rel != b_rel:
                if a_rel:
                    rel_ranks.pop(bisect_left(rel_ranks, ra))
                    rel_rank_set.discard(ra)
                    insort(rel_ranks, rb)
                    rel_rank_set.add(rb)
                else:
                    rel_ranks.pop(bisect_left(rel_ranks, rb))
                    rel_rank_set.discard(rb)
                    insort(rel_ranks, ra)
                    rel_rank_set.add(ra)

        ub = n_total
        backtracks = 0
        dead = False
        i = 1
        while i <= ways and not dead:
            lb = i - 1
            confirmed_at_ub = False
            while ub - lb != 1:
                if budget.expired():
                    dead = True
                    break
                n = (lb + ub) // 2
                if test_prefix(n):
                    ub = n
                    confirmed_at_ub = True
                else:
                    lb = n
                    confirmed_at_ub = ub != n and confirmed_at_ub
            if dead:
                break
            if not confirmed_at_ub and not test_prefix(ub):
                # False positive earlier shrank UB below the tipping point.
                stride = cfg.backtrack_stride or max(8, n_total // 16)
                recovered = False
                while backtracks < cfg.max_backtracks and not budget.expired():
                    backtracks += 1
                    stats.backtracks += 1
                    ub = min(n_total, ub + stride)
                    stride *= 2
                    if test_prefix(ub):
                        recovered = True
                        break
                    if ub == n_total:
                        break
                if not recovered:
                    dead = True
                    break
                continue  # redo this iteration's bisection with the recovered UB
            swap_ranks(i - 1, ub - 1)
            i += 1
        if dead or i <= ways:
            continue
        final = [addrs[order[r]] for r in range(ways)]
        if _verify_behavioral(oracle, target, final, level):
            budget.close(True)
            oracle.clear_hygiene()
            return EvictionSet(addrs=tuple(final), level=level, target=target), stats
    budget.close(False)
    oracle.clear_hygiene()
    return None, stats


ALGORITHMS = ("gt", "gtop", "ps", "psop", "bins")


def prune_with(
    algorithm: str,
    oracle: AttackOracle,
    target: VirtAddr,
    candidates: CandidateSet,
    config: PruneConfig | None = None,
    rng: random.Random | None = None,
    level: Level = Level.LLC,
) -> tuple[EvictionSet | None, PruneStats]:
    cfg = config or PruneConfig()
    if algorithm == "gt":
        cfg = _with(cfg, early_termination=True)
        return group_test_prune(oracle, target, candidates, cfg, rng, level)
    if algorithm == "gtop":
        cfg = _with(cfg, early_termination=False)
        return group_test_prune(oracle, target, candidates, cfg, rng, level)
    if algorithm == "ps":
        cfg = _with(cfg, recharge=False)
        return prime_scope_prune(oracle, target, candidates, cfg, rng, level)
    if algorithm == "psop":
        cfg = _with(cfg, recharge=True)
        return prime_scope_prune(oracle, target, candidates, cfg, rng, level)
    if algorithm == "bins":
        return binary_search_prune(oracle, target, candidates, cfg, rng, level)
    raise ValueError(f"unknown algorithm {algorithm!r}; known: {ALGORITHMS}")


def _with(cfg: PruneConfig, **kw) -> PruneConfig:
    d = {**cfg.__dict__}
    d.update(kw)
    return PruneConfig(**d)


# --------------------------------------------------------------- candidate filtering


def filter_with_l2_set(
    oracle: AttackOracle, l2_evset: EvictionSet, candidates: CandidateSet
) -> CandidateSet:
    """Keep only candidates the L2 eviction set evicts.

    Per candidate: load it, traverse the L2 set, and time a re-access. With
    index bits of the L2 inside the LLC/SF index bits, surviving the
    traversal proves non-congruence at every shared level too.
    """
    lat = oracle.latency
    machine = oracle.machine
    rounds = oracle.rounds_for(Level.L2)
    w_l2 = oracle.geometry.shape(Level.L2).ways
    step = (
        lat.memory
        + lat.pipeline
        + rounds * lat.batch_cost(w_l2, lat.l2_hit)
        + lat.l1_hit
        + lat.pipeline
    )
    target_key = oracle.level_key(l2_evset.target, Level.L2)

    if not oracle.fast_paths:
        kept = []
        for va in candidates.addrs:
            machine.access(0, oracle.translate(va))
            for _ in range(rounds):
                for ev in l2_evset.addrs:
                    machine.access(0, oracle.translate(ev))
            machine.advance(step)
            oracle.accesses += 2 + rounds * w_l2
            lvl = machine.hit_level(0, oracle.translate(va))
            if lvl not in ("l1", "l2"):
                kept.append(va)
        return CandidateSet(kept, candidates.page_offset, candidates.space, filtered=True)

    # Engine fast path: the traversal outcome is candidate-L2-congruence. A
    # background arrival that back-invalidates a traversal line masks the
    # eviction for the one candidate under test at that moment, dropping it.
    import numpy as np

    n = len(candidates)
    t0 = machine.clock
    machine.advance(n * step)
    oracle.accesses += n * (2 + rounds * w_l2)
    keep = candidates.level_keys(oracle.geometry, Level.L2) == target_key
    evset_pairs = {machine.pair_of(oracle.translate(ev)) for ev in l2_evset.addrs}
    hits: list[int] = []
    for pair in evset_pairs:
        machine.sync_pair(*pair, machine.clock, collect=hits)
    for t in hits:
        k = (t - t0) // step
        if 0 <= k < n:
            keep[k] = False
    kept = [candidates.addrs[int(p)] for p in np.nonzero(keep)[0]]
    return CandidateSet(kept, candidates.page_offset, candidates.space, filtered=True)


def l2_filter(
    oracle: AttackOracle,
    target: VirtAddr,
    candidates: CandidateSet,
    config: PruneConfig | None = None,
    rng: random.Random | None = None,
) -> tuple[CandidateSet, EvictionSet]:
    """Construct an L2 eviction set for the target and filter the pool with it.

    The L2 set is pruned from a pool slice sized for the L2's own uncertainty
    rather than the full pool, which is sized for the shared levels.
    """
    cfg = config or PruneConfig()
    geo = oracle.geometry
    slice_n = 3 * uncertainty(geo).l2_sets * geo.shape(Level.L2).ways
    work = candidates if len(candidates) <= slice_n else candidates.subset(range(slice_n))
    l2_evset, stats = binary_search_prune(oracle, target, work, cfg, rng, level=Level.L2)
    if l2_evset is None:
        raise FilterError(f"L2 eviction-set construction failed after {stats.attempts} attempts")
    return filter_with_l2_set(oracle, l2_evset, candidates), l2_evset


# ----------------------------------------------------------------- SF extension


def _sf_backinval_check(oracle: AttackOracle, target: VirtAddr, lines) -> bool:
    """Flush-clean check that `lines` back-invalidate a privately held target."""
    for va in (target, *lines):
        oracle.flush(va)
    oracle.probe_access(target)
    oracle.parallel_traverse(list(lines))
    evicted, _ = oracle.probe_access(target)
    return evicted


def extend_llc_to_sf(
    oracle: AttackOracle,
    llc_evset: EvictionSet,
    candidates: CandidateSet,
    config: PruneConfig | None = None,
    deadline: int | None = None,
) -> EvictionSet | None:
    """Grow a minimal LLC eviction set to snoop-filter associativity.

    Additional congruent addresses are found with LLC-level tests (W_llc - 1
    known lines plus the candidate form exactly one set's worth of shared
    insertions); the completed set must then demonstrably back-invalidate a
    privately held target.
    """
    geo = oracle.geometry
    w_sf = geo.shape(Level.SF).ways
    machine = oracle.machine
    lat = oracle.latency
    target = llc_evset.target
    found = list(llc_evset.addrs)
    base = found[: len(found) - 1]
    used = set(found) | {target}
    relevant = set(_relevant_positions(oracle, target, candidates, Level.LLC))
    step = lat.batch_cost(len(base) + 1) + lat.llc_hit + 2 * lat.pipeline + lat.memory
    pair = machine.pair_of(oracle.translate(target))
    addrs = candidates.addrs

    pos = 0
    while len(found) < w_sf:
        hit = None
        while pos < len(addrs):
            if deadline is not None and machine.clock >= deadline:
                return None
            va = addrs[pos]
            if va in used:
                pos += 1
                continue
            if pos in relevant:
                if oracle.eviction_run(target, base + [va], len(base) + 1, Level.LLC, parallel=True):
                    hit = va
                    pos += 1
                    break
                pos += 1
                continue
            # Skip a run of candidates that cannot map to the target's set.
            j = pos
            while j < len(addrs) and j not in relevant:
                j += 1
            run = j - pos
            horizon = machine.clock + run * step
            ev = machine.next_background_event(*pair, horizon)
            if ev is not None:
                k = max(1, min(run, -(-(ev - machine.clock) // step)))
                machine.advance(k * step)
                oracle.accesses += k * (len(base) + 2)
                machine.sync_pair(*pair)
                if machine.hit_level(0, oracle.translate(target)) not in ("llc", "l1", "l2"):
                    hit = addrs[pos + k - 1]  # noise eviction misattributed
                    pos += k
                    break
                pos += k
                continue
            machine.advance(run * step)
            oracle.accesses += run * (len(base) + 2)
            pos = j
        if hit is None:
            return None
        found.append(hit)
        used.add(hit)
    for _ in range(2):
        if _sf_backinval_check(oracle, target, found):
            return EvictionSet(addrs=tuple(found), level=Level.SF, target=target)
    return None


# ------------------------------------------------------------------ per-target pipeline


def build_sf_set(
    oracle: AttackOracle,
    target: VirtAddr,
    pool: CandidateSet,
    algorithm: str,
    config: PruneConfig | None = None,
    rng: random.Random | None = None,
    filtering: bool = True,
) -> tuple[EvictionSet | None, PruneStats]:
    """Filter (optionally), prune at the LLC, and extend to an SF eviction set."""
    cfg = config or PruneConfig()
    rng = rng or random.Random(0)
    t0, a0 = oracle.clock, oracle.accesses
    limit_ms = cfg.resolved_time_limit_ms(filtering or pool.filtered)
    deadline = t0 + int(limit_ms * oracle.machine.config.cycles_per_ms)

    work = pool
    if filtering and not pool.filtered:
        try:
            work, _ = l2_filter(oracle, target, pool, cfg, rng)
        except FilterError:
            stats = PruneStats(algorithm=algorithm, attempts=1)
            stats.duration_cycles = oracle.clock - t0
            stats.accesses = oracle.accesses - a0
            return None, stats

    remaining_ms = max(0.1, oracle.ms(deadline - oracle.clock))
    llc_set, stats = prune_with(
        algorithm, oracle, target, work, _with(cfg, time_limit_ms=remaining_ms), rng, Level.LLC
    )
    sf_set = None
    if llc_set is not None:
        sf_set = extend_llc_to_sf(oracle, llc_set, work, cfg, deadline=deadline)
    stats.success = sf_set is not None
    stats.duration_cycles = oracle.clock - t0
    stats.accesses = oracle.accesses - a0
    return sf_set, stats


# ------------------------------------------------------------------- bulk driver


@dataclass
class BulkStats:
    scope: str
    algorithm: str
    targets_attempted: int = 0
    built: int = 0
    filterings: int = 0
    duration_cycles: int = 0
    per_target: list[PruneStats] = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return self.built / self.targets_attempted if self.targets_attempted else 0.0


BULK_SCOPES = ("single", "page-offset", "whole-sys")


def _build_from_pool(
    oracle: AttackOracle,
    pool: CandidateSet,
    algorithm: str,
    cfg: PruneConfig,
    rng: random.Random,
    bulk: BulkStats,
    out: list[EvictionSet],
    max_sets: int | None,
) -> None:
    """Iteratively pick targets from the pool and build sets until exhausted.

    After each successful construction, pool addresses the new set covers are
    probed against it and dropped, so no later target rebuilds the same set.
    """
    import numpy as np

    geo = oracle.geometry
    lat = oracle.latency
    w_sf = geo.shape(Level.SF).ways
    keys = pool.level_keys(geo, Level.LLC)
    alive = np.arange(len(pool.addrs))
    while len(alive) > w_sf and (max_sets is None or bulk.built < max_sets):
        tpos, rest = int(alive[0]), alive[1:]
        target = pool.addrs[tpos]
        sub = pool.subset(rest)
        bulk.targets_attempted += 1
        sf_set, stats = build_sf_set(oracle, target, sub, algorithm, cfg, rng, filtering=False)
        bulk.per_target.append(stats)
        if sf_set is None:
            alive = rest  # cannot cover this set; move on
            continue
        out.append(sf_set)
        bulk.built += 1
        # Probe the remaining pool against the fresh set and drop covered lines.
        oracle.machine.advance(
            lat.batch_cost(len(sf_set.addrs)) + len(rest) * (lat.l1_hit + lat.pipeline)
        )
        oracle.accesses += len(sf_set.addrs) + len(rest)
        alive = rest[keys[rest] != keys[tpos]]


def build_bulk(
    oracle: AttackOracle,
    scope: str,
    algorithm: str,
    config: PruneConfig | None = None,
    rng: random.Random | None = None,
    page_offset: int | None = None,
    multiplier: int = 3,
    filtering: bool = True,
    max_sets: int | None = None,
) -> tuple[list[EvictionSet], BulkStats]:
    """Build eviction sets for one set, one page offset, or the whole system.

    Page-offset scope filters once per L2 congruence class and reuses each
    filtered pool for every set in the class. Whole-system scope builds its
    L2 sets at page offset 0 only and derives the other offsets' filtered
    pools by shifting candidate addresses within their pages.
    """
    from .addresses import gen_candidates

    cfg = config or PruneConfig()
    rng = rng or random.Random(0)
    if scope not in BULK_SCOPES:
        raise ValueError(f"unknown scope {scope!r}; known: {BULK_SCOPES}")
    geo = oracle.geometry
    u = uncertainty(geo)
    w_sf = geo.shape(Level.SF).ways
    pool_n = multiplier * u.llc_sets * w_sf
    bulk = BulkStats(scope=scope, algorithm=algorithm)
    out: list[EvictionSet] = []
    t0 = oracle.clock

    if scope == "single":
        offset = page_offset if page_offset is not None else rng.randrange(64) * 64
        pool = gen_candidates(oracle.space, offset, pool_n)
        target, rest = pool.addrs[0], pool.addrs[1:]
        sub = CandidateSet(rest, offset, oracle.space)
        bulk.targets_attempted = 1
        sf_set, stats = build_sf_set(oracle, target, sub, algorithm, cfg, rng, filtering=filtering)
        bulk.per_target.append(stats)
        if filtering:
            bulk.filterings = 1
        if sf_set is not None:
            out.append(sf_set)
            bulk.built = 1
        bulk.duration_cycles = oracle.clock - t0
        return out, bulk

    if scope == "page-offset":
        offset = page_offset if page_offset is not None else rng.randrange(64) * 64
        pool = gen_candidates(oracle.space, offset, pool_n)
        limit = max_sets if max_sets is not None else u.llc_sets
        if not filtering:
            _build_from_pool(oracle, pool, algorithm, cfg, rng, bulk, out, limit)
        else:
            for class_pool, _ in _l2_classes(oracle, pool, cfg, rng, bulk):
                _build_from_pool(oracle, class_pool, algorithm, cfg, rng, bulk, out, limit)
                if bulk.built >= limit:
                    break
        bulk.duration_cycles = oracle.clock - t0
        return out, bulk

    # whole-sys: filter at offset 0, shift the filtered pools everywhere else.
    pool0 = gen_candidates(oracle.space, 0, pool_n)
    limit = max_sets if max_sets is not None else u.llc_sets * 64
    classes = list(_l2_classes(oracle, pool0, cfg, rng, bulk)) if filtering else None
    for delta in range(0, 4096, 64):
        if bulk.built >= limit:
            break
        if not filtering:
            pool = pool0 if delta == 0 else pool0.shifted(delta)
            _build_from_pool(oracle, pool, algorithm, cfg, rng, bulk, out, limit)
            continue
        for class_pool, _ in classes:
            shifted = class_pool if delta == 0 else class_pool.shifted(delta)
            _build_from_pool(oracle, shifted, algorithm, cfg, rng, bulk, out, limit)
            if bulk.built >= limit:
                break
    bulk.duration_cycles = oracle.clock - t0
    return out, bulk


def _l2_classes(oracle, pool: CandidateSet, cfg: PruneConfig, rng, bulk: BulkStats):
    """Split a pool into L2-congruence classes, one filtering execution each.

    A representative whose L2 eviction set cannot be built (noise) is dropped
    and the class retried with the next candidate; only successful filtering
    executions are counted.
    """
    u_l2 = uncertainty(oracle.geometry).l2_sets
    w_l2 = oracle.geometry.shape(Level.L2).ways
    remaining = pool
    classes_done = 0
    failures = 0
    while classes_done < u_l2 and len(remaining) >= w_l2 and failures < 4 * u_l2:
        rep = remaining.addrs[0]
        try:
            class_pool, l2_evset = l2_filter(oracle, rep, remaining, cfg, rng)
        except FilterError:
            failures += 1
            remaining = CandidateSet(
                remaining.addrs[1:], pool.page_offset, pool.space, validate=False
            )
            continue
        bulk.filterings += 1
        kept = set(class_pool.addrs)
        rest = [va for va in remaining.addrs if va not in kept]
        yield class_pool, l2_evset
        classes_done += 1
        if not rest:
            return
        remaining = CandidateSet(rest, pool.page_offset, pool.space, validate=False)


def estimate_bulk_time(per_target: list[PruneStats], n_sets: int) -> float:
    """Projected cycles for n_sets constructions: n_sets * mean time / success rate."""
    if not per_target:
        raise EstimateError("no construction statistics to extrapolate from")
    successes = sum(1 for s in per_target if s.success)
    if successes == 0:
        raise EstimateError("success rate is zero; estimate undefined")
    t_avg = sum(s.duration_cycles for s in per_target) / len(per_target)
    return n_sets * t_avg / (successes / len(per_target))
