"""Timed-access cost model and the attack-facing oracle.

`AttackOracle` is the only interface pruning, probing and scanning code may
use: timed single accesses, helper-assisted shared loads, flushes, and the
two eviction-test primitives. Ground-truth congruence and residency live on
the machine and are reserved for tests and drivers.

The oracle also hosts the engine fast path: for a traversal over a candidate
pool, only accesses mapping to the probed structure set can change the test
outcome, so the engine may apply just those while charging time and access
counts for the whole traversal. `fast_paths=False` simulates every access and
is cross-checked against the fast path in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass

from .addresses import CandidateSet, VirtAddr
from .geometry import CacheGeometry, Level
from .machine import (
    HIT_L1,
    HIT_L2,
    HIT_LLC,
    HIT_MEM,
    MAIN_CORE,
    MachineState,
)


class LatencyError(ValueError):
    """Ill-formed latency model."""


@dataclass(frozen=True)
class LatencyModel:
    """Simulated-cycle costs. Only orderings and ratios are meaningful."""

    l1_hit: int = 4
    l2_hit: int = 14
    llc_hit: int = 60
    memory: int = 200
    mlp_width: int = 10
    pipeline: int = 10
    parallel_overhead: int = 24
    flush_cost: int = 24

    def __post_init__(self) -> None:
        if not self.l1_hit < self.l2_hit < self.llc_hit < self.memory:
            raise LatencyError("latencies must satisfy L1 < L2 < LLC < memory")
        if self.mlp_width < 1:
            raise LatencyError("mlp_width must be >= 1")

    def latency(self, level: str) -> int:
        return {HIT_L1: self.l1_hit, HIT_L2: self.l2_hit, HIT_LLC: self.llc_hit, HIT_MEM: self.memory}[level]

    @property
    def cached_threshold(self) -> int:
        """Splits LLC-resident from evicted-to-memory."""
        return (self.llc_hit + self.memory) // 2

    @property
    def private_threshold(self) -> int:
        """Splits privately cached from back-invalidated (LLC or memory)."""
        return (self.l2_hit + self.llc_hit) // 2

    def threshold_for(self, level: Level) -> int:
        return self.cached_threshold if level == Level.LLC else self.private_threshold

    def batch_cost(self, n: int, per_access: int | None = None) -> int:
        """Cost of n overlapped accesses (full miss latency unless told otherwise)."""
        per = self.memory if per_access is None else per_access
        return -(-n // self.mlp_width) * per + self.parallel_overhead


@dataclass(frozen=True)
class TimedResult:
    latency: int
    cached: bool

    @property
    def classified(self) -> str:
        return "cached-fast" if self.cached else "evicted-slow"


class AttackOracle:
    """Attack algorithms' window onto one machine through one address space."""

    def __init__(
        self,
        machine: MachineState,
        space,
        latency: LatencyModel | None = None,
        fast_paths: bool = True,
    ):
        self.machine = machine
        self.space = space
        self.latency = latency or LatencyModel()
        self.fast_paths = fast_paths
        self.accesses = 0
        self._hygiene = None
        self._hygiene_total = 0

    # ------------------------------------------------------------- plumbing

    @property
    def geometry(self) -> CacheGeometry:
        return self.machine.geometry

    @property
    def clock(self) -> int:
        return self.machine.clock

    def ms(self, cycles: int) -> float:
        return cycles / self.machine.config.cycles_per_ms

    def translate(self, va: VirtAddr) -> int:
        return self.space.translate(va)

    def level_key(self, va: VirtAddr, level: Level) -> int:
        """Engine congruence key of an address at a level (matches pool key arrays)."""
        geo = self.geometry
        pa = self.translate(va)
        idx = geo.set_of(pa, level)
        if level in (Level.LLC, Level.SF):
            return geo.slice_of(pa) * geo.shape(level).sets + idx
        return idx

    def relevant_positions(self, target: VirtAddr, pool: CandidateSet, level: Level):
        """Pool positions that map to the target's set at the given level."""
        return pool.matching_positions(self.geometry, level, self.level_key(target, level))

    def rounds_for(self, level: Level) -> int:
        """Traversal repetitions needed for a reliable eviction test.

        One ordered pass is exact under LRU; pseudo-LRU and random victim
        selection need repetition to age an untouched line out.
        """
        policy = self.machine.config.policy_for(level)
        return 1 if policy == "lru" else 2

    # ------------------------------------------------------------ primitives

    def timed_access(self, va: VirtAddr) -> TimedResult:
        """One access by the main core, charged its modeled latency."""
        res = self.machine.access(MAIN_CORE, self.translate(va))
        lat = self.latency.latency(res.level)
        self.machine.advance(lat + self.latency.pipeline)
        self.accesses += 1
        return TimedResult(latency=lat, cached=lat < self.latency.cached_threshold)

    def probe_access(self, va: VirtAddr) -> tuple[bool, int]:
        """Timed access classified against the private-residency threshold."""
        res = self.machine.access(MAIN_CORE, self.translate(va))
        lat = self.latency.latency(res.level)
        self.machine.advance(lat + self.latency.pipeline)
        self.accesses += 1
        return lat > self.latency.private_threshold, lat

    def make_shared(self, va: VirtAddr) -> None:
        res = self.machine.make_shared(self.translate(va))
        self.machine.advance(self.latency.latency(res.level) + self.latency.pipeline)
        self.accesses += 1

    def flush(self, va: VirtAddr) -> None:
        self.machine.flush(self.translate(va))
        self.machine.advance(self.latency.flush_cost)
        self.accesses += 1

    def sequential_traverse(self, vas, charge_misses: bool = False) -> int:
        """Pointer-chase style serialized accesses; returns elapsed cycles."""
        t0 = self.machine.clock
        for va in vas:
            res = self.machine.access(MAIN_CORE, self.translate(va))
            per = self.latency.memory if charge_misses else self.latency.latency(res.level)
            self.machine.advance(per + self.latency.pipeline)
        self.accesses += len(vas)
        return self.machine.clock - t0

    def parallel_traverse(self, vas) -> int:
        """One overlapped pass over `vas`; cost follows the slowest access."""
        if not vas:
            return 0
        worst = HIT_L1
        order = (HIT_L1, HIT_L2, HIT_LLC, HIT_MEM)
        for va in vas:
            res = self.machine.access(MAIN_CORE, self.translate(va))
            if order.index(res.level) > order.index(worst):
                worst = res.level
        cost = self.latency.batch_cost(len(vas), self.latency.latency(worst))
        self.machine.advance(cost)
        self.accesses += len(vas)
        return cost

    # -------------------------------------------------------- eviction tests

    def _load_target(self, va: VirtAddr, level: Level) -> None:
        if level == Level.LLC:
            self.make_shared(va)
        else:
            res = self.machine.access(MAIN_CORE, self.translate(va))
            self.machine.advance(self.latency.latency(res.level) + self.latency.pipeline)
            self.accesses += 1

    def _apply_traversal(self, chosen_pas, level: Level) -> None:
        if level == Level.LLC:
            for pa in chosen_pas:
                self.machine.make_shared(pa)
        else:
            for pa in chosen_pas:
                self.machine.access(MAIN_CORE, pa)

    def eviction_run(
        self,
        target: VirtAddr,
        chosen,
        total: int,
        level: Level,
        parallel: bool,
        rounds: int | None = None,
        pas: bool = False,
    ) -> bool:
        """Core eviction test: load target, traverse, probe.

        `chosen` holds the traversal accesses the engine actually applies
        (virtual, or already-translated when `pas` is set); `total` is the
        semantic traversal length charged in time and counts. Private-level
        tests (L2, SF) flush the tested lines first so every test observes
        the traversal from a quiescent state; flushes are charged in time
        but are not memory accesses.
        """
        rounds = self.rounds_for(level) if rounds is None else rounds
        lat = self.latency
        chosen_pas = chosen if pas else [self.translate(va) for va in chosen]
        target_pa = self.translate(target)
        if level != Level.LLC:
            # Reset every pool line the attacker may have loaded, so that the
            # test observes only its own traversal. Charged as a pool-wide
            # flush pass.
            hygiene = self._hygiene if self._hygiene is not None else chosen_pas
            for pa in hygiene:
                self.machine.flush(pa)
            self.machine.flush(target_pa)
            self.machine.advance((self._hygiene_total or total) * lat.flush_cost + lat.flush_cost)
        self._load_target(target, level)
        for _ in range(rounds):
            cost = lat.batch_cost(total) if parallel else total * lat.memory
            self.machine.advance(cost)
            self._apply_traversal(chosen_pas, level)
        self.accesses += total * rounds
        res = self.machine.access(MAIN_CORE, target_pa)
        probe_lat = lat.latency(res.level)
        self.machine.advance(probe_lat + lat.pipeline)
        self.accesses += 1
        return probe_lat > lat.threshold_for(level)

    def _chosen_for(self, target: VirtAddr, addrs, n: int, level: Level):
        """(chosen, total) for a prefix-n test over `addrs`."""
        seq = addrs.addrs if isinstance(addrs, CandidateSet) else list(addrs)
        n = min(n, len(seq))
        if self.fast_paths and isinstance(addrs, CandidateSet):
            relevant = self.relevant_positions(target, addrs, level)
            return [seq[p] for p in relevant if p < n], n
        return seq[:n], n

    def set_hygiene(self, pas, total: int) -> None:
        """Physical lines flushed before each private-level eviction test
        (engine view), with the semantic pool size charged for the pass."""
        self._hygiene = pas
        self._hygiene_total = total

    def clear_hygiene(self) -> None:
        self._hygiene = None
        self._hygiene_total = 0

    def test_eviction_seq(self, target: VirtAddr, addrs, n: int, level: Level = Level.LLC) -> bool:
        """Serialized eviction test: each candidate charged a full miss."""
        if n > (len(addrs.addrs) if isinstance(addrs, CandidateSet) else len(addrs)):
            raise ValueError("n exceeds candidate list length")
        chosen, total = self._chosen_for(target, addrs, n, level)
        return self.eviction_run(target, chosen, total, level, parallel=False)

    def test_eviction_par(self, target: VirtAddr, addrs, n: int, level: Level = Level.LLC) -> bool:
        """Overlapped eviction test: mlp_width candidates in flight."""
        if n > (len(addrs.addrs) if isinstance(addrs, CandidateSet) else len(addrs)):
            raise ValueError("n exceeds candidate list length")
        chosen, total = self._chosen_for(target, addrs, n, level)
        return self.eviction_run(target, chosen, total, level, parallel=True)
