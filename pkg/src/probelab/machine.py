"""Deterministic non-inclusive cache hierarchy simulator.

Models per-core L1/L2, a sliced last-level cache, and a sliced snoop filter
with the coherence rules relevant to cross-core eviction attacks:

* A miss fills the requester's private caches in Exclusive state and
  allocates a snoop-filter entry; the line is NOT put in the LLC.
* Evicting a snoop-filter entry back-invalidates the private line, which is
  then inserted into the LLC with probability ``p_reuse`` (reuse predictor).
* A second core touching a privately held line turns it shared: the line
  moves into the LLC and its snoop-filter entry is freed.
* Evicting an LLC line invalidates any private shared copies.

State is sparse: a cache set materializes the first time it is touched.
Background activity (tenant noise, the victim's code fetches, a covert
sender) is modeled as per-(slice, set) event streams that are replayed
lazily, in timestamp order, the moment a line mapping to that set is next
touched. Set-indexed caches make this exact: the outcome of an access can
only depend on the state of the sets that the accessed line maps to.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Iterable

from .addresses import AddressSpace, VirtAddr
from .geometry import CacheGeometry, Level
from .replacement import make_policy

MAIN_CORE = 0
HELPER_CORE = 1
VICTIM_CORE = 2
NOISE_CORE = 3

# Hit levels as seen by the timing model.
HIT_L1 = "l1"
HIT_L2 = "l2"
HIT_LLC = "llc"
HIT_MEM = "mem"


def mix64(*parts: int) -> int:
    """Deterministic 64-bit mix of integers (stable across processes)."""
    h = 0x9E3779B97F4A7C15
    for p in parts:
        h ^= (p + 0x9E3779B97F4A7C15 + (h << 6) + (h >> 2)) & 0xFFFFFFFFFFFFFFFF
        h = (h * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        h ^= h >> 27
    return h


@dataclass
class MachineConfig:
    """Knobs of the simulated machine that are not pure geometry."""

    seed: int = 0
    n_cores: int = 4
    clock_ghz: float = 2.0
    p_reuse: float = 1.0
    l1_policy: str = "lru"
    l2_policy: str = "tree-plru"
    llc_policy: str = "lru"
    sf_policy: str = "lru"
    debug_checks: bool = False
    log_events: bool = False

    def policy_for(self, level: Level) -> str:
        return {
            Level.L1: self.l1_policy,
            Level.L2: self.l2_policy,
            Level.LLC: self.llc_policy,
            Level.SF: self.sf_policy,
        }[level]

    @property
    def cycles_per_ms(self) -> float:
        return self.clock_ghz * 1e6


class SetState:
    """One cache/directory set: way array plus replacement automaton."""

    __slots__ = ("ways", "where", "policy", "owner")

    def __init__(self, ways: int, policy_kind: str, rng: random.Random):
        self.ways: list[int | None] = [None] * ways
        self.where: dict[int, int] = {}
        self.policy = make_policy(policy_kind, ways, rng)
        self.owner: dict[int, int] = {}

    def lookup(self, line: int) -> int | None:
        return self.where.get(line)

    def touch(self, line: int) -> None:
        self.policy.touch(self.where[line])

    def insert(self, line: int) -> int | None:
        """Place `line` (touch if resident), returning any evicted line."""
        if line in self.where:
            self.touch(line)
            return None
        for way, occ in enumerate(self.ways):
            if occ is None:
                self._place(line, way)
                return None
        way = self.policy.victim()
        victim = self.ways[way]
        del self.where[victim]
        self.owner.pop(victim, None)
        self._place(line, way)
        return victim

    def _place(self, line: int, way: int) -> None:
        self.ways[way] = line
        self.where[line] = way
        self.policy.touch(way)

    def remove(self, line: int) -> bool:
        way = self.where.pop(line, None)
        self.owner.pop(line, None)
        if way is None:
            return False
        self.ways[way] = None
        self.policy.invalidate(way)
        return True

    def lines(self) -> list[int]:
        return [l for l in self.ways if l is not None]


@dataclass
class AccessResult:
    level: str
    evictions: list[tuple[str, int]] = field(default_factory=list)

    @property
    def evicted_any(self) -> bool:
        return bool(self.evictions)


class EventStream:
    """Background access source bound to one shared (slice, set) pair."""

    core = NOISE_CORE

    def peek(self, upto: int) -> int | None:
        """Timestamp of the next pending event at or before `upto`, if any."""
        raise NotImplementedError

    def pop(self) -> tuple[int, int, str]:
        """Consume the next event: (time, pa, kind)."""
        raise NotImplementedError


class MachineState:
    """Full simulated hierarchy with a monotone cycle clock."""

    def __init__(
        self,
        geometry: CacheGeometry,
        config: MachineConfig | None = None,
    ):
        self.geometry = geometry
        self.config = config or MachineConfig()
        self.clock = 0
        self.sets: dict[tuple, SetState] = {}
        self.streams: dict[tuple[int, int], list[EventStream]] = {}
        self.noise_model = None  # set by noise.attach
        self.sim_ops = 0
        self.core_accesses = [0] * self.config.n_cores
        self.event_log: list[tuple] = []
        self._reuse_rng = random.Random(mix64(self.config.seed, 0xBEEF))
        self._syncing: set[tuple[int, int]] = set()
        self._line_meta: dict[int, tuple[int, int, int, int]] = {}
        self._hold_l1: dict[int, int] = {}
        self._hold_l2: dict[int, int] = {}

    # ------------------------------------------------------------------ sets

    _LEVEL_IDS = {Level.L1: 1, Level.L2: 2, Level.LLC: 3, Level.SF: 4}

    def _set_state(self, level: Level, owner: int, index: int) -> SetState:
        key = (level, owner, index)
        st = self.sets.get(key)
        if st is None:
            shape = self.geometry.shape(level)
            rng = random.Random(mix64(self.config.seed, self._LEVEL_IDS[level], owner, index))
            st = SetState(shape.ways, self.config.policy_for(level), rng)
            self.sets[key] = st
            if level == Level.LLC and self.noise_model is not None:
                self.noise_model.maybe_spawn(self, owner, index)
        return st

    def line_meta(self, pa: int) -> tuple[int, int, int, int]:
        """Cached (slice, shared set, l1 set, l2 set) of a line."""
        line = pa >> 6
        meta = self._line_meta.get(line)
        if meta is None:
            geo = self.geometry
            meta = (
                geo.slice_of(pa),
                geo.set_of(pa, Level.LLC),
                geo.set_of(pa, Level.L1),
                geo.set_of(pa, Level.L2),
            )
            self._line_meta[line] = meta
        return meta

    def pair_of(self, pa: int) -> tuple[int, int]:
        """(slice, set) of the shared structures a PA maps to."""
        meta = self.line_meta(pa)
        return meta[0], meta[1]

    def shared_sets(self, pa: int) -> tuple[SetState, SetState]:
        sl, st = self.pair_of(pa)
        return self._set_state(Level.SF, sl, st), self._set_state(Level.LLC, sl, st)

    # --------------------------------------------------------------- streams

    def register_stream(self, sl: int, st: int, stream: EventStream) -> None:
        self.streams.setdefault((sl, st), []).append(stream)
        # Materialize the sets so future touches replay through sync.
        self._set_state(Level.SF, sl, st)
        self._set_state(Level.LLC, sl, st)

    def next_background_event(self, sl: int, st: int, horizon: int) -> int | None:
        times = [
            t for s in self.streams.get((sl, st), ()) if (t := s.peek(horizon)) is not None
        ]
        return min(times) if times else None

    def sync_pair(self, sl: int, st: int, upto: int | None = None, collect: list | None = None) -> None:
        """Replay pending background events for one (slice, set) up to a time."""
        streams = self.streams.get((sl, st))
        if not streams or (sl, st) in self._syncing:
            return
        upto = self.clock if upto is None else upto
        self._syncing.add((sl, st))
        try:
            while True:
                best_t, best_s = None, None
                for s in streams:
                    t = s.peek(upto)
                    if t is not None and (best_t is None or t < best_t):
                        best_t, best_s = t, s
                if best_s is None:
                    break
                t, pa, kind = best_s.pop()
                if collect is not None:
                    collect.append(t)
                if kind == "saturate":
                    self._saturate_pair(sl, st, best_s, t)
                else:
                    self.access(best_s.core, pa, kind=kind, at=t, _sync=False)
        finally:
            self._syncing.discard((sl, st))

    def _saturate_pair(self, sl: int, st: int, stream, t: int) -> None:
        """Collapse a long stretch of noise churn into its steady-state effect.

        After many more foreign insertions than there are ways, the SF and LLC
        sets contain only the most recent noise lines; everything previously
        resident has been evicted (and private copies invalidated).
        """
        sf = self._set_state(Level.SF, sl, st)
        llc = self._set_state(Level.LLC, sl, st)
        for line in sf.lines():
            sf.remove(line)
            self._drop_private(line)
        for line in llc.lines():
            llc.remove(line)
            self._drop_private(line)
        pool = stream.pool()
        for pa in pool[: llc.policy.ways]:
            llc.insert(self.geometry.line_of(pa))
        for pa in pool[llc.policy.ways : llc.policy.ways + sf.policy.ways]:
            line = self.geometry.line_of(pa)
            sf.insert(line)
            sf.owner[line] = stream.core
        if self.config.log_events:
            self.event_log.append((t, stream.core, 0, "saturate", f"{sl}:{st}"))

    # ---------------------------------------------------------------- clock

    def advance(self, cycles: int) -> None:
        self.clock += max(0, int(cycles))

    def ms(self, cycles: int | None = None) -> float:
        return (self.clock if cycles is None else cycles) / self.config.cycles_per_ms

    # --------------------------------------------------------------- access

    def access(
        self,
        core: int,
        pa: int,
        kind: str = "read",
        at: int | None = None,
        _sync: bool = True,
    ) -> AccessResult:
        """One read or code fetch by `core`, applying all coherence transitions.

        `at` stamps background activity without moving the main clock; the
        caller (timing oracle) is responsible for charging attacker time.
        """
        t = self.clock if at is None else at
        line = pa >> 6
        sl, st, l1s, l2s = self.line_meta(pa)
        if _sync:
            self.sync_pair(sl, st, t)
        self.sim_ops += 1
        if core < len(self.core_accesses):
            self.core_accesses[core] += 1

        l1 = self._set_state(Level.L1, core, l1s)
        l2 = self._set_state(Level.L2, core, l2s)
        sf = self._set_state(Level.SF, sl, st)
        llc = self._set_state(Level.LLC, sl, st)

        res = AccessResult(level=HIT_MEM)
        if l1.lookup(line) is not None:
            l1.touch(line)
            res.level = HIT_L1
        elif l2.lookup(line) is not None:
            l2.touch(line)
            self._fill_private(l1, line, core, self._hold_l1)
            res.level = HIT_L2
        elif sf.lookup(line) is not None:
            owner = sf.owner.get(line, core)
            if owner != core and self._privately_resident(owner, line):
                # Second core touches a private line: it becomes shared.
                sf.remove(line)
                self._llc_insert(llc, line, res)
                self._fill_private(l2, line, core, self._hold_l2)
                self._fill_private(l1, line, core, self._hold_l1)
                res.level = HIT_LLC
            else:
                # Stale entry: the private copy was silently dropped. The
                # directory hit does not save the memory fetch.
                sf.touch(line)
                sf.owner[line] = core
                self._fill_private(l2, line, core, self._hold_l2)
                self._fill_private(l1, line, core, self._hold_l1)
                res.level = HIT_MEM
        elif llc.lookup(line) is not None:
            if self._any_other_holder(core, line):
                llc.touch(line)
                self._fill_private(l2, line, core, self._hold_l2)
                self._fill_private(l1, line, core, self._hold_l1)
                res.level = HIT_LLC
            else:
                # Sole requester: the line is granted Exclusive, leaves the
                # LLC, and is tracked by the SF again.
                llc.remove(line)
                victim = sf.insert(line)
                sf.owner[line] = core
                if victim is not None:
                    res.evictions.append(("sf", victim))
                    self._drop_private(victim)
                    if self._reuse_rng.random() < self.config.p_reuse:
                        self._llc_insert(llc, victim, res)
                self._fill_private(l2, line, core, self._hold_l2)
                self._fill_private(l1, line, core, self._hold_l1)
                res.level = HIT_LLC
        else:
            # Cold or fully evicted: private fill in E plus an SF entry.
            victim = sf.insert(line)
            sf.owner[line] = core
            if victim is not None:
                res.evictions.append(("sf", victim))
                self._drop_private(victim)
                if self._reuse_rng.random() < self.config.p_reuse:
                    self._llc_insert(llc, victim, res)
            self._fill_private(l2, line, core, self._hold_l2)
            self._fill_private(l1, line, core, self._hold_l1)
            res.level = HIT_MEM

        if self.config.log_events:
            ev = res.evictions[0] if res.evictions else None
            self.event_log.append(
                (t, core, mix64(pa) & 0xFFFFFFFF, res.level, f"{ev[0]}:{sl}:{st}" if ev else "")
            )
        if self.config.debug_checks:
            self._check_invariants(core, sf, llc, l1, l2)
        return res

    def _llc_insert(self, llc: SetState, line: int, res: AccessResult) -> None:
        victim = llc.insert(line)
        if victim is not None:
            res.evictions.append(("llc", victim))
            self._drop_private(victim)

    def _fill_private(self, setstate: SetState, line: int, core: int, hold: dict) -> None:
        # Private-cache capacity victims are dropped silently (clean lines).
        victim = setstate.insert(line)
        bit = 1 << core
        hold[line] = hold.get(line, 0) | bit
        if victim is not None:
            m = hold.get(victim, 0) & ~bit
            if m:
                hold[victim] = m
            else:
                hold.pop(victim, None)

    def _privately_resident(self, core: int, line: int) -> bool:
        bit = 1 << core
        return bool((self._hold_l1.get(line, 0) | self._hold_l2.get(line, 0)) & bit)

    def _any_other_holder(self, core: int, line: int) -> bool:
        mask = self._hold_l1.get(line, 0) | self._hold_l2.get(line, 0)
        return bool(mask & ~(1 << core))

    def _drop_private(self, line: int) -> None:
        mask = self._hold_l1.pop(line, 0) | self._hold_l2.pop(line, 0)
        if not mask:
            return
        _, _, l1s, l2s = self.line_meta(line << 6)
        core = 0
        while mask:
            if mask & 1:
                st = self.sets.get((Level.L1, core, l1s))
                if st is not None:
                    st.remove(line)
                st = self.sets.get((Level.L2, core, l2s))
                if st is not None:
                    st.remove(line)
            mask >>= 1
            core += 1

    # ------------------------------------------------------------ operations

    def flush(self, pa: int) -> None:
        """clflush semantics: invalidate the line everywhere, no LLC spill."""
        line = pa >> 6
        sl, st, _, _ = self.line_meta(pa)
        self.sync_pair(sl, st)
        self._drop_private(line)
        sf = self.sets.get((Level.SF, sl, st))
        if sf is not None:
            sf.remove(line)
        llc = self.sets.get((Level.LLC, sl, st))
        if llc is not None:
            llc.remove(line)

    def make_shared(self, pa: int, core: int = MAIN_CORE, helper: int = HELPER_CORE) -> AccessResult:
        """Drive a line into shared state: resident in the LLC, untracked by the SF.

        Models the main-plus-helper access pair whose net effect is an LLC
        insertion. The requester's transient private copy is not retained: by
        the time the pair completes, traversal pressure has displaced it.
        Idempotent for lines already in the LLC.
        """
        t = self.clock
        line = pa >> 6
        sl, st, l1s, l2s = self.line_meta(pa)
        self.sync_pair(sl, st, t)
        self.sim_ops += 1
        if core < len(self.core_accesses):
            self.core_accesses[core] += 1
        sf = self._set_state(Level.SF, sl, st)
        llc = self._set_state(Level.LLC, sl, st)
        res = AccessResult(level=HIT_MEM)
        if llc.lookup(line) is not None:
            llc.touch(line)
            res.level = HIT_LLC
        else:
            if sf.lookup(line) is not None:
                sf.remove(line)
                res.level = HIT_LLC  # served from the owner's private copy
            self._llc_insert(llc, line, res)
        # The helper keeps a private shared copy; that sharer is what stops a
        # later single-core re-access from re-privatizing the line.
        if not (self._hold_l2.get(line, 0) & (1 << helper)):
            self._fill_private(self._set_state(Level.L2, helper, l2s), line, helper, self._hold_l2)
            self._fill_private(self._set_state(Level.L1, helper, l1s), line, helper, self._hold_l1)
        if self.config.log_events:
            ev = res.evictions[0] if res.evictions else None
            self.event_log.append(
                (t, core, mix64(pa) & 0xFFFFFFFF, res.level, f"{ev[0]}:{sl}:{st}" if ev else "")
            )
        return res

    def hit_level(self, core: int, pa: int) -> str:
        """Where an access by `core` would hit right now (after sync); no mutation."""
        line = pa >> 6
        sl, st, l1s, l2s = self.line_meta(pa)
        self.sync_pair(sl, st)
        l1 = self.sets.get((Level.L1, core, l1s))
        if l1 is not None and l1.lookup(line) is not None:
            return HIT_L1
        l2 = self.sets.get((Level.L2, core, l2s))
        if l2 is not None and l2.lookup(line) is not None:
            return HIT_L2
        sf = self.sets.get((Level.SF, sl, st))
        if sf is not None and sf.lookup(line) is not None:
            owner = sf.owner.get(line)
            if owner is not None and owner != core and self._privately_resident(owner, line):
                return HIT_LLC
            return HIT_MEM
        llc = self.sets.get((Level.LLC, sl, st))
        if llc is not None and llc.lookup(line) is not None:
            return HIT_LLC
        return HIT_MEM

    # ------------------------------------------------------------- oracles

    def congruent(self, space: AddressSpace, va_a: VirtAddr, va_b: VirtAddr, level: Level) -> bool:
        """Ground-truth congruence of two attacker VAs. Test/driver use only."""
        return self.geometry.congruent_pa(space.translate(va_a), space.translate(va_b), level)

    def resident(self, pa: int, level: Level, core: int = MAIN_CORE) -> bool:
        """Ground-truth residency of a line in one structure. Test use only."""
        line = self.geometry.line_of(pa)
        if level in (Level.L1, Level.L2):
            st = self.sets.get((level, core, self.geometry.set_of(pa, level)))
        else:
            sl, si = self.pair_of(pa)
            st = self.sets.get((level, sl, si))
        return st is not None and st.lookup(line) is not None

    # -------------------------------------------------------------- checks

    def _check_invariants(self, core: int, sf: SetState, llc: SetState, *private: SetState) -> None:
        overlap = set(sf.where) & set(llc.where)
        assert not overlap, f"lines both private-tracked and in LLC: {overlap}"
        for st in private:
            for line in st.where:
                pa = line << 6
                sl, si = self.pair_of(pa)
                sf_st = self.sets.get((Level.SF, sl, si))
                llc_st = self.sets.get((Level.LLC, sl, si))
                tracked = sf_st is not None and sf_st.lookup(line) is not None
                shared = llc_st is not None and llc_st.lookup(line) is not None
                assert tracked or shared, f"private line {line:#x} untracked"

    def export_event_log(self) -> Iterable[tuple]:
        return sorted(self.event_log)

    def access_run(self, core: int, pas: list[int], kind: str = "read") -> str:
        """Apply a burst of accesses by one core; returns the worst hit level.

        Equivalent to calling access() per address with logging and debug
        checks elided; used by monitor prime/probe loops where per-call
        overhead dominates.
        """
        worst = 0
        order = {HIT_L1: 0, HIT_L2: 1, HIT_LLC: 2, HIT_MEM: 3}
        names = (HIT_L1, HIT_L2, HIT_LLC, HIT_MEM)
        for pa in pas:
            res = self.access(core, pa, kind=kind)
            lvl = order[res.level]
            if lvl > worst:
                worst = lvl
        return names[worst]
