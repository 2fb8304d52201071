"""Set-monitoring strategies and the covert-channel detection-rate harness.

Three receivers watch one snoop-filter set:

* ``ParallelProbe`` - prime by traversing the eviction set with overlapped
  accesses, probe all lines at once. Needs no replacement-state preparation,
  so it works under any policy and re-arms quickly.
* ``PsFlush`` - prime by load + flush + sequential reload, which puts the
  set into a known state from scratch; probe only the predicted next victim
  (the eviction candidate). Slow to re-arm.
* ``PsAlt`` - prime by an alternating pointer chase over two eviction sets,
  relying on lines staying resident; probe the predicted victim. Fast, but
  any foreign insertion leaves the attacker's replacement-state belief
  stale, and the prediction goes with it.

The scope strategies predict the eviction candidate by replaying their own
accesses through an offline replica of the set's replacement automaton; the
replica diverges from reality exactly when the real state was perturbed
behind the attacker's back.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .addresses import VirtAddr
from .geometry import Level
from .machine import MAIN_CORE, VICTIM_CORE, EventStream, MachineState, mix64
from .pruning import EvictionSet
from .timing import AttackOracle

PS_FLUSH = "ps-flush"
PS_ALT = "ps-alt"
PARALLEL = "parallel"
STRATEGIES = (PARALLEL, PS_FLUSH, PS_ALT)


@dataclass(frozen=True)
class MonitorStrategy:
    kind: str
    evset: EvictionSet
    aux: EvictionSet | None = None  # second set for the alternating chase
    prime_reps: int = 12
    chase_rounds: int = 3

    def __post_init__(self) -> None:
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; known: {STRATEGIES}")
        if self.kind == PS_ALT and self.aux is None:
            raise ValueError("the alternating chase needs exactly two eviction sets")
        if self.kind != PS_ALT and self.aux is not None:
            raise ValueError(f"{self.kind} carries exactly one eviction set")


@dataclass(frozen=True)
class DetectionEvent:
    cycle: int
    latency: int


@dataclass
class AccessTrace:
    """Timestamps of detected accesses to one monitored set."""

    detections: list[int]
    duration: int
    set_id: tuple[int, int]
    start: int = 0
    latencies: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.detections)


class _BeliefReplica:
    """Offline copy of a set's occupancy and replacement automaton.

    Fed only with the monitor's own accesses; predicts which resident line
    the next insertion will displace.
    """

    def __init__(self, machine: MachineState, pair: tuple[int, int]):
        from .replacement import make_policy

        import random as _random

        geo = machine.geometry
        shape = geo.shape(Level.SF)
        self.ways: list[int | None] = [None] * shape.ways
        self.where: dict[int, int] = {}
        self.policy = make_policy(
            machine.config.sf_policy, shape.ways, _random.Random(mix64(0xBE11EF))
        )

    def touch(self, line: int) -> None:
        way = self.where.get(line)
        if way is not None:
            self.policy.touch(way)
            return
        for way, occ in enumerate(self.ways):
            if occ is None:
                self.ways[way] = line
                self.where[line] = way
                self.policy.touch(way)
                return
        way = self.policy.victim()
        old = self.ways[way]
        if old is not None:
            del self.where[old]
        self.ways[way] = line
        self.where[line] = way
        self.policy.touch(way)

    def flush(self, line: int) -> None:
        way = self.where.pop(line, None)
        if way is not None:
            self.ways[way] = None
            self.policy.invalidate(way)

    def predicted_victim(self) -> int | None:
        """Line believed to be the next eviction candidate."""
        way = self.policy.victim()
        return self.ways[way]


class Monitor:
    """One receiver bound to a machine, strategy, and monitored SF set."""

    def __init__(self, oracle: AttackOracle, strategy: MonitorStrategy):
        self.oracle = oracle
        self.strategy = strategy
        self.machine = oracle.machine
        self.pair = self.machine.pair_of(oracle.translate(strategy.evset.addrs[0]))
        self.belief = _BeliefReplica(self.machine, self.pair) if strategy.kind != PARALLEL else None
        self.detections: list[DetectionEvent] = []
        self.prime_duration_last = 0

    # ----------------------------------------------------------------- prime

    def prime(self) -> int:
        """Refill the monitored set with attacker lines; returns elapsed cycles."""
        o = self.oracle
        t0 = self.machine.clock
        kind = self.strategy.kind
        lines = list(self.strategy.evset.addrs)
        if kind == PARALLEL:
            # Replay passes until one runs entirely out of the private caches
            # (set fully re-owned); the remaining passes can only refresh
            # recency, so they are charged without replaying each access.
            lat = o.latency
            pas = [o.translate(va) for va in lines]
            done = 0
            for _ in range(self.strategy.prime_reps):
                worst = self.machine.access_run(MAIN_CORE, pas)
                self.machine.advance(lat.batch_cost(len(pas), lat.latency(worst)))
                o.accesses += len(pas)
                done += 1
                if worst in ("l1", "l2"):
                    break
            rest = self.strategy.prime_reps - done
            self.machine.advance(rest * lat.batch_cost(len(pas), lat.l2_hit))
            o.accesses += rest * len(pas)
        elif kind == PS_FLUSH:
            o.parallel_traverse(lines)
            for va in lines:
                o.flush(va)
                if self.belief:
                    self.belief.flush(self.machine.geometry.line_of(o.translate(va)))
            for va in lines:
                res = self.machine.access(MAIN_CORE, o.translate(va))
                self.machine.advance(o.latency.latency(res.level) + o.latency.pipeline)
                o.accesses += 1
                self.belief.touch(self.machine.geometry.line_of(o.translate(va)))
        else:  # alternating pointer chase over two sets
            aux = list(self.strategy.aux.addrs)
            lat = o.latency
            geo = self.machine.geometry
            done = 0
            for _ in range(self.strategy.chase_rounds):
                missed = False
                for va in lines + aux:
                    res = self.machine.access(MAIN_CORE, o.translate(va))
                    self.machine.advance(lat.latency(res.level) + lat.pipeline)
                    o.accesses += 1
                    if res.level not in ("l1", "l2"):
                        missed = True
                for va in lines:
                    self.belief.touch(geo.line_of(o.translate(va)))
                done += 1
                if not missed:
                    break
            # Remaining rounds run out of the private caches: they refresh the
            # attacker's replacement-state belief and cost time, nothing else.
            for _ in range(self.strategy.chase_rounds - done):
                for va in lines:
                    self.belief.touch(geo.line_of(o.translate(va)))
                n = len(lines) + len(aux)
                self.machine.advance(n * (lat.l2_hit + lat.pipeline))
                o.accesses += n
        self.prime_duration_last = self.machine.clock - t0
        return self.prime_duration_last

    # ----------------------------------------------------------------- probe

    def probe(self) -> tuple[bool, int]:
        """Check the monitored set once: (eviction seen, probe latency)."""
        o = self.oracle
        if self.strategy.kind == PARALLEL:
            lat = o.latency
            worst = "l1"
            order = ("l1", "l2", "llc", "mem")
            for va in self.strategy.evset.addrs:
                res = self.machine.access(MAIN_CORE, o.translate(va))
                if order.index(res.level) > order.index(worst):
                    worst = res.level
            cost = lat.batch_cost(len(self.strategy.evset.addrs), lat.latency(worst))
            self.machine.advance(cost)
            o.accesses += len(self.strategy.evset.addrs)
            return lat.latency(worst) > lat.private_threshold, cost
        evc_line = self.belief.predicted_victim()
        if evc_line is None:
            evc_line = self.machine.geometry.line_of(o.translate(self.strategy.evset.addrs[0]))
        evicted, lat = o.probe_access(_va_of(self.strategy.evset, o, evc_line))
        self.belief.touch(evc_line)
        return evicted, lat

    @property
    def probe_period(self) -> int:
        lat = self.oracle.latency
        if self.strategy.kind == PARALLEL:
            w = len(self.strategy.evset.addrs)
            return lat.batch_cost(w, lat.l2_hit) + lat.pipeline
        return lat.l1_hit + 2 * lat.pipeline

    # ------------------------------------------------------------------- run

    def run(self, duration: int, prime_first: bool = True) -> AccessTrace:
        """Monitor for `duration` cycles, event-driven between probes.

        Between background events nothing can change a probe's outcome, so
        the clock jumps to the next pending event and the detection lands one
        probe period later, as it would under continuous polling.
        """
        m = self.machine
        start = m.clock
        end = start + duration
        out: list[DetectionEvent] = []
        if prime_first:
            self.prime()
        while m.clock < end:
            nxt = m.next_background_event(*self.pair, end)
            if nxt is None:
                break
            if nxt > m.clock:
                m.advance(nxt - m.clock)
            evicted, lat = self.probe()
            m.advance(self.probe_period)
            if evicted:
                out.append(DetectionEvent(cycle=m.clock, latency=lat))
                self.prime()
        if m.clock < end:
            m.advance(end - m.clock)
        self.detections.extend(out)
        return AccessTrace(
            detections=[d.cycle for d in out],
            duration=duration,
            set_id=self.pair,
            start=start,
            latencies=[d.latency for d in out],
        )


def _va_of(evset: EvictionSet, oracle: AttackOracle, line: int) -> VirtAddr:
    for va in evset.addrs:
        if oracle.machine.geometry.line_of(oracle.translate(va)) == line:
            return va
    return evset.addrs[0]


class SenderStream(EventStream):
    """Covert-channel sender: periodic accesses to one line of the target set."""

    core = VICTIM_CORE

    def __init__(self, pa: int, start: int, interval: int, count: int):
        self.pa = pa
        self.interval = interval
        self.remaining = count
        self.next_t = start + interval
        self.sent: list[int] = []

    def peek(self, upto: int) -> int | None:
        if self.remaining <= 0 or self.next_t > upto:
            return None
        return self.next_t

    def pop(self):
        t = self.next_t
        self.remaining -= 1
        self.sent.append(t)
        self.next_t = t + self.interval
        return t, self.pa, "read"


def covert_run(
    oracle: AttackOracle,
    strategy: MonitorStrategy,
    interval: int,
    n_accesses: int,
    epsilon: int = 500,
) -> float:
    """Detection rate of a sender accessing the monitored set every `interval` cycles.

    A sender access at t counts as detected if some detection lands in
    (t, t + epsilon).
    """
    if interval <= 0:
        raise ValueError("interval must be positive")
    machine = oracle.machine
    pair = machine.pair_of(oracle.translate(strategy.evset.addrs[0]))
    sender_pa = _congruent_foreign_pa(machine, pair)
    sender = SenderStream(sender_pa, machine.clock, interval, n_accesses)
    machine.register_stream(*pair, sender)
    monitor = Monitor(oracle, strategy)
    trace = monitor.run(duration=interval * (n_accesses + 2))
    detected = 0
    times = trace.detections
    j = 0
    for t in sender.sent:
        while j < len(times) and times[j] <= t:
            j += 1
        if j < len(times) and times[j] < t + epsilon:
            detected += 1
    return detected / len(sender.sent) if sender.sent else 0.0


def _congruent_foreign_pa(machine: MachineState, pair: tuple[int, int]) -> int:
    """A physical line in the victim partition mapping to the given (slice, set)."""
    from .geometry import LINE_BITS

    geo = machine.geometry
    sl, st = pair
    base = 5 << (geo.phys_bits - 3)
    lo = geo.shape(Level.LLC).index_bits + LINE_BITS
    k = 0
    while True:
        pa = base | (k << lo) | (st << LINE_BITS)
        if geo.slice_of(pa) == sl:
            return pa
        k += 1
