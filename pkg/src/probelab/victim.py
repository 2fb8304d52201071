"""Simulated bit-serial signing victim and the nonce-bit decoder.

The victim processes a 571-bit per-signing secret in a loop of roughly
fixed-duration iterations. Instrumented code layout puts the two branch
bodies on separate cache lines: the monitored line is fetched at every
iteration boundary (the loop head executes it) and once more at the
iteration midpoint when the bit is 0; the sibling line carries the opposite
polarity. Only the cache-visible fetch schedule is modeled; there is no
curve arithmetic.

The decoder chains detected iteration boundaries whose spacing falls inside
the plausible iteration-duration window and reads each bit from the presence
of a mid-iteration detection. Unresolvable iterations are reported missing,
never guessed.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from .addresses import AddressSpace, VirtAddr
from .geometry import PAGE_BYTES
from .machine import VICTIM_CORE, EventStream, MachineState, mix64
from .noise import InsufficientDataError
from .probing import AccessTrace

NONCE_BITS = 571
ITERATION_MEAN = 9700
ITERATION_JITTER = 1000
BOUNDARY_WINDOW = (8000, 12000)


@dataclass
class LadderVictim:
    """Schedule generator for the signing loop's secret-dependent fetches."""

    space: AddressSpace
    seed: int = 0
    nonce_bits: int = NONCE_BITS
    iteration_mean: int = ITERATION_MEAN
    iteration_jitter: int = ITERATION_JITTER
    duty_cycle: float = 0.25
    extra_access_bit: int = 0  # bit value that adds the midpoint fetch
    if_line: VirtAddr = 0
    else_line: VirtAddr = 0
    rng: random.Random = field(init=False, repr=False)
    nonces: list[list[int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.rng = random.Random(mix64(self.seed, 0x51611))
        if not self.if_line or not self.else_line:
            base = self.space.alloc_page() * PAGE_BYTES
            self.if_line = base + 0x400
            self.else_line = base + 0x440

    @property
    def monitored_line(self) -> VirtAddr:
        """The line an attacker gets the cleanest signal from (else direction)."""
        return self.else_line

    def check_distinct_sets(self, machine: MachineState) -> bool:
        return machine.pair_of(self.space.translate(self.if_line)) != machine.pair_of(
            self.space.translate(self.else_line)
        )

    def new_nonce(self) -> list[int]:
        bits = [self.rng.getrandbits(1) for _ in range(self.nonce_bits)]
        self.nonces.append(bits)
        return bits

    def signing_schedule(self, start: int, bits: list[int]):
        """Fetch schedule of one signing: [(cycle, va, is_boundary)].

        One boundary fetch of both branch lines per iteration (the loop head
        spans them), a midpoint fetch of the line matching the bit's
        direction, and a closing fetch when the loop exits.
        """
        events = []
        t = start
        durations = []
        for bit in bits:
            jitter = self.rng.randint(-self.iteration_jitter, self.iteration_jitter)
            dur = self.iteration_mean + jitter
            durations.append(dur)
            events.append((t, self.else_line, True))
            events.append((t, self.if_line, True))
            mid_line = self.else_line if bit == self.extra_access_bit else self.if_line
            events.append((t + dur // 2, mid_line, False))
            t += dur
        events.append((t, self.else_line, True))
        events.append((t, self.if_line, True))
        return events, durations


@dataclass
class GroundTruth:
    """Per-signing oracle data for validation: bits and boundary times."""

    bits: list[int]
    boundaries: list[int]
    midpoints: list[int]
    start: int


class VictimStream(EventStream):
    """Feeds one line's share of the victim schedule into its (slice, set) pair."""

    core = VICTIM_CORE

    def __init__(self, pa: int, owner: "AttachedVictim | None" = None):
        self.pa = pa
        self.owner = owner
        self.queue: list[int] = []
        self.head = 0

    def extend(self, times) -> None:
        self.queue.extend(times)

    def peek(self, upto: int) -> int | None:
        if self.head >= len(self.queue) and self.owner is not None:
            self.owner.ensure_schedule(upto)
        if self.head < len(self.queue) and self.queue[self.head] <= upto:
            return self.queue[self.head]
        return None

    def pop(self):
        t = self.queue[self.head]
        self.head += 1
        return t, self.pa, "code-fetch"


class AttachedVictim:
    """A victim bound to a machine: trigger signings, collect ground truth."""

    def __init__(self, machine: MachineState, victim: LadderVictim):
        self.machine = machine
        self.victim = victim
        self.streams: dict[VirtAddr, VictimStream] = {}
        self.truths: list[GroundTruth] = []
        self.free_running = False
        self._scheduled_to = 0
        for va in (victim.if_line, victim.else_line):
            pa = victim.space.translate(va)
            stream = VictimStream(pa, owner=self)
            self.streams[va] = stream
            machine.register_stream(*machine.pair_of(pa), stream)
        if not victim.check_distinct_sets(machine):
            raise ValueError("victim branch lines landed in the same SF set")

    def start_free_running(self) -> None:
        """Sign intermittently (duty cycle) whenever the clock moves forward."""
        self.free_running = True
        self._scheduled_to = max(self._scheduled_to, self.machine.clock)

    def stop_free_running(self) -> None:
        self.free_running = False

    def ensure_schedule(self, upto: int) -> None:
        """Lazily queue duty-cycled signings covering times up to `upto`."""
        if not self.free_running:
            return
        v = self.victim
        signing = v.nonce_bits * v.iteration_mean
        idle = int(signing * (1.0 - v.duty_cycle) / max(v.duty_cycle, 1e-6))
        while self._scheduled_to <= upto:
            start = self._scheduled_to
            self.trigger_signing(start=start)
            self._scheduled_to = start + signing + max(
                0, int(v.rng.uniform(0.5, 1.5) * idle)
            )

    def trigger_signing(self, start: int | None = None, bits: list[int] | None = None) -> GroundTruth:
        """Queue one signing's fetches from `start` (default: now)."""
        start = self.machine.clock if start is None else start
        bits = self.victim.new_nonce() if bits is None else bits
        events, durations = self.victim.signing_schedule(start, bits)
        per_line: dict[VirtAddr, list[int]] = {va: [] for va in self.streams}
        boundaries, midpoints = [], []
        for t, va, is_boundary in events:
            per_line[va].append(t)
            if is_boundary and va == self.victim.monitored_line:
                boundaries.append(t)
            elif not is_boundary and va == self.victim.monitored_line:
                midpoints.append(t)
        for va, times in per_line.items():
            self.streams[va].extend(times)
        truth = GroundTruth(bits=bits, boundaries=boundaries, midpoints=midpoints, start=start)
        self.truths.append(truth)
        return truth

    def run_intermittently(self, duration: int) -> list[GroundTruth]:
        """Queue signings over `duration` cycles at the victim's duty cycle.

        Bursts of one signing alternate with idle gaps sized so that the
        active fraction matches duty_cycle.
        """
        v = self.victim
        signing = v.nonce_bits * v.iteration_mean
        idle = int(signing * (1.0 - v.duty_cycle) / max(v.duty_cycle, 1e-6))
        t = self.machine.clock
        end = t + duration
        out = []
        while t < end:
            out.append(self.trigger_signing(start=t))
            t += signing + max(0, int(v.rng.uniform(0.5, 1.5) * idle))
        return out


def run_ladder(machine: MachineState, victim: LadderVictim, bits: list[int] | None = None) -> GroundTruth:
    """Attach (if needed) and trigger one signing; returns its ground truth."""
    attached = AttachedVictim(machine, victim)
    return attached.trigger_signing(bits=bits)


@dataclass
class ExtractionResult:
    positions: list[int]
    values: list[int]
    boundaries: list[int]

    @property
    def fraction_recovered(self) -> float:
        return len(self.values) / NONCE_BITS if NONCE_BITS else 0.0

    def bit_error_rate(self, truth_bits: list[int]) -> float:
        """Error rate over recovered positions against the true nonce (test use)."""
        if not self.values:
            return 0.0
        wrong = sum(1 for p, v in zip(self.positions, self.values) if truth_bits[p] != v)
        return wrong / len(self.values)


def extract_nonce(
    trace: AccessTrace,
    expected_iteration: int = ITERATION_MEAN,
    window: tuple[int, int] = BOUNDARY_WINDOW,
) -> ExtractionResult:
    """Decode nonce bits from a monitored-set trace of one signing.

    Boundaries are chained greedily: from the current boundary, the next is
    the earliest detection `window` cycles ahead. The boundary window admits
    exactly one iteration per pair, so the bit index advances by one along a
    chain; across a break it advances by the rounded gap, keeping timing
    drift local. A bit is 0 when an extra detection lies in the middle third
    of its iteration, 1 otherwise. Unresolved iterations stay missing.
    """
    times = sorted(trace.detections)
    if not times:
        raise InsufficientDataError("empty trace")
    lo, hi = window
    positions: list[int] = []
    values: list[int] = []
    boundaries: list[int] = []
    last_boundary: int | None = None
    last_pos = -1
    n = len(times)
    i = 0
    while i < n:
        prev = times[i]
        j = i + 1
        chained = False
        pos = None
        while True:
            nxt = None
            k = j
            while k < n:
                gap = times[k] - prev
                if gap > hi:
                    break
                if gap >= lo:
                    nxt = times[k]
                    break
                k += 1
            if nxt is None:
                break
            if pos is None:
                if last_boundary is None:
                    pos = max(0, round((prev - trace.start) / expected_iteration))
                else:
                    step = max(1, round((prev - last_boundary) / expected_iteration))
                    pos = last_pos + step
            mid_lo = prev + (nxt - prev) / 3.0
            mid_hi = prev + 2.0 * (nxt - prev) / 3.0
            has_mid = any(mid_lo < times[m] < mid_hi for m in range(j, k))
            if pos < NONCE_BITS and pos > last_pos:
                positions.append(pos)
                values.append(0 if has_mid else 1)
                last_pos = pos
            boundaries.append(prev)
            last_boundary = prev
            pos += 1
            chained = True
            prev = nxt
            j = k + 1
        if chained:
            boundaries.append(prev)
            last_boundary = prev
        i = max(j, i + 1)
    return ExtractionResult(positions=positions, values=values, boundaries=boundaries)


# ---------------------------------------------------------------- full pipeline


@dataclass
class AttackConfig:
    """Knobs of one end-to-end run; defaults mirror the lab's main scenario."""

    geometry: str = "skylake-sp-28"
    seed: int = 0
    noise_rate: float = 0.0
    algorithm: str = "bins"
    scope: str = "page-offset"
    filtering: bool = True
    traces: int = 10
    scan_timeout: int = 10_000_000_000  # cycles; 5 s on the 2 GHz clock
    known_target: bool = False  # skip the scan stage (extraction-only mode)
    duty_cycle: float = 0.25
    victim_seed: int | None = None


@dataclass
class AttackReport:
    """Per-stage outcomes; ground-truth fields exist for lab validation."""

    config: AttackConfig
    build_cycles: int = 0
    scan_cycles: int = 0
    extract_cycles: int = 0
    sets_built: int = 0
    targets_attempted: int = 0
    build_success_rate: float = 0.0
    scan_found: bool = False
    scan_correct: bool = False
    scan_score: float = 0.0
    fractions: list[float] = field(default_factory=list)
    bit_error_rates: list[float] = field(default_factory=list)
    failure_stage: str | None = None

    @property
    def median_fraction(self) -> float:
        if not self.fractions:
            return 0.0
        vals = sorted(self.fractions)
        mid = len(vals) // 2
        return vals[mid] if len(vals) % 2 else (vals[mid - 1] + vals[mid]) / 2

    def to_json_dict(self) -> dict:
        return {
            "geometry": self.config.geometry,
            "seed": self.config.seed,
            "noise_rate": self.config.noise_rate,
            "algorithm": self.config.algorithm,
            "scope": self.config.scope,
            "build_cycles": self.build_cycles,
            "scan_cycles": self.scan_cycles,
            "extract_cycles": self.extract_cycles,
            "sets_built": self.sets_built,
            "targets_attempted": self.targets_attempted,
            "build_success_rate": round(self.build_success_rate, 6),
            "scan_found": self.scan_found,
            "scan_correct": self.scan_correct,
            "fractions": [round(f, 6) for f in self.fractions],
            "bit_error_rates": [round(b, 6) for b in self.bit_error_rates],
            "median_fraction": round(self.median_fraction, 6),
            "failure_stage": self.failure_stage,
        }


def end_to_end(config: AttackConfig, machine: MachineState | None = None) -> AttackReport:
    """Chain set construction, spectral target identification, and extraction."""
    from .geometry import geometry_preset
    from .machine import MachineConfig
    from .noise import NoiseModel, attach
    from .probing import Monitor, MonitorStrategy, PARALLEL
    from .pruning import PruneConfig, build_bulk
    from .spectral import scan
    from .timing import AttackOracle

    geo = geometry_preset(config.geometry)
    if machine is None:
        machine = MachineState(geo, MachineConfig(seed=config.seed))
    aspace = AddressSpace(geo, seed=config.seed, partition=0)
    vspace = AddressSpace(geo, seed=config.victim_seed or config.seed + 1, partition=1)
    victim = LadderVictim(space=vspace, seed=config.seed, duty_cycle=config.duty_cycle)
    attached = AttachedVictim(machine, victim)
    if config.noise_rate > 0:
        attach(machine, NoiseModel(rate_per_ms=config.noise_rate, seed=config.seed))
    oracle = AttackOracle(machine, aspace)
    report = AttackReport(config=config)
    rng = random.Random(mix64(config.seed, 0xE2E))

    # Stage 1: eviction sets for every SF set at the victim line's page offset.
    page_off = victim.monitored_line & (PAGE_BYTES - 1)
    t0 = machine.clock
    sets, bulk = build_bulk(
        oracle,
        scope=config.scope,
        algorithm=config.algorithm,
        config=PruneConfig(),
        rng=rng,
        page_offset=page_off if config.scope != "whole-sys" else None,
        filtering=config.filtering,
    )
    report.build_cycles = machine.clock - t0
    report.sets_built = bulk.built
    report.targets_attempted = bulk.targets_attempted
    report.build_success_rate = bulk.success_rate
    if not sets:
        report.failure_stage = "build"
        return report

    true_pair = machine.pair_of(vspace.translate(victim.monitored_line))
    expected_period = victim.iteration_mean // 2

    # Stage 2: find the victim's set in the frequency domain.
    if config.known_target:
        matches = [ev for ev in sets if machine.pair_of(aspace.translate(ev.addrs[0])) == true_pair]
        if not matches:
            report.failure_stage = "scan"
            return report
        found = matches[0]
        report.scan_found = report.scan_correct = True
    else:
        attached.start_free_running()
        t0 = machine.clock
        result = scan(
            oracle,
            sets,
            expected_period=expected_period,
            timeout=config.scan_timeout,
            bit_decoder=(lambda tr: extract_nonce(tr).values)
            if config.scope == "whole-sys"
            else None,
        )
        report.scan_cycles = machine.clock - t0
        attached.stop_free_running()
        if result.found is None:
            report.failure_stage = "scan"
            return report
        found = result.found
        report.scan_found = True
        report.scan_score = result.score
        report.scan_correct = result.set_id == true_pair
    # Drain any queued victim activity before collecting clean traces.
    machine.advance(victim.nonce_bits * victim.iteration_mean * 2)
    machine.sync_pair(*true_pair)

    # Stage 3: trigger signings and decode the nonce bits from each trace.
    monitor = Monitor(oracle, MonitorStrategy(kind=PARALLEL, evset=found))
    t0 = machine.clock
    duration = victim.nonce_bits * victim.iteration_mean + 60_000
    for _ in range(config.traces):
        monitor.prime()
        truth = attached.trigger_signing()
        trace = monitor.run(duration, prime_first=False)
        try:
            res = extract_nonce(trace, victim.iteration_mean)
        except InsufficientDataError:
            report.fractions.append(0.0)
            report.bit_error_rates.append(0.0)
            continue
        report.fractions.append(res.fraction_recovered)
        report.bit_error_rates.append(res.bit_error_rate(truth.bits))
    report.extract_cycles = machine.clock - t0
    return report
