"""Background-tenant cache activity as per-set Poisson access processes.

Each noised (slice, set) pair gets an independent exponential arrival stream
seeded from (model seed, slice, set), so replay is reproducible regardless of
which sets an experiment touches first. Injected accesses come from a noise
core cycling through a pool of lines congruent with the pair; the pool is
larger than any private structure, so every injection misses privately and
exerts genuine snoop-filter and LLC pressure.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np

from .geometry import LINE_BITS, Level
from .machine import EventStream, MachineState, NOISE_CORE, mix64


class InsufficientDataError(ValueError):
    """Not enough events to compute the requested statistic."""


@dataclass
class NoiseModel:
    """Poisson background accesses, in accesses per simulated millisecond per set."""

    rate_per_ms: float
    scope: str = "uniform"  # "uniform": every shared set; "target-only": chosen pairs
    seed: int = 0
    pool_size: int = 32
    saturate_after: int = 96
    _spawned: set = field(default_factory=set, repr=False)

    def __post_init__(self) -> None:
        if self.rate_per_ms < 0:
            raise ValueError("noise rate must be >= 0")
        if self.scope not in ("uniform", "target-only"):
            raise ValueError(f"unknown noise scope {self.scope!r}")

    def maybe_spawn(self, machine: MachineState, sl: int, st: int) -> None:
        if self.rate_per_ms <= 0 or self.scope != "uniform":
            return
        self.spawn(machine, sl, st)

    def spawn(self, machine: MachineState, sl: int, st: int) -> None:
        if self.rate_per_ms <= 0 or (sl, st) in self._spawned:
            return
        self._spawned.add((sl, st))
        machine.register_stream(sl, st, NoiseStream(machine, sl, st, self))


def attach(machine: MachineState, model: NoiseModel, pairs=None) -> None:
    """Bind a noise model to a machine.

    Uniform scope noised every shared set lazily as it is first touched;
    target-only scope requires the (slice, set) pairs to noise.
    """
    machine.noise_model = model
    if model.scope == "target-only":
        for sl, st in pairs or ():
            model.spawn(machine, sl, st)
    else:
        for level, owner, index in list(machine.sets):
            if level == Level.LLC:
                model.maybe_spawn(machine, owner, index)


class NoiseStream(EventStream):
    """Exponential inter-arrival accesses to one (slice, set) pair."""

    core = NOISE_CORE

    def __init__(self, machine: MachineState, sl: int, st: int, model: NoiseModel):
        self.geometry = machine.geometry
        self.sl = sl
        self.st = st
        self.model = model
        self.rate_per_cycle = model.rate_per_ms / machine.config.cycles_per_ms
        self.rng = random.Random(mix64(model.seed, 0x4E015E, sl, st))
        self.next_t = machine.clock + self._gap()
        self._pool: list[int] | None = None
        self._pool_idx = 0
        self._sat_upto: int | None = None

    def _gap(self) -> int:
        return max(1, round(self.rng.expovariate(self.rate_per_cycle)))

    def pool(self) -> list[int]:
        """Noise lines congruent with the pair, disjoint from tenant partitions."""
        if self._pool is None:
            geo = self.geometry
            base = 7 << (geo.phys_bits - 3)  # reserved top partition
            lo = geo.shape(Level.LLC).index_bits + LINE_BITS
            pool = []
            k = 0
            while len(pool) < self.model.pool_size:
                pa = base | (k << lo) | (self.st << LINE_BITS)
                k += 1
                if pa >= (1 << geo.phys_bits):
                    raise RuntimeError("noise pool search exhausted physical space")
                if geo.slice_of(pa) == self.sl:
                    pool.append(pa)
            self._pool = pool
        return self._pool

    def peek(self, upto: int) -> int | None:
        if self.next_t > upto:
            return None
        if (upto - self.next_t) * self.rate_per_cycle > self.model.saturate_after:
            self._sat_upto = upto
        return self.next_t

    def pop(self) -> tuple[int, int, str]:
        t = self.next_t
        if self._sat_upto is not None:
            # Replace a long backlog with its steady-state effect, then resume
            # individual arrivals shortly before the query time.
            tail = int(24 / self.rate_per_cycle)
            self.next_t = max(t + 1, self._sat_upto - tail)
            self._sat_upto = None
            return t, 0, "saturate"
        pool = self.pool()
        pa = pool[self._pool_idx % len(pool)]
        self._pool_idx += 1
        self.next_t = t + self._gap()
        return t, pa, "read"


@dataclass
class EmpiricalCdf:
    """Sorted-sample CDF with quantile lookup."""

    samples: np.ndarray

    def __post_init__(self) -> None:
        self.samples = np.sort(np.asarray(self.samples, dtype=float))

    def quantile(self, q: float) -> float:
        return float(np.quantile(self.samples, q))

    def cdf(self, x: float) -> float:
        return float(np.searchsorted(self.samples, x, side="right")) / len(self.samples)

    @property
    def mean(self) -> float:
        return float(self.samples.mean())

    def rows(self):
        n = len(self.samples)
        return [(float(v), (i + 1) / n) for i, v in enumerate(self.samples)]


def inter_access_cdf(timestamps) -> EmpiricalCdf:
    """Empirical CDF of inter-arrival gaps of an event-timestamp sequence."""
    ts = np.asarray(sorted(timestamps), dtype=float)
    if len(ts) < 2:
        raise InsufficientDataError("need at least 2 events for inter-access statistics")
    return EmpiricalCdf(np.diff(ts))
