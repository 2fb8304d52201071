"""Cache hierarchy geometry: level shapes, physical-address index math, slice hashing.

A geometry describes the simulated machine's caches as pure shape data. All
index extraction and slice hashing is a function of geometry and physical
address alone, so geometry objects are frozen and shareable.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

LINE_BITS = 6
LINE_BYTES = 1 << LINE_BITS
PAGE_BITS = 12
PAGE_BYTES = 1 << PAGE_BITS


class GeometryError(ValueError):
    """Inconsistent or unsupported cache geometry."""


class Level(str, Enum):
    L1 = "l1"
    L2 = "l2"
    LLC = "llc"
    SF = "sf"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


PRIVATE_LEVELS = (Level.L1, Level.L2)
SHARED_LEVELS = (Level.LLC, Level.SF)


@dataclass(frozen=True)
class LevelShape:
    """Way/set shape of one cache structure (per slice for sliced structures)."""

    ways: int
    sets: int

    def __post_init__(self) -> None:
        if self.ways < 1:
            raise GeometryError(f"ways must be >= 1, got {self.ways}")
        if self.sets < 1 or self.sets & (self.sets - 1):
            raise GeometryError(f"sets must be a power of two, got {self.sets}")

    @property
    def index_bits(self) -> int:
        return self.sets.bit_length() - 1


@dataclass(frozen=True)
class CacheGeometry:
    """Shape of the full hierarchy: private L1/L2 plus sliced LLC and snoop filter.

    The snoop filter mirrors the LLC's set count, slice count and slice hash:
    two addresses congruent in the LLC are congruent in the SF and vice versa.
    Set index bits sit directly above the line offset, so the L2 index bits are
    a subset of the LLC/SF index bits whenever the L2 has fewer sets.
    """

    l1: LevelShape
    l2: LevelShape
    llc: LevelShape
    sf: LevelShape
    n_slices: int = 1
    phys_bits: int = 46
    slice_fold_bits: int | None = None

    def __post_init__(self) -> None:
        if self.n_slices < 1:
            raise GeometryError(f"n_slices must be >= 1, got {self.n_slices}")
        if self.sf.sets != self.llc.sets:
            raise GeometryError(
                f"SF and LLC must have the same set count, got {self.sf.sets} != {self.llc.sets}"
            )
        if not 16 <= self.phys_bits <= 62:
            raise GeometryError(f"phys_bits out of range: {self.phys_bits}")
        for level in Level:
            lo, hi = self.index_range(level)
            if hi > self.phys_bits:
                raise GeometryError(
                    f"{level} index bits [{lo},{hi}) exceed the {self.phys_bits}-bit physical space"
                )

    def shape(self, level: Level) -> LevelShape:
        return {Level.L1: self.l1, Level.L2: self.l2, Level.LLC: self.llc, Level.SF: self.sf}[level]

    def index_range(self, level: Level) -> tuple[int, int]:
        """Half-open bit range [lo, hi) of the level's set index within a PA."""
        bits = self.shape(level).index_bits
        return LINE_BITS, LINE_BITS + bits

    def uncontrollable_index_bits(self, level: Level) -> int:
        """Index bits above the page offset, i.e. not chosen by picking a VA offset."""
        lo, hi = self.index_range(level)
        return max(0, hi - max(lo, PAGE_BITS))

    def set_of(self, pa: int, level: Level) -> int:
        return (pa >> LINE_BITS) & (self.shape(level).sets - 1)

    @property
    def _fold_bits(self) -> int:
        if self.slice_fold_bits is not None:
            return self.slice_fold_bits
        n = self.n_slices
        if n & (n - 1) == 0:
            # Exact fold keeps every PA bit influential after the power-of-two
            # reduction (which only keeps low bits).
            return max(1, n.bit_length() - 1)
        # Wide fold before the modular reduction keeps the per-slice bias
        # negligible for non-power-of-two slice counts.
        return 16

    def slice_of(self, pa: int) -> int:
        """Slice index: XOR-fold of all PA bits above the line offset, reduced mod n_slices."""
        if self.n_slices == 1:
            return 0
        x = (pa & ((1 << self.phys_bits) - 1)) >> LINE_BITS
        k = self._fold_bits
        mask = (1 << k) - 1
        h = 0
        while x:
            h ^= x & mask
            x >>= k
        return h % self.n_slices

    def slice_of_array(self, pas):
        """Vectorized slice_of over a numpy uint64 array."""
        import numpy as np

        if self.n_slices == 1:
            return np.zeros(len(pas), dtype=np.int64)
        x = (np.asarray(pas, dtype=np.uint64) & np.uint64((1 << self.phys_bits) - 1)) >> np.uint64(
            LINE_BITS
        )
        k = np.uint64(self._fold_bits)
        mask = np.uint64((1 << self._fold_bits) - 1)
        h = np.zeros(len(x), dtype=np.uint64)
        while x.any():
            h ^= x & mask
            x >>= k
        return (h % np.uint64(self.n_slices)).astype(np.int64)

    def line_of(self, pa: int) -> int:
        return pa >> LINE_BITS

    def congruent_pa(self, pa_a: int, pa_b: int, level: Level) -> bool:
        """Ground-truth set (and slice, for shared levels) equality of two PAs."""
        if self.set_of(pa_a, level) != self.set_of(pa_b, level):
            return False
        if level in SHARED_LEVELS:
            return self.slice_of(pa_a) == self.slice_of(pa_b)
        return True


def skylake_sp(n_slices: int = 28) -> CacheGeometry:
    """Skylake-SP server hierarchy: 11-way LLC slices, 12-way SF slices, 16-way L2."""
    return CacheGeometry(
        l1=LevelShape(ways=8, sets=64),
        l2=LevelShape(ways=16, sets=1024),
        llc=LevelShape(ways=11, sets=2048),
        sf=LevelShape(ways=12, sets=2048),
        n_slices=n_slices,
    )


def icelake_sp(n_slices: int = 26) -> CacheGeometry:
    """Ice Lake-SP: higher-associativity 16-way SF and 20-way L2."""
    return CacheGeometry(
        l1=LevelShape(ways=12, sets=64),
        l2=LevelShape(ways=20, sets=1024),
        llc=LevelShape(ways=12, sets=2048),
        sf=LevelShape(ways=16, sets=2048),
        n_slices=n_slices,
    )


def mini(llc_ways: int = 3, sf_ways: int = 4, n_slices: int = 2) -> CacheGeometry:
    """Small geometry for fast unit and property tests."""
    return CacheGeometry(
        l1=LevelShape(ways=2, sets=64),
        l2=LevelShape(ways=4, sets=256),
        llc=LevelShape(ways=llc_ways, sets=512),
        sf=LevelShape(ways=sf_ways, sets=512),
        n_slices=n_slices,
    )


GEOMETRY_PRESETS = {
    "skylake-sp-28": lambda: skylake_sp(28),
    "skylake-sp-22": lambda: skylake_sp(22),
    "icelake-sp-26": lambda: icelake_sp(26),
    "mini": mini,
}


def geometry_preset(name: str) -> CacheGeometry:
    try:
        return GEOMETRY_PRESETS[name]()
    except KeyError:
        raise GeometryError(f"unknown geometry preset {name!r}; known: {sorted(GEOMETRY_PRESETS)}")
