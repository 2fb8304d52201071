"""Virtual/physical addressing, cache uncertainty, and candidate-set generation.

The attacker controls the page offset of a virtual address (standard 4 KiB
pages, no huge pages) but neither controls nor observes the physical page a
virtual page lands on. Each tenant owns an AddressSpace: a seeded, lazily
populated, injective map from virtual to physical pages.
"""
from __future__ import annotations

import random
from dataclasses import InitVar, dataclass, field

from .geometry import LINE_BYTES, PAGE_BITS, CacheGeometry, Level

VirtAddr = int
PhysAddr = int

# Tenants draw physical pages from disjoint partitions so that address spaces
# never alias the same physical line.
PARTITION_BITS = 3


class AddressError(ValueError):
    """Precondition violation in address or candidate-set handling."""


class AddressSpaceExhausted(RuntimeError):
    """The physical partition backing an address space ran out of pages."""


def page_offset(va: int) -> int:
    return va & ((1 << PAGE_BITS) - 1)


def line_offset(va: int) -> int:
    return va & (LINE_BYTES - 1)


@dataclass(frozen=True)
class Uncertainty:
    """How many sets an attacker-controlled address may map to, per structure."""

    l2_sets: int
    llc_sets: int


def uncertainty(geometry: CacheGeometry) -> Uncertainty:
    """Cache uncertainty from geometry bit fields.

    The L2 uncertainty is two to the number of index bits above the page
    offset. The LLC/SF uncertainty additionally multiplies in the slice count,
    because partial control of the hashed bits gives no slice knowledge.
    """
    u_l2 = 1 << geometry.uncontrollable_index_bits(Level.L2)
    u_llc = (1 << geometry.uncontrollable_index_bits(Level.LLC)) * geometry.n_slices
    return Uncertainty(l2_sets=u_l2, llc_sets=u_llc)


@dataclass
class AddressSpace:
    """Per-tenant VA->PA mapping: one random physical page per virtual page.

    Deterministic under a fixed seed. The partition index keeps different
    tenants' physical pages disjoint.
    """

    geometry: CacheGeometry
    seed: int = 0
    partition: int = 0
    _pages: dict[int, int] = field(default_factory=dict, repr=False)
    _used: set[int] = field(default_factory=set, repr=False)
    _rng: random.Random = field(init=False, repr=False)
    _next_vpage: int = field(default=1, repr=False)

    def __post_init__(self) -> None:
        if not 0 <= self.partition < (1 << PARTITION_BITS):
            raise AddressError(f"partition must be in [0, {1 << PARTITION_BITS})")
        self._rng = random.Random((self.seed << 4) ^ self.partition ^ 0xA5A5_5A5A)

    @property
    def _partition_pages(self) -> int:
        return 1 << (self.geometry.phys_bits - PAGE_BITS - PARTITION_BITS)

    def translate(self, va: VirtAddr) -> PhysAddr:
        """Translate, creating the page mapping on first use. Preserves bits 11..0."""
        vpage = va >> PAGE_BITS
        ppage = self._pages.get(vpage)
        if ppage is None:
            span = self._partition_pages
            if len(self._used) >= span:
                raise AddressSpaceExhausted("physical partition exhausted")
            base = self.partition * span
            while True:
                ppage = base + self._rng.randrange(span)
                if ppage not in self._used:
                    break
            self._used.add(ppage)
            self._pages[vpage] = ppage
        return (ppage << PAGE_BITS) | page_offset(va)

    def alloc_page(self) -> int:
        """Reserve a fresh virtual page number."""
        vpage = self._next_vpage
        self._next_vpage += 1
        return vpage

    def alloc_mapped_pages(self, count: int) -> list[int]:
        """Reserve `count` fresh virtual pages and map them in one batch."""
        span = self._partition_pages
        if count > span - len(self._used):
            raise AddressSpaceExhausted(f"cannot allocate {count} pages in this partition")
        base = self.partition * span
        draws = self._rng.sample(range(span), count)
        vpages = []
        for draw in draws:
            ppage = base + draw
            while ppage in self._used:
                ppage = base + self._rng.randrange(span)
            self._used.add(ppage)
            vpage = self.alloc_page()
            self._pages[vpage] = ppage
            vpages.append(vpage)
        return vpages


@dataclass
class CandidateSet:
    """Ordered pool of virtual line addresses sharing one page offset.

    Carries lazily computed physical-address and set-key arrays so that the
    engine can resolve which pool members map to a given cache set without
    per-address Python work. `validate=False` skips the shared-offset and
    duplicate checks for pools derived from an already-validated one.
    """

    addrs: list[VirtAddr]
    page_offset: int
    space: AddressSpace
    filtered: bool = False
    validate: InitVar[bool] = True
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self, validate: bool) -> None:
        if not validate:
            return
        if any(page_offset(a) != self.page_offset for a in self.addrs):
            raise AddressError("candidate addresses must share the requested page offset")
        if len(set(self.addrs)) != len(self.addrs):
            raise AddressError("candidate addresses must be distinct")

    def __len__(self) -> int:
        return len(self.addrs)

    def pas(self):
        import numpy as np

        arr = self._cache.get("pas")
        if arr is None:
            arr = np.array([self.space.translate(a) for a in self.addrs], dtype=np.uint64)
            self._cache["pas"] = arr
        return arr

    def level_keys(self, geometry: CacheGeometry, level: Level):
        """Per-position congruence keys: L2 set index, or slice*sets+set for LLC/SF."""
        import numpy as np

        tag = ("keys", id(geometry), level)
        arr = self._cache.get(tag)
        if arr is None:
            pas = self.pas()
            lo, _ = geometry.index_range(level)
            sets = geometry.shape(level).sets
            idx = ((pas >> np.uint64(lo)) & np.uint64(sets - 1)).astype(np.int64)
            if level in (Level.LLC, Level.SF):
                arr = geometry.slice_of_array(pas) * sets + idx
            else:
                arr = idx
            self._cache[tag] = arr
        return arr

    def matching_positions(self, geometry: CacheGeometry, level: Level, key: int):
        """Positions (ascending) whose address maps to the keyed set."""
        import numpy as np

        return np.nonzero(self.level_keys(geometry, level) == key)[0]

    def shifted(self, delta: int) -> "CandidateSet":
        """Same pages at page offset +delta. Valid while offsets stay inside the page."""
        new_off = self.page_offset + delta
        if not 0 <= new_off < (1 << PAGE_BITS):
            raise AddressError("shift leaves the page")
        out = CandidateSet(
            addrs=[a + delta for a in self.addrs],
            page_offset=new_off,
            space=self.space,
            filtered=self.filtered,
            validate=False,
        )
        if "pas" in self._cache:
            out._cache["pas"] = self._cache["pas"] + delta
        return out

    def subset(self, positions) -> "CandidateSet":
        """New pool holding the given positions, reusing translations."""
        out = CandidateSet(
            addrs=[self.addrs[int(p)] for p in positions],
            page_offset=self.page_offset,
            space=self.space,
            filtered=self.filtered,
            validate=False,
        )
        if "pas" in self._cache:
            out._cache["pas"] = self._cache["pas"][positions]
        return out


def gen_candidates(space: AddressSpace, page_off: int, count: int) -> CandidateSet:
    """`count` distinct virtual line addresses with the given page offset, one per page."""
    import numpy as np

    if count < 1:
        raise AddressError(f"candidate count must be positive, got {count}")
    if page_off % LINE_BYTES or not 0 <= page_off < (1 << PAGE_BITS):
        raise AddressError(f"page offset must be 64-byte aligned and within a page, got {page_off}")
    vpages = space.alloc_mapped_pages(count)
    addrs = [(vp << PAGE_BITS) | page_off for vp in vpages]
    out = CandidateSet(addrs=addrs, page_offset=page_off, space=space)
    out._cache["pas"] = np.array(
        [(space._pages[vp] << PAGE_BITS) | page_off for vp in vpages], dtype=np.uint64
    )
    return out


def candidate_pool_size(geometry: CacheGeometry, level: Level, multiplier: int = 3) -> int:
    """Default pool size: multiplier * uncertainty * ways of the target structure."""
    u = uncertainty(geometry)
    u_level = u.l2_sets if level == Level.L2 else u.llc_sets
    return multiplier * u_level * geometry.shape(level).ways
