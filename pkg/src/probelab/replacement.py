"""Per-set replacement policy automata: LRU, tree-PLRU, and random.

Each automaton tracks only way indices. The owning cache set decides when to
consult the policy (victim choice on insertion into a full set) and notifies
it on touches, insertions and invalidations. Policies are cloneable so that
attack code can maintain an offline belief replica fed only by its own
accesses.
"""
from __future__ import annotations

import random


class ReplacementPolicy:
    kind = "?"

    def __init__(self, ways: int):
        self.ways = ways

    def touch(self, way: int) -> None:
        raise NotImplementedError

    def victim(self) -> int:
        """Way the next insertion into a full set will evict."""
        raise NotImplementedError

    def invalidate(self, way: int) -> None:
        pass

    def clone(self) -> "ReplacementPolicy":
        raise NotImplementedError


class LruPolicy(ReplacementPolicy):
    kind = "lru"

    def __init__(self, ways: int):
        super().__init__(ways)
        self._stamp = [0] * ways  # last-touch counter per way; oldest wins
        self._clock = 0

    def touch(self, way: int) -> None:
        self._clock += 1
        self._stamp[way] = self._clock

    def victim(self) -> int:
        stamps = self._stamp
        best = 0
        best_v = stamps[0]
        for way in range(1, self.ways):
            v = stamps[way]
            if v < best_v:
                best, best_v = way, v
        return best

    def invalidate(self, way: int) -> None:
        # An invalidated way becomes the preferred victim.
        self._stamp[way] = -1

    def clone(self) -> "LruPolicy":
        c = LruPolicy(self.ways)
        c._stamp = list(self._stamp)
        c._clock = self._clock
        return c


class TreePlruPolicy(ReplacementPolicy):
    """Tree pseudo-LRU over the next power of two of `ways`.

    Nodes store 0/1 "go left/right next" hints. Leaves at index >= ways never
    hold data; victim descent steers away from them at the lowest node whose
    pointed subtree contains no valid leaf.
    """

    kind = "tree-plru"

    def __init__(self, ways: int):
        super().__init__(ways)
        leaves = 1
        while leaves < ways:
            leaves <<= 1
        self._leaves = leaves
        self._bits = [0] * max(1, leaves - 1)

    def touch(self, way: int) -> None:
        node, lo, hi = 0, 0, self._leaves
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if way < mid:
                self._bits[node] = 1  # point away from the touched half
                node, hi = 2 * node + 1, mid
            else:
                self._bits[node] = 0
                node, lo = 2 * node + 2, mid

    def victim(self) -> int:
        node, lo, hi = 0, 0, self._leaves
        while hi - lo > 1:
            mid = (lo + hi) // 2
            go_right = self._bits[node] == 1
            if go_right and mid >= self.ways:
                go_right = False  # right subtree entirely invalid
            if go_right:
                node, lo = 2 * node + 2, mid
            else:
                node, hi = 2 * node + 1, mid
        return min(lo, self.ways - 1)

    def clone(self) -> "TreePlruPolicy":
        c = TreePlruPolicy(self.ways)
        c._bits = list(self._bits)
        return c


class RandomPolicy(ReplacementPolicy):
    kind = "random"

    def __init__(self, ways: int, rng: random.Random | None = None):
        super().__init__(ways)
        self._rng = rng or random.Random(0)

    def touch(self, way: int) -> None:
        pass

    def victim(self) -> int:
        return self._rng.randrange(self.ways)

    def clone(self) -> "RandomPolicy":
        # A belief replica cannot reproduce the machine's private RNG stream;
        # the clone diverges by construction, as it would on hardware.
        return RandomPolicy(self.ways, random.Random(1))


POLICY_KINDS = ("lru", "tree-plru", "random")


def make_policy(kind: str, ways: int, rng: random.Random | None = None) -> ReplacementPolicy:
    if kind == "lru":
        return LruPolicy(ways)
    if kind == "tree-plru":
        return TreePlruPolicy(ways)
    if kind == "random":
        return RandomPolicy(ways, rng)
    raise ValueError(f"unknown replacement policy {kind!r}; known: {POLICY_KINDS}")
