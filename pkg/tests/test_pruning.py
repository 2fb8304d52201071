import math
import random

import numpy as np
import pytest

from probelab.addresses import CandidateSet, gen_candidates, uncertainty
from probelab.geometry import CacheGeometry, Level, LevelShape, mini, skylake_sp
from probelab.noise import NoiseModel, attach
from probelab.pruning import (
    ALGORITHMS,
    EstimateError,
    FilterError,
    PruneConfig,
    PruneStats,
    binary_search_prune,
    build_bulk,
    build_sf_set,
    estimate_bulk_time,
    extend_llc_to_sf,
    group_test_prune,
    l2_filter,
    prime_scope_prune,
)
from probelab.timing import AttackOracle
from tests.conftest import congruent_lines, make_rig


def prune_rig(geo, seed, **kw):
    machine, space, oracle = make_rig(geo, seed=seed, **kw)
    from probelab.addresses import candidate_pool_size

    pool = gen_candidates(space, 0x140, candidate_pool_size(geo, Level.SF))
    target, rest = pool.addrs[0], pool.subset(range(1, len(pool.addrs)))
    return machine, space, oracle, target, rest


def assert_valid_sf_set(machine, space, sf_set, target):
    geo = machine.geometry
    assert sf_set is not None
    assert len(set(sf_set.addrs)) == geo.shape(Level.SF).ways
    assert all(machine.congruent(space, target, a, Level.SF) for a in sf_set.addrs)


@pytest.mark.parametrize("algorithm", ALGORITHMS)
def test_each_algorithm_builds_valid_sf_set_on_mini(algorithm):
    geo = mini()
    machine, space, oracle, target, rest = prune_rig(geo, seed=hash(algorithm) % 1000)
    sf_set, stats = build_sf_set(
        oracle, target, rest, algorithm, PruneConfig(), random.Random(3), filtering=False
    )
    assert stats.success
    assert_valid_sf_set(machine, space, sf_set, target)


@pytest.mark.parametrize("algorithm", ["bins", "gtop"])
def test_algorithms_succeed_with_filtering_on_skylake(algorithm):
    geo = skylake_sp(28)
    machine, space, oracle, target, rest = prune_rig(geo, seed=21)
    sf_set, stats = build_sf_set(
        oracle, target, rest, algorithm, PruneConfig(), random.Random(4), filtering=True
    )
    assert stats.success
    assert_valid_sf_set(machine, space, sf_set, target)


def test_impossible_instance_fails():
    """A pool holding fewer congruent addresses than ways cannot succeed."""
    geo = mini()
    machine, space, oracle = make_rig(geo, seed=5)
    pool = gen_candidates(space, 0x140, 600)
    target = pool.addrs[0]
    keys = pool.level_keys(geo, Level.LLC)
    w_llc = geo.shape(Level.LLC).ways
    cong_pos = [int(p) for p in (keys[1:] == keys[0]).nonzero()[0][: w_llc - 1]]
    noncong_pos = [int(p) for p in (keys[1:] != keys[0]).nonzero()[0][:150]]
    sub = pool.subset([p + 1 for p in cong_pos + noncong_pos])
    cfg = PruneConfig(max_attempts=2, time_limit_ms=50)
    evset, stats = group_test_prune(oracle, target, sub, cfg, random.Random(0))
    assert evset is None and not stats.success


def test_binary_search_walkthrough_visits_4_6_5():
    """Nine candidates, two-way target, congruent at positions 5 and 6
    (1-indexed): the first bisection tests prefixes 4, 6, 5 and tips at 6."""
    geo = CacheGeometry(
        l1=LevelShape(2, 64),
        l2=LevelShape(4, 256),
        llc=LevelShape(2, 512),
        sf=LevelShape(3, 512),
        n_slices=2,
    )
    machine, space, oracle = make_rig(geo, seed=8)
    pool = gen_candidates(space, 0x140, 4000)
    target = pool.addrs[0]
    cong = congruent_lines(machine, space, pool, target, Level.LLC, 2)
    non_cong = [
        a
        for a in pool.addrs[1:]
        if not machine.congruent(space, target, a, Level.L2)
    ][:7]
    ordered = non_cong[:4] + [cong[0], cong[1]] + non_cong[4:]
    sub = CandidateSet(ordered, 0x140, space)
    cfg = PruneConfig(record_tests=True)

    class FixedOrderRandom(random.Random):
        pass

    rng = FixedOrderRandom(0)
    # keep the list order: identity permutation
    import probelab.pruning as pruning

    orig = pruning._shuffled
    pruning._shuffled = lambda n, _rng: list(range(n))
    try:
        evset, stats = binary_search_prune(oracle, target, sub, cfg, rng)
    finally:
        pruning._shuffled = orig
    assert evset is not None
    assert stats.test_lengths[:3] == [4, 6, 5]
    assert machine.congruent(space, target, evset.addrs[0], Level.LLC)
    assert evset.addrs[0] == ordered[5]  # tipping point at position 6, 1-indexed


def test_binary_search_loop_invariant_noiseless():
    """At every test, UB-prefixes evict and LB-prefixes do not (oracle view)."""
    geo = mini()
    machine, space, oracle = make_rig(geo, seed=12)
    pool = gen_candidates(space, 0x140, 300)
    target, rest = pool.addrs[0], pool.subset(range(1, 300))
    keys = rest.level_keys(geo, Level.LLC)
    tkey = oracle.level_key(target, Level.LLC)
    w = geo.shape(Level.LLC).ways

    outcomes = []
    orig = AttackOracle.eviction_run

    def spy(self, tgt, chosen, total, level, parallel, rounds=None, pas=False):
        out = orig(self, tgt, chosen, total, level, parallel, rounds, pas)
        outcomes.append((total, out, len(chosen)))
        return out

    AttackOracle.eviction_run = spy
    try:
        evset, stats = binary_search_prune(oracle, target, rest, PruneConfig(), random.Random(0))
    finally:
        AttackOracle.eviction_run = orig
    assert evset is not None
    for total, out, n_cong in outcomes:
        # noiseless: outcome is exactly "the tested prefix holds >= W congruent"
        assert out == (n_cong >= w)


def test_group_test_access_complexity_linear_in_n():
    """Fitted exponent of accesses vs N stays near 1 (O(W^2 N) family)."""
    geo = mini()
    ns, accesses = [1000, 2000, 4000, 8000], []
    for n in ns:
        machine, space, oracle = make_rig(geo, seed=n)
        pool = gen_candidates(space, 0x140, n + 1)
        target, rest = pool.addrs[0], pool.subset(range(1, n + 1))
        evset, stats = group_test_prune(
            oracle, target, rest, PruneConfig(time_limit_ms=10000), random.Random(1)
        )
        assert evset is not None
        accesses.append(stats.accesses)
    slope, _ = np.polyfit(np.log(ns), np.log(accesses), 1)
    assert abs(slope - 1.0) < 0.15


def test_group_test_scaling_in_ways_superlinear():
    """Access counts grow superlinearly as associativity rises at fixed UW."""
    counts = {}
    for ways in (4, 8):
        geo = CacheGeometry(
            l1=LevelShape(2, 64),
            l2=LevelShape(4, 256),
            llc=LevelShape(ways, 512),
            sf=LevelShape(ways + 1, 512),
            n_slices=2,
        )
        machine, space, oracle = make_rig(geo, seed=ways)
        n = 3 * uncertainty(geo).llc_sets * ways
        pool = gen_candidates(space, 0x140, n + 1)
        target, rest = pool.addrs[0], pool.subset(range(1, n + 1))
        evset, stats = group_test_prune(
            oracle, target, rest, PruneConfig(time_limit_ms=10000), random.Random(2)
        )
        assert evset is not None
        counts[ways] = stats.accesses
    assert counts[8] > 2.2 * counts[4]  # superlinear: doubling W more than doubles


def test_recharge_reduces_scan_work_paired_seeds():
    geo = mini()
    wins = 0
    trials = 6
    for seed in range(trials):
        examined = {}
        for recharge in (False, True):
            machine, space, oracle = make_rig(geo, seed=100 + seed)
            pool = gen_candidates(space, 0x140, 800)
            target, rest = pool.addrs[0], pool.subset(range(1, 800))
            cfg = PruneConfig(recharge=recharge, time_limit_ms=10000)
            evset, stats = prime_scope_prune(oracle, target, rest, cfg, random.Random(seed))
            assert evset is not None
            examined[recharge] = stats.accesses
        if examined[True] <= examined[False]:
            wins += 1
    assert wins >= trials - 1


def test_l2_filter_size_and_soundness_skylake():
    geo = skylake_sp(28)
    machine, space, oracle, target, rest = prune_rig(geo, seed=31)
    filtered, l2_evset = l2_filter(oracle, target, rest, PruneConfig(), random.Random(0))
    assert filtered.filtered
    n = len(rest)
    u2 = uncertainty(geo).l2_sets
    assert abs(len(filtered) - n / u2) < 0.10 * n / u2
    # zero oracle-congruent loss, noiseless
    kept = set(filtered.addrs)
    for a in rest.addrs:
        if machine.congruent(space, target, a, Level.SF):
            assert a in kept
    # density about one congruent per u_llc/u_l2 candidates
    dens = sum(machine.congruent(space, target, a, Level.SF) for a in filtered.addrs)
    expected = len(filtered) / (uncertainty(geo).llc_sets / u2)
    assert abs(dens - expected) < 6 * math.sqrt(expected) + 3
    assert all(machine.congruent(space, target, a, Level.L2) for a in l2_evset.addrs)


def test_l2_filter_failure_propagates():
    geo = mini()
    machine, space, oracle = make_rig(geo, seed=44)
    pool = gen_candidates(space, 0x140, 2000)
    target = pool.addrs[0]
    keys = pool.level_keys(geo, Level.L2)
    non = [int(p) for p in (keys[1:] != keys[0]).nonzero()[0][:200]]
    sub = pool.subset([p + 1 for p in non])  # no L2-congruent members at all
    with pytest.raises(FilterError):
        l2_filter(oracle, target, sub, PruneConfig(max_attempts=2, time_limit_ms=20), random.Random(0))


def test_extend_llc_to_sf_mini_and_failure():
    geo = mini()  # LLC 3-way, SF 4-way
    machine, space, oracle = make_rig(geo, seed=51)
    pool = gen_candidates(space, 0x140, 900)
    target = pool.addrs[0]
    llc_set, stats = binary_search_prune(
        oracle, target, pool.subset(range(1, 900)), PruneConfig(), random.Random(1)
    )
    assert llc_set is not None
    sf_set = extend_llc_to_sf(oracle, llc_set, pool.subset(range(1, 900)), PruneConfig())
    assert sf_set is not None and len(sf_set.addrs) == geo.sf.ways
    assert all(machine.congruent(space, target, a, Level.SF) for a in sf_set.addrs)
    # the SF set must also evict an LLC-resident target
    assert oracle.eviction_run(target, list(sf_set.addrs), len(sf_set.addrs), Level.LLC, True)
    # devoid pool: no further congruent lines -> failure
    keys = pool.level_keys(geo, Level.LLC)
    tkey = oracle.level_key(target, Level.LLC)
    non = [int(p) + 1 for p in (keys[1:] != tkey).nonzero()[0][:100]]
    assert extend_llc_to_sf(oracle, llc_set, pool.subset(non), PruneConfig()) is None


def test_sf_back_invalidation_behavior_of_built_set():
    """Accessing a built SF set back-invalidates a privately held victim line."""
    geo = mini()
    machine, space, oracle, target, rest = prune_rig(geo, seed=61)
    sf_set, _ = build_sf_set(oracle, target, rest, "bins", PruneConfig(), random.Random(0), filtering=False)
    assert sf_set is not None
    tpa = space.translate(target)
    machine.flush(tpa)
    machine.access(0, tpa)
    assert machine.resident(tpa, Level.SF)
    for _ in range(4):
        for a in sf_set.addrs:
            machine.access(0, space.translate(a))
    assert not machine.resident(tpa, Level.SF)


def test_bulk_page_offset_counts_mini():
    geo = mini()
    machine, space, oracle = make_rig(geo, seed=71)
    sets, bulk = build_bulk(
        oracle, "page-offset", "bins", PruneConfig(), random.Random(0), page_offset=0x140
    )
    u = uncertainty(geo)
    assert bulk.targets_attempted == u.llc_sets
    assert bulk.built == u.llc_sets
    assert bulk.filterings == u.l2_sets
    # duplicate freedom: no two sets share a target pair
    pairs = [machine.pair_of(space.translate(ev.target)) for ev in sets]
    assert len(pairs) == len(set(pairs))
    for ev in sets:
        assert_valid_sf_set(machine, space, ev, ev.target)


def test_bulk_whole_sys_counts_mini():
    geo = mini()
    machine, space, oracle = make_rig(geo, seed=72)
    sets, bulk = build_bulk(oracle, "whole-sys", "bins", PruneConfig(), random.Random(0))
    u = uncertainty(geo)
    assert bulk.targets_attempted == u.llc_sets * 64
    assert bulk.filterings == u.l2_sets
    assert bulk.built == u.llc_sets * 64
    pairs_offsets = {(machine.pair_of(space.translate(ev.target)), ev.target & 0xFFF) for ev in sets}
    assert len(pairs_offsets) == len(sets)


def test_bulk_single_scope():
    geo = mini()
    machine, space, oracle = make_rig(geo, seed=73)
    sets, bulk = build_bulk(oracle, "single", "gtop", PruneConfig(), random.Random(0), page_offset=0x80)
    assert bulk.targets_attempted == 1 and bulk.built == 1 and len(sets) == 1


def test_estimate_bulk_time_arithmetic():
    mk = lambda ms, ok: PruneStats(algorithm="x", success=ok, duration_cycles=int(ms * 2e6))
    stats = [mk(2.0, True)] * 10
    est = estimate_bulk_time(stats, 100)
    assert est == pytest.approx(100 * 2.0 * 2e6)
    half = [mk(2.0, True), mk(2.0, False)] * 5
    assert estimate_bulk_time(half, 100) == pytest.approx(2 * 100 * 2.0 * 2e6)
    with pytest.raises(EstimateError):
        estimate_bulk_time([mk(1.0, False)], 10)


def test_estimate_close_to_measured_bulk_mini():
    geo = mini()
    machine, space, oracle = make_rig(geo, seed=74)
    sets, bulk = build_bulk(
        oracle, "page-offset", "bins", PruneConfig(), random.Random(1), page_offset=0x40
    )
    est = estimate_bulk_time(bulk.per_target, bulk.targets_attempted)
    measured = sum(s.duration_cycles for s in bulk.per_target)
    assert abs(est - measured) / measured < 0.25


def test_noisy_construction_still_verifies_when_it_succeeds():
    geo = mini()
    successes = 0
    for seed in range(8):
        machine, space, oracle = make_rig(geo, seed=200 + seed)
        attach(machine, NoiseModel(rate_per_ms=8.0, seed=seed))
        pool = gen_candidates(space, 0x140, 230)
        target, rest = pool.addrs[0], pool.subset(range(1, 230))
        sf_set, stats = build_sf_set(
            oracle, target, rest, "bins", PruneConfig(), random.Random(seed), filtering=False
        )
        if sf_set is not None:
            successes += 1
            assert oracle.eviction_run(target, list(sf_set.addrs), len(sf_set.addrs), Level.LLC, True)
    assert successes >= 1
