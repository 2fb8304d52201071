import random

import pytest

from probelab.addresses import AddressSpace
from probelab.geometry import mini, skylake_sp
from probelab.machine import MachineConfig, MachineState
from probelab.timing import AttackOracle


@pytest.fixture
def mini_rig():
    """Small geometry: fast machine + attacker space + oracle."""
    geo = mini()
    machine = MachineState(geo, MachineConfig(seed=1234))
    space = AddressSpace(geo, seed=1234)
    return machine, space, AttackOracle(machine, space)


@pytest.fixture
def skx_rig():
    geo = skylake_sp(28)
    machine = MachineState(geo, MachineConfig(seed=99))
    space = AddressSpace(geo, seed=99)
    return machine, space, AttackOracle(machine, space)


def make_rig(geo, seed=0, **machine_kw):
    machine = MachineState(geo, MachineConfig(seed=seed, **machine_kw))
    space = AddressSpace(geo, seed=seed)
    return machine, space, AttackOracle(machine, space)


def congruent_lines(machine, space, pool, target, level, count=None):
    """Ground-truth congruent pool members (test oracle)."""
    out = [a for a in pool.addrs if a != target and machine.congruent(space, target, a, level)]
    return out if count is None else out[:count]


@pytest.fixture
def rng():
    return random.Random(0)
