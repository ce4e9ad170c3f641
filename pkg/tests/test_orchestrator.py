import itertools
import random

import pytest
from hypothesis import given, strategies as st

from cxlpool.channel import MAX_PAYLOAD
from cxlpool.errors import DuplicateHost, HostNotActive, NoDeviceAvailable, UnknownDevice
from cxlpool.orchestrator import (MESSAGE_TYPES, AllocateReply, AllocateRequest, DeviceRecord,
                                  DrainComplete, FailureReport, Health, Heartbeat, HostStatus,
                                  HotAddAnnounce, HotRemoveRequest, MigrateCommand, MigrateDone,
                                  OrchestratorState, allocate_device, check_invariants,
                                  complete_drain, decode_message, handle_failure, handle_heartbeat,
                                  host_lost, hot_add_host, hot_remove_host, max_encoded_size)
from cxlpool.topology import PcieDeviceSpec

from oracles import choose_device, moves_for_threshold


def state(owners, loads=None, hosts=(0, 1, 2)):
    st_ = OrchestratorState(hosts={h: HostStatus.ACTIVE for h in hosts})
    for i, owner in enumerate(owners):
        st_.devices[i] = DeviceRecord(owner, "nic", (loads or [0.0] * len(owners))[i])
    return st_


# -- allocation ------------------------------------------------------------------

def test_local_under_threshold_wins():
    s = state([0, 1], [0.5, 0.1])
    assert allocate_device(s, 0, 1) == 0
    assert s.assignments == {(0, 1): 0}


def test_overloaded_local_falls_back_to_least_loaded():
    s = state([0, 1, 2], [0.9, 0.6, 0.3])
    assert allocate_device(s, 0) == 2


def test_tie_goes_to_lowest_id():
    s = state([0, 1, 2], [0.9, 0.3, 0.3])
    assert allocate_device(s, 0) == 1


def test_all_failed():
    s = state([0, 1])
    for d in s.devices.values():
        d.health = Health.FAILED
    with pytest.raises(NoDeviceAvailable):
        allocate_device(s, 0)


def test_exhaustive_three_device_enumeration():
    grid = [0.0, 0.3, 0.5, 0.8, 0.9]
    checked = 0
    for owners in itertools.product([0, 1, 2], repeat=3):
        for loads in itertools.product(grid, repeat=3):
            for failed in itertools.product([False, True], repeat=3):
                s = state(list(owners), list(loads))
                for i, f in enumerate(failed):
                    if f:
                        s.devices[i].health = Health.FAILED
                model = {i: (owners[i], loads[i], not failed[i]) for i in range(3)}
                want = choose_device(model, 0, 0.8)
                if want is None:
                    with pytest.raises(NoDeviceAvailable):
                        allocate_device(s, 0)
                else:
                    assert allocate_device(s, 0) == want, (owners, loads, failed)
                checked += 1
    assert checked == 27 * 125 * 8


def test_draining_hosts_devices_are_excluded():
    s = state([0, 1], [0.0, 0.7])
    s.hosts[0] = HostStatus.DRAINING
    assert allocate_device(s, 1) == 1
    with pytest.raises(HostNotActive):
        allocate_device(s, 0)


def test_allocation_is_deterministic():
    rng = random.Random(1)
    for _ in range(200):
        loads = [round(rng.random(), 1) for _ in range(5)]
        owners = [rng.randrange(3) for _ in range(5)]
        a = allocate_device(state(owners, loads), 1)
        b = allocate_device(state(owners, loads), 1)
        assert a == b


# -- heartbeats -------------------------------------------------------------------

def test_light_heartbeat():
    s = state([0, 1])
    assert handle_heartbeat(s, 0, 0, 0.4) == []
    assert s.devices[0].health is Health.HEALTHY and s.devices[0].load == 0.4


def test_heavy_heartbeat_moves_one_of_three():
    s = state([0, 1])
    for w in range(3):
        s.assignments[(w, w)] = 0
    plan = handle_heartbeat(s, 0, 0, 0.9)
    assert len(plan) == 1
    assert s.devices[0].health is Health.OVERLOADED
    # remote users move first
    assert plan[0].workload[0] != 0 and plan[0].new_device == 1


def test_unknown_device():
    with pytest.raises(UnknownDevice):
        handle_heartbeat(state([0]), 0, 9, 0.1)
    with pytest.raises(ValueError):
        handle_heartbeat(state([0]), 0, 0, 1.5)


def test_linear_projection_oracle():
    rng = random.Random(5)
    for _ in range(500):
        n_users = rng.randint(1, 8)
        load = round(rng.uniform(0.8, 1.0), 3)
        s = state([0, 1, 2], [0.0, rng.random() * 0.5, rng.random() * 0.5])
        for w in range(n_users):
            s.assignments[(rng.randrange(3), 100 + w)] = 0
        plan = handle_heartbeat(s, 0, 0, load)
        assert len(plan) == moves_for_threshold(load, n_users, 0.8)
        assert s.devices[0].load < 0.8
        assert not check_invariants(s)


def test_failed_heartbeat_delegates_to_failure():
    s = state([0, 1])
    s.assignments[(0, 0)] = 0
    plan = handle_heartbeat(s, 0, 0, 0.0, "failed")
    assert [m.new_device for m in plan] == [1]


# -- failure ----------------------------------------------------------------------

def test_failure_moves_both_workloads():
    s = state([0, 1])
    s.assignments[(0, 0)] = 0
    s.assignments[(2, 0)] = 0
    plan = handle_failure(s, 0)
    assert sorted(m.workload for m in plan) == [(0, 0), (2, 0)]
    assert all(m.new_device == 1 for m in plan)
    assert not check_invariants(s)


def test_unassigned_failure_empty_plan():
    s = state([0, 1])
    assert handle_failure(s, 1) == []
    assert s.devices[1].health is Health.FAILED


def test_only_device_fails():
    s = state([0])
    s.assignments[(1, 0)] = 0
    with pytest.raises(NoDeviceAvailable) as exc:
        handle_failure(s, 0)
    assert list(exc.value.orphaned) == [(1, 0)]
    assert s.assignments == {} and not check_invariants(s)


def test_host_lost_drops_own_work_and_fails_devices():
    s = state([0, 1])
    s.assignments[(1, 0)] = 0    # host 1 uses host 0's device
    s.assignments[(0, 5)] = 1    # host 0's own workload
    plan, orphaned = host_lost(s, 0)
    assert s.hosts[0] is HostStatus.REMOVED
    assert (0, 5) not in s.assignments
    assert [(m.workload, m.new_device) for m in plan] == [((1, 0), 1)]
    assert orphaned == [] and not check_invariants(s)


# -- hot remove / add ---------------------------------------------------------------

def test_hot_remove_migrates_then_removes():
    s = state([0, 1])
    s.assignments[(1, 0)] = 0
    s.assignments[(2, 0)] = 0
    plan = hot_remove_host(s, 0)
    assert s.hosts[0] is HostStatus.DRAINING and not plan.removed
    assert sorted(m.workload for m in plan.migrations) == [(1, 0), (2, 0)]
    assert all(s.assignments[m.workload] == 1 for m in plan.migrations)
    assert allocate_device(s, 2) == 1
    complete_drain(s, 0)
    assert s.hosts[0] is HostStatus.REMOVED
    assert not check_invariants(s)


def test_hot_remove_idle_host():
    s = state([0, 1])
    plan = hot_remove_host(s, 2)
    assert plan.removed and s.hosts[2] is HostStatus.REMOVED


def test_hot_remove_with_nowhere_to_go_changes_nothing():
    s = state([0])
    s.assignments[(1, 0)] = 0
    with pytest.raises(NoDeviceAvailable):
        hot_remove_host(s, 0)
    assert s.hosts[0] is HostStatus.ACTIVE and s.assignments == {(1, 0): 0}


def test_hot_add():
    s = state([0])
    hot_add_host(s, 3, [PcieDeviceSpec(7, 3, "nic")])
    assert len(s.devices) == 2 and s.devices[7].load == 0.0
    with pytest.raises(DuplicateHost):
        hot_add_host(s, 3)


def test_rebalance_can_pick_the_new_device():
    s = state([0, 1], [0.0, 0.7])
    for w in range(4):
        s.assignments[(2, w)] = 0    # host 2 owns no device
    hot_add_host(s, 3, [PcieDeviceSpec(9, 3, "nic")])
    plan = handle_heartbeat(s, 0, 0, 0.95)
    assert plan and plan[0].new_device == 9


# -- messages -----------------------------------------------------------------------

def test_all_messages_fit_a_slot():
    assert max_encoded_size() <= MAX_PAYLOAD
    assert len(MESSAGE_TYPES) == 9


u32 = st.integers(0, 2**32 - 1)
i32 = st.integers(-2**31, 2**31 - 1)
u8 = st.integers(0, 255)
msgs = st.one_of(
    st.builds(AllocateRequest, u32, u32, u8),
    st.builds(AllocateReply, u32, u32, i32),
    st.builds(Heartbeat, u32, i32, st.floats(allow_nan=False), u8),
    st.builds(FailureReport, u32, u32),
    st.builds(MigrateCommand, u32, u32, i32, i32),
    st.builds(MigrateDone, u32, u32, i32),
    st.builds(HotRemoveRequest, u32),
    st.builds(DrainComplete, u32),
    st.builds(HotAddAnnounce, u32),
)


@given(msgs)
def test_message_round_trip(m):
    raw = m.encode()
    assert len(raw) <= MAX_PAYLOAD
    back = decode_message(raw)
    assert back == m and back.encode() == raw
