import math

import pytest

from cxlpool.controlplane import (ControlPlane, ControlPlaneConfig, WorkloadSpec, demo_topology,
                                  demo_workloads)
from cxlpool.orchestrator import HostStatus
from cxlpool.topology import HostSpec, LinkSpec, MhdSpec, PcieDeviceSpec, PodTopology

MS = 1e6


@pytest.fixture(scope="module")
def failover():
    cp = ControlPlane(demo_topology(), demo_workloads(), seed=1)
    cp.fail_device_at(0, 20.5 * MS)
    report = cp.run(40 * MS)
    return cp, report


def events(cp, name):
    return [e for e in cp.timeline if e.event == name]


def test_heartbeats_on_exact_intervals(failover):
    cp, _ = failover
    beats = [r for r in cp.engine.trace.of_kind("heartbeat") if r.actor == "agent2"]
    assert [r.time_ns for r in beats] == [10 * MS, 20 * MS, 30 * MS]


def test_failure_reported_at_next_monitor_tick(failover):
    cp, _ = failover
    (rep,) = events(cp, "failure_reported")
    assert rep.device == "0"
    assert rep.time == math.ceil(20.5 * MS / MS) * MS


def test_every_affected_workload_reassigned(failover):
    cp, report = failover
    # workloads that were on device 0 when it failed
    before = {}
    for e in cp.timeline:
        if e.time > 20.5 * MS:
            break
        if e.event in ("assigned", "migrated"):
            before[e.workload] = e.device
    affected = {w for w, d in before.items() if d == "0"}
    assert affected
    moved = {e.workload for e in events(cp, "migrated")}
    assert affected <= moved
    assert all(d != 0 for d in cp.state.assignments.values())
    # reassignment finished within a millisecond of the report
    last = max(e.time for e in events(cp, "migrated") if e.workload in affected)
    assert last - 21 * MS < 1 * MS


def test_conservation_and_safety(failover):
    _, report = failover
    assert report.submitted == report.completed + report.cancelled
    assert report.completed > 0
    assert report.violations == []
    assert report.transitions > 0


def small_pod(nic_hosts, hosts=4):
    """Hosts on one MHD; one 100 Gbps NIC on each host in ``nic_hosts``."""
    return PodTopology([HostSpec(h) for h in range(hosts)], [MhdSpec(0)],
                       [LinkSpec(h, 0, 8) for h in range(hosts)],
                       [PcieDeviceSpec(i, h, "nic") for i, h in enumerate(nic_hosts)])


def test_drain_before_switch_loses_nothing():
    """Four busy workloads share NIC 0 at 88% utilisation, so the first
    heartbeat migrates one of them while its I/O is in flight."""
    wls = [WorkloadSpec(h, w, io_bytes=9000, rate_gbps=22.0) for h in (0, 3) for w in range(2)]
    cp = ControlPlane(demo_topology(), wls, seed=3)
    report = cp.run(25 * MS)
    cmds = events(cp, "rebalance_command")
    assert cmds and cmds[0].workload.startswith("3:")
    assert report.cancelled == 0
    assert report.submitted == report.completed
    assert report.violations == []


def test_hot_remove_drains_then_removes():
    # NICs on hosts 1 and 2; host 3 has none and borrows NIC 0 from host 1
    wls = [WorkloadSpec(h, w, io_bytes=9000, rate_gbps=2.0) for h in (1, 3) for w in range(2)]
    cp = ControlPlane(small_pod([1, 2]), wls, seed=2)
    cp.hot_remove_at(1, 15 * MS)
    report = cp.run(30 * MS)
    t_removed = cp.removed_at[1]
    assert cp.state.hosts[1] is HostStatus.REMOVED
    drains = events(cp, "drain_command")
    assert {e.workload for e in drains} == {"3:0", "3:1"}
    assert all(e.device == "1" and e.time <= t_removed for e in drains)
    moved = {e.workload for e in events(cp, "migrated") if e.time <= t_removed}
    assert {"3:0", "3:1"} <= moved
    assert {e.workload for e in events(cp, "cancelled")} == {"1:0", "1:1"}
    # nothing was allocated on host 1's device after the request
    assert not [a for a in cp.orchestrator.allocations if a[0] >= 15 * MS and a[2] == 0]
    assert report.conserved and report.violations == []


def test_crash_is_detected_by_missed_heartbeats():
    cfg = ControlPlaneConfig()
    cp = ControlPlane(demo_topology(), demo_workloads(), seed=4, config=cfg)
    cp.crash_host_at(2, 25 * MS)
    report = cp.run(70 * MS)
    (lost,) = events(cp, "host_lost")
    # last beat at 20 ms, declared dead once three intervals have passed
    assert 50 * MS <= lost.time <= 20 * MS + (cfg.missed_heartbeats + 1) * cfg.heartbeat_interval_ns
    assert cp.state.hosts[2] is HostStatus.REMOVED
    assert all(k[0] != 2 for k in cp.state.assignments)
    assert report.conserved and report.violations == []


def test_hot_add_device_becomes_a_target():
    wls = [WorkloadSpec(3, w, io_bytes=9000, rate_gbps=22.0) for w in range(4)]
    cp = ControlPlane(small_pod([0]), wls, seed=5)
    cp.hot_add_at(HostSpec(4), [LinkSpec(4, 0, 8)], [PcieDeviceSpec(9, 4, "nic")], 5 * MS)
    report = cp.run(25 * MS)
    assert events(cp, "host_added")
    assert cp.state.hosts[4] is HostStatus.ACTIVE
    cmds = events(cp, "rebalance_command")
    assert cmds and all(e.device == "9" for e in cmds)
    assert report.conserved and report.violations == []


def test_same_seed_same_trace():
    def run():
        cp = ControlPlane(demo_topology(), demo_workloads(), seed=8)
        cp.fail_device_at(1, 12.3 * MS)
        cp.run(20 * MS)
        return cp.engine.trace.digest(), cp.timeline_csv()
    assert run() == run()
