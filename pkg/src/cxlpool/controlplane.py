"""Event-driven orchestrator and per-host agents.

The orchestrator runs as an actor on one host and talks to every agent over a
pair of channels in the shared segment (agent to orchestrator, orchestrator
to agent). Channels are created at boot in host-id order, so their addresses
follow a fixed layout and nobody has to discover them.

Agents run the workloads of their host: each workload submits I/O at a fixed
rate through a :class:`~cxlpool.datapath.VirtualDevice`. Agents also watch
the devices attached to their host, send heartbeats with the measured
utilisation, report failures, and carry out migrations by draining the old
device before switching to the new one.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import NamedTuple

from .channel import SimChannelEnd, channel_create
from .datapath import Fabric, IoRequest, VirtualDevice, attach_remote
from .errors import ChannelDown, DeviceFailed, NoDeviceAvailable, RingFull
from .orchestrator import (HEALTH_CODES, KIND_CODES, KIND_NAMES, NO_DEVICE, AllocateReply,
                           AllocateRequest, DrainComplete, FailureReport, Health, Heartbeat,
                           HostStatus, HotAddAnnounce, HotRemoveRequest, MigrateCommand, MigrateDone,
                           Migration, OrchestratorState, allocate_device, check_invariants,
                           complete_drain, decode_message, handle_failure, handle_heartbeat,
                           host_lost, hot_add_host, hot_remove_host)
from .simcore import Engine, EventKind
from .topology import HostSpec, LatencyParams, LinkSpec, MhdSpec, PcieDeviceSpec, PodTopology

TIMELINE_COLUMNS = ("time", "event", "workload", "device")


@dataclass(frozen=True)
class WorkloadSpec:
    host: int
    id: int
    kind: str = "nic"
    io_kind: str = "udp_tx"
    io_bytes: int = 4096
    rate_gbps: float = 1.0

    @property
    def key(self):
        return (self.host, self.id)

    @property
    def interval_ns(self) -> float:
        return self.io_bytes * 8.0 / self.rate_gbps


@dataclass(frozen=True)
class ControlPlaneConfig:
    heartbeat_interval_ns: float = 10e6
    monitor_interval_ns: float = 1e6
    missed_heartbeats: int = 3
    load_threshold: float = 0.8
    orchestrator_host: int = 0
    channel_slots: int = 32


class TimelineEvent(NamedTuple):
    time: float
    event: str
    workload: str
    device: str


def _wl(key) -> str:
    return "" if key is None else f"{key[0]}:{key[1]}"


def _dev(d) -> str:
    return "" if d is None or d == NO_DEVICE else str(d)


class WorkloadRunner:
    """Submits I/O at a fixed rate to whatever device the workload holds."""

    def __init__(self, plane: "ControlPlane", spec: WorkloadSpec):
        self.plane = plane
        self.spec = spec
        self.vdev: VirtualDevice | None = None
        self.buffer = 0
        self.stopped = False
        self.submitted = 0
        self.completed = 0
        self.cancelled = 0
        self.refused = 0     # submission attempts the device did not accept
        self.migrating = False
        self._phase = float(plane.engine.rng.uniform(0, spec.interval_ns))

    def start(self):
        self.plane.engine.schedule(self._phase, self._tick, actor=f"wl{_wl(self.spec.key)}")

    def bind(self, vdev: VirtualDevice):
        self.vdev = vdev
        self.buffer = vdev.alloc_buffer(self.spec.io_bytes)

    def unbind(self):
        if self.vdev is not None:
            self.vdev.close()
            self.vdev.free_buffer(self.buffer)
        self.vdev = None

    def _tick(self):
        eng = self.plane.engine
        if self.stopped or eng.now >= self.plane.end_ns:
            return
        if self.vdev is not None and not self.migrating:
            req = IoRequest(self.spec.io_kind, self.spec.io_bytes, self.buffer,
                            on_complete=self._done)
            try:
                self.vdev.post_io(req)
                self.submitted += 1
            except (RingFull, DeviceFailed, ChannelDown):
                self.refused += 1
        eng.schedule(self.spec.interval_ns, self._tick, actor=f"wl{_wl(self.spec.key)}")

    def _done(self, req: IoRequest):
        if req.status == "done":
            self.completed += 1
        else:
            self.cancelled += 1


class Agent:
    """Pooling agent of one host."""

    def __init__(self, plane: "ControlPlane", host: int):
        self.plane = plane
        self.host = host
        self.actor = f"agent{host}"
        self.assignments: dict[tuple, int] = {}
        self.workloads: dict[tuple, WorkloadRunner] = {}
        self.reported: set[int] = set()
        self.last_busy: dict[int, float] = {}
        self.running = True
        self.silent = False      # a crashed host stops talking
        self.end: SimChannelEnd | None = None
        self._queued: dict[tuple, list] = {}

    def send(self, msg):
        if not self.silent:
            self.end.post(msg.encode())

    def local_devices(self):
        return sorted(d for d, m in self.plane.fabric.devices.items()
                      if m.spec.attached_host_id == self.host)

    def boot(self):
        eng = self.plane.engine
        cfg = self.plane.config
        for key in sorted(self.workloads):
            w = self.workloads[key].spec
            self.send(AllocateRequest(self.host, w.id, KIND_CODES[w.kind]))
        for d in self.local_devices():
            self.last_busy[d] = self.plane.fabric.devices[d].busy_ns
        first_hb = (eng.now // cfg.heartbeat_interval_ns + 1) * cfg.heartbeat_interval_ns
        first_mon = (eng.now // cfg.monitor_interval_ns + 1) * cfg.monitor_interval_ns
        eng.schedule_at(first_hb, self._heartbeat, actor=self.actor, kind=EventKind.HEARTBEAT)
        eng.schedule_at(first_mon, self._monitor, actor=self.actor)

    # -- periodic work ---------------------------------------------------------
    def _alive(self):
        return self.running and not self.silent and self.plane.engine.now < self.plane.end_ns

    def _heartbeat(self):
        if not self._alive():
            return
        eng, fab = self.plane.engine, self.plane.fabric
        iv = self.plane.config.heartbeat_interval_ns
        beats = 0
        for d in self.local_devices():
            dev = fab.devices[d]
            busy = dev.busy_ns - self.last_busy.get(d, 0.0)
            self.last_busy[d] = dev.busy_ns
            if dev.failed:
                continue
            load = min(1.0, busy / iv)
            eng.log(self.actor, "heartbeat", {"device": d, "load": round(load, 6)})
            self.send(Heartbeat(self.host, d, load, HEALTH_CODES[Health.HEALTHY]))
            beats += 1
        if not beats:
            eng.log(self.actor, "heartbeat", {"device": None})
            self.send(Heartbeat(self.host, NO_DEVICE, 0.0))
        eng.schedule(iv, self._heartbeat, actor=self.actor, kind=EventKind.HEARTBEAT)

    def _monitor(self):
        if not self._alive():
            return
        fab = self.plane.fabric
        for d in self.local_devices():
            if fab.devices[d].failed and d not in self.reported:
                self.reported.add(d)
                self.plane.timeline_add("failure_reported", None, d)
                self.send(FailureReport(self.host, d))
        self.plane.engine.schedule(self.plane.config.monitor_interval_ns, self._monitor,
                                   actor=self.actor)

    # -- messages from the orchestrator ------------------------------------------
    def on_message(self, m):
        if self.silent:
            return
        msg = decode_message(m.payload)
        if isinstance(msg, AllocateReply):
            key = (msg.host, msg.workload)
            if msg.device == NO_DEVICE:
                self.plane.timeline_add("allocate_failed", key, None)
                return
            self._bind(key, msg.device)
            self.plane.timeline_add("assigned", key, msg.device)
        elif isinstance(msg, MigrateCommand):
            key = (msg.host, msg.workload)
            if self.workloads[key].migrating:
                self._queued.setdefault(key, []).append(msg)
            else:
                self._migrate(key, msg)
        elif isinstance(msg, DrainComplete):
            self.running = False
            self.plane.timeline_add("host_removed", None, None)

    def _bind(self, key, device):
        self.assignments[key] = device
        runner = self.workloads[key]
        runner.bind(attach_remote(self.plane.fabric, self, self.host, device))

    def _migrate(self, key, cmd: MigrateCommand):
        runner = self.workloads[key]
        runner.migrating = True
        self.plane.timeline_add("migrate_start", key, cmd.to_device)

        def switch():
            runner.unbind()
            self.assignments.pop(key, None)
            if cmd.to_device == NO_DEVICE:
                runner.stopped = True
                self.plane.timeline_add("cancelled", key, cmd.from_device)
            else:
                self._bind(key, cmd.to_device)
                self.plane.timeline_add("migrated", key, cmd.to_device)
            runner.migrating = False
            self.send(MigrateDone(self.host, key[1], cmd.to_device))
            queued = self._queued.get(key)
            if queued:
                self._migrate(key, queued.pop(0))

        if runner.vdev is None:
            switch()
        else:
            # stop accepting posts, let in-flight I/O finish, then switch
            runner.vdev.quiesce(switch)


class Orchestrator:
    """Pooling orchestrator actor; owns the OrchestratorState."""

    def __init__(self, plane: "ControlPlane"):
        self.plane = plane
        self.state = OrchestratorState.from_topology(plane.fabric.topology,
                                                     plane.config.load_threshold)
        self.actor = "orchestrator"
        self.ends: dict[int, SimChannelEnd] = {}
        self.last_seen: dict[int, float] = {}
        self.pending: dict[int, set] = {}       # draining host -> workloads still moving
        self.in_motion: set = set()
        self.allocations: list[tuple[float, tuple, int]] = []
        self.violations: list[tuple[float, str]] = []
        self.transitions = 0

    def send(self, host, msg):
        self.ends[host].post(msg.encode())

    def check(self):
        self.transitions += 1
        for v in check_invariants(self.state):
            self.violations.append((self.plane.engine.now, v))

    def on_message(self, host, m):
        msg = decode_message(m.payload)
        now = self.plane.engine.now
        self.last_seen[host] = now
        st = self.state
        if isinstance(msg, AllocateRequest):
            key = (msg.host, msg.workload)
            try:
                dev = allocate_device(st, msg.host, msg.workload, KIND_NAMES[msg.kind_code])
            except NoDeviceAvailable:
                dev = NO_DEVICE
            else:
                self.allocations.append((now, key, dev))
            self.check()
            self.send(msg.host, AllocateReply(msg.host, msg.workload, dev))
        elif isinstance(msg, Heartbeat):
            if msg.device != NO_DEVICE and st.devices[msg.device].health is not Health.FAILED:
                plan = handle_heartbeat(st, msg.host, msg.device, msg.load)
                self.check()
                self._dispatch(plan, "rebalance")
        elif isinstance(msg, FailureReport):
            self._fail(msg.device)
        elif isinstance(msg, MigrateDone):
            key = (msg.host, msg.workload)
            self.in_motion.discard(key)
            for h, waiting in list(self.pending.items()):
                waiting.discard(key)
                if not waiting and st.hosts[h] is HostStatus.DRAINING:
                    self._finish_drain(h)
        elif isinstance(msg, HotRemoveRequest):
            self._hot_remove(msg.host)
        elif isinstance(msg, HotAddAnnounce):
            specs = [d.spec for d in self.plane.fabric.devices.values()
                     if d.spec.attached_host_id == msg.host]
            hot_add_host(st, msg.host, specs)
            self.check()
            self.plane.timeline_add("host_added", None, None)

    def _dispatch(self, plan: list[Migration], reason: str):
        for mv in plan:
            self.allocations.append((self.plane.engine.now, mv.workload, mv.new_device))
            self.in_motion.add(mv.workload)
            self.plane.timeline_add(f"{reason}_command", mv.workload, mv.new_device)
            self.send(mv.workload[0], MigrateCommand(mv.workload[0], mv.workload[1],
                                                     mv.old_device, mv.new_device))

    def _fail(self, device):
        st = self.state
        if st.devices[device].health is Health.FAILED:
            return
        try:
            plan = handle_failure(st, device)
        except NoDeviceAvailable as exc:
            self.check()
            for key in exc.orphaned:
                self.plane.timeline_add("orphaned", key, device)
                self.send(key[0], MigrateCommand(key[0], key[1], device, NO_DEVICE))
            return
        self.check()
        self._dispatch(plan, "failover")

    def _hot_remove(self, host):
        plan = hot_remove_host(self.state, host)
        self.check()
        self.plane.timeline_add("drain_start", None, None)
        for key in plan.cancelled:
            self.send(key[0], MigrateCommand(key[0], key[1], NO_DEVICE, NO_DEVICE))
        self._dispatch(plan.migrations, "drain")
        if plan.removed:
            self._after_removal(host)
        else:
            self.pending[host] = {m.workload for m in plan.migrations}

    def _finish_drain(self, host):
        del self.pending[host]
        complete_drain(self.state, host)
        self.check()
        self._after_removal(host)

    def _after_removal(self, host):
        self.plane.removed_at[host] = self.plane.engine.now
        self.plane.fabric.host_down(host)
        self.send(host, DrainComplete(host))

    def watchdog(self):
        """Declare hosts dead after too many missed heartbeats."""
        plane = self.plane
        eng, cfg = plane.engine, plane.config
        if eng.now >= plane.end_ns:
            return
        limit = cfg.missed_heartbeats * cfg.heartbeat_interval_ns
        for h, status in sorted(self.state.hosts.items()):
            if status is not HostStatus.ACTIVE or h == cfg.orchestrator_host:
                continue
            if eng.now - self.last_seen.get(h, 0.0) >= limit:
                plane.timeline_add("host_lost", None, None, host=h)
                plan, orphaned = host_lost(self.state, h)
                self.check()
                for key in orphaned:
                    plane.timeline_add("orphaned", key, None)
                    self.send(key[0], MigrateCommand(key[0], key[1], NO_DEVICE, NO_DEVICE))
                self._dispatch(plan, "failover")
                plane.fabric.host_down(h)
        eng.schedule(cfg.heartbeat_interval_ns, self.watchdog, actor=self.actor)


@dataclass
class ControlPlaneReport:
    submitted: int
    completed: int
    cancelled: int
    refused: int
    violations: list
    transitions: int
    timeline: list = field(repr=False, default_factory=list)

    @property
    def conserved(self) -> bool:
        return self.submitted == self.completed + self.cancelled


class ControlPlane:
    """A pod's control plane and workloads running inside one engine."""

    def __init__(self, topology: PodTopology, workloads: list[WorkloadSpec],
                 params: LatencyParams | None = None, seed: int = 0,
                 config: ControlPlaneConfig | None = None, engine: Engine | None = None):
        self.config = config or ControlPlaneConfig()
        self.engine = engine or Engine(seed)
        # private segments per host, plus shared room for rings, buffers and
        # segments carved for hosts added later
        private = 256 << 10
        region = private * len(topology.hosts) + (8 << 20)
        self.fabric = Fabric(topology, params, self.engine, region_bytes=region,
                             private_bytes=private)
        self.end_ns = float("inf")
        self.timeline: list[TimelineEvent] = []
        self.removed_at: dict[int, float] = {}
        self.failed_at: dict[int, float] = {}
        self.orchestrator = Orchestrator(self)
        self.agents: dict[int, Agent] = {}
        for h in sorted(x.id for x in topology.hosts):
            self._connect(h)
        for w in sorted(workloads, key=lambda w: w.key):
            if w.host not in self.agents:
                raise ValueError(f"workload {w.key} on unknown host {w.host}")
            self.agents[w.host].workloads[w.key] = WorkloadRunner(self, w)
        self._booted = False

    def _connect(self, h):
        eng, p = self.engine, self.fabric.params
        region, alloc = self.fabric.region, self.fabric.allocator
        agent = Agent(self, h)
        orch = self.orchestrator
        slots = self.config.channel_slots
        up_tx, up_rx = channel_create(region, alloc, slots, f"agent{h}", "orchestrator")
        dn_tx, dn_rx = channel_create(region, alloc, slots, "orchestrator", f"agent{h}")
        agent.end = SimChannelEnd(eng, p, up_tx, dn_rx, agent.on_message, agent.actor)
        orch.ends[h] = SimChannelEnd(eng, p, dn_tx, up_rx,
                                     lambda m, h=h: orch.on_message(h, m), orch.actor)
        self.agents[h] = agent
        return agent

    # -- timeline ---------------------------------------------------------------------
    def timeline_add(self, event, key, device, host=None):
        t = self.engine.now
        detail = {"workload": _wl(key), "device": _dev(device)}
        if host is not None:
            detail["host"] = host
        self.engine.log("timeline", event, detail)
        self.timeline.append(TimelineEvent(t, event, _wl(key), _dev(device)))

    def timeline_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TIMELINE_COLUMNS)
        for ev in self.timeline:
            w.writerow([f"{ev.time:.1f}", ev.event, ev.workload, ev.device])
        return buf.getvalue()

    # -- injection ------------------------------------------------------------------
    def fail_device_at(self, device_id: int, t_ns: float):
        def fire():
            self.failed_at[device_id] = self.engine.now
            self.timeline_add("device_failed", None, device_id)
            self.fabric.fail_device(device_id)
        self.engine.schedule_at(t_ns, fire, actor=f"dev{device_id}", kind=EventKind.FAILURE_INJECT)

    def hot_remove_at(self, host: int, t_ns: float):
        def fire():
            self.timeline_add("remove_requested", None, None, host=host)
            self.agents[host].send(HotRemoveRequest(host))
        self.engine.schedule_at(t_ns, fire, actor=f"agent{host}", kind=EventKind.FAILURE_INJECT)

    def crash_host_at(self, host: int, t_ns: float):
        """The host goes silent; its devices stop working with it."""
        def fire():
            self.timeline_add("host_crashed", None, None, host=host)
            self.agents[host].silent = True
            for r in self.agents[host].workloads.values():
                r.stopped = True
            for d in self.agents[host].local_devices():
                self.fabric.fail_device(d)
        self.engine.schedule_at(t_ns, fire, actor=f"agent{host}", kind=EventKind.FAILURE_INJECT)

    def hot_add_at(self, host: HostSpec, links: list[LinkSpec], devices: list[PcieDeviceSpec],
                   t_ns: float, workloads: list[WorkloadSpec] = ()):
        def fire():
            self.fabric.add_host(host, links, devices)
            agent = self._connect(host.id)
            for w in workloads:
                agent.workloads[w.key] = WorkloadRunner(self, w)
            agent.send(HotAddAnnounce(host.id))
            agent.boot()
            for r in agent.workloads.values():
                r.start()
        self.engine.schedule_at(t_ns, fire, actor=f"agent{host.id}", kind=EventKind.FAILURE_INJECT)

    # -- running ----------------------------------------------------------------------
    def _boot(self):
        if self._booted:
            return
        self._booted = True
        for h in sorted(self.agents):
            self.agents[h].boot()
            for key in sorted(self.agents[h].workloads):
                self.agents[h].workloads[key].start()
        # checks sit half an interval after each heartbeat, clear of delivery jitter
        self.engine.schedule(1.5 * self.config.heartbeat_interval_ns, self.orchestrator.watchdog,
                             actor=self.orchestrator.actor)

    def run(self, duration_ns: float) -> ControlPlaneReport:
        """Run for ``duration_ns``, then let outstanding I/O finish."""
        self.end_ns = self.engine.now + duration_ns
        self._boot()
        self.engine.run_until()
        return self.report()

    def runners(self):
        for h in sorted(self.agents):
            for key in sorted(self.agents[h].workloads):
                yield self.agents[h].workloads[key]

    def report(self) -> ControlPlaneReport:
        rs = list(self.runners())
        return ControlPlaneReport(
            submitted=sum(r.submitted for r in rs),
            completed=sum(r.completed for r in rs),
            cancelled=sum(r.cancelled for r in rs),
            refused=sum(r.refused for r in rs),
            violations=list(self.orchestrator.violations),
            transitions=self.orchestrator.transitions,
            timeline=list(self.timeline),
        )

    @property
    def state(self) -> OrchestratorState:
        return self.orchestrator.state


def demo_topology() -> PodTopology:
    """Four hosts on two MHDs; hosts 0 to 2 each own a NIC."""
    hosts = [HostSpec(i) for i in range(4)]
    mhds = [MhdSpec(0), MhdSpec(1)]
    links = [LinkSpec(h, m, 8) for h in range(4) for m in range(2)]
    devices = [PcieDeviceSpec(i, i, "nic") for i in range(3)]
    return PodTopology(hosts, mhds, links, devices)


def demo_workloads() -> list[WorkloadSpec]:
    return [WorkloadSpec(h, w, io_bytes=9000, rate_gbps=2.0) for h in range(4) for w in range(2)]
