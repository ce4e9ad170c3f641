"""Control-plane state for the device pool and the messages agents exchange.

The functions here are pure state transitions on ``OrchestratorState``; the
event-driven orchestrator and agents in :mod:`cxlpool.controlplane` call them
when messages arrive.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, fields
from typing import ClassVar, NamedTuple

from .errors import (DuplicateHost, HostNotActive, NoDeviceAvailable, UnknownDevice, UnknownHost)
from .topology import PcieDeviceSpec, PodTopology

DEFAULT_LOAD_THRESHOLD = 0.8


class Health(str, enum.Enum):
    HEALTHY = "healthy"
    OVERLOADED = "overloaded"
    FAILED = "failed"


class HostStatus(str, enum.Enum):
    ACTIVE = "active"
    DRAINING = "draining"
    REMOVED = "removed"


@dataclass
class DeviceRecord:
    owner: int
    kind: str = "nic"
    load: float = 0.0
    health: Health = Health.HEALTHY


class Migration(NamedTuple):
    workload: tuple   # (host, workload id)
    old_device: int
    new_device: int


@dataclass
class DrainPlan:
    host: int
    migrations: list[Migration] = field(default_factory=list)
    cancelled: list[tuple] = field(default_factory=list)
    removed: bool = False


@dataclass
class OrchestratorState:
    assignments: dict[tuple, int] = field(default_factory=dict)
    devices: dict[int, DeviceRecord] = field(default_factory=dict)
    hosts: dict[int, HostStatus] = field(default_factory=dict)
    load_threshold: float = DEFAULT_LOAD_THRESHOLD

    @classmethod
    def from_topology(cls, topology: PodTopology, load_threshold: float = DEFAULT_LOAD_THRESHOLD):
        st = cls(load_threshold=load_threshold)
        for h in topology.hosts:
            st.hosts[h.id] = HostStatus.ACTIVE
        for d in topology.devices:
            st.devices[d.id] = DeviceRecord(owner=d.attached_host_id, kind=d.kind)
        return st

    def assigned_to(self, device_id: int) -> list[tuple]:
        return sorted(k for k, d in self.assignments.items() if d == device_id)

    def _device(self, device_id) -> DeviceRecord:
        try:
            return self.devices[device_id]
        except KeyError:
            raise UnknownDevice(device_id) from None

    def _host(self, host_id) -> HostStatus:
        try:
            return self.hosts[host_id]
        except KeyError:
            raise UnknownHost(host_id) from None

    def candidates(self, kind=None, exclude=()) -> list[int]:
        """Devices that may take new work: not failed, owner active."""
        return sorted(
            i for i, d in self.devices.items()
            if d.health is not Health.FAILED
            and self.hosts.get(d.owner) is HostStatus.ACTIVE
            and (kind is None or d.kind == kind)
            and i not in exclude
        )


def check_invariants(state: OrchestratorState) -> list[str]:
    """Safety conditions that must hold after every transition."""
    out = []
    for key, dev_id in state.assignments.items():
        dev = state.devices.get(dev_id)
        if dev is None:
            out.append(f"{key} assigned to unknown device {dev_id}")
            continue
        if dev.health is Health.FAILED:
            out.append(f"{key} assigned to failed device {dev_id}")
        if state.hosts.get(dev.owner) is not HostStatus.ACTIVE:
            out.append(f"{key} assigned to device {dev_id} on {state.hosts.get(dev.owner)} host {dev.owner}")
        if state.hosts.get(key[0]) is HostStatus.REMOVED:
            out.append(f"{key} belongs to removed host {key[0]}")
    for i, d in state.devices.items():
        if not 0.0 <= d.load <= 1.0:
            out.append(f"device {i} load {d.load} outside [0, 1]")
    return out


def _pick(state, host, candidates, load_of):
    local = [d for d in candidates
             if state.devices[d].owner == host and load_of(d) < state.load_threshold]
    pool = local or candidates
    return min(pool, key=lambda d: (load_of(d), d))


def allocate_device(state: OrchestratorState, host: int, workload=None, kind: str | None = None,
                    exclude=()) -> int:
    """Pick a device for ``host``: a local one under the load threshold, else
    the least-loaded device in the pod (ties to the lowest id).

    With ``workload`` given the assignment is recorded.
    """
    if state._host(host) is not HostStatus.ACTIVE:
        raise HostNotActive(f"host {host} is {state.hosts[host].value}")
    cands = state.candidates(kind, exclude)
    if not cands:
        raise NoDeviceAvailable()
    choice = _pick(state, host, cands, lambda d: state.devices[d].load)
    if workload is not None:
        state.assignments[(host, workload)] = choice
    return choice


def handle_heartbeat(state: OrchestratorState, host: int, device: int, load: float,
                     health: Health | str = Health.HEALTHY) -> list[Migration]:
    """Record a device's load; rebalance it when at or above the threshold.

    Load is assumed linear in the number of assignments, so each one carries
    ``load / n``. The plan moves the fewest assignments that bring the
    projected load under the threshold, remote users first, each to the
    device with the lowest projected load.
    """
    rec = state._device(device)
    if not 0.0 <= load <= 1.0:
        raise ValueError(f"load {load} outside [0, 1]")
    if Health(health) is Health.FAILED:
        return handle_failure(state, device)
    if rec.health is Health.FAILED:
        return []
    rec.load = load
    if load < state.load_threshold:
        rec.health = Health.HEALTHY
        return []
    rec.health = Health.OVERLOADED
    users = state.assigned_to(device)
    if not users:
        return []
    per = load / len(users)
    # smallest k with load - k * per < threshold
    k = next(k for k in range(1, len(users) + 1) if load - k * per < state.load_threshold)
    order = sorted(users, key=lambda u: (u[0] == rec.owner, u))
    projected = {d: state.devices[d].load for d in state.candidates(rec.kind)}
    projected.pop(device, None)
    plan = []
    for key in order[:k]:
        if not projected:
            break
        if key[0] not in state.hosts or state.hosts[key[0]] is not HostStatus.ACTIVE:
            continue
        target = _pick(state, key[0], sorted(projected), projected.__getitem__)
        projected[target] = min(1.0, projected[target] + per)
        plan.append(Migration(key, device, target))
    for m in plan:
        state.assignments[m.workload] = m.new_device
        state.devices[m.new_device].load = projected[m.new_device]
    rec.load = max(0.0, load - per * len(plan))
    return plan


def handle_failure(state: OrchestratorState, device: int) -> list[Migration]:
    """Mark a device failed and move every workload on it.

    If nothing healthy remains, the orphaned assignments are dropped (an
    assignment may never point at a failed device) and NoDeviceAvailable is
    raised with the orphans attached.
    """
    rec = state._device(device)
    rec.health = Health.FAILED
    rec.load = 0.0
    affected = state.assigned_to(device)
    if not affected:
        return []
    if not state.candidates(rec.kind):
        for key in affected:
            del state.assignments[key]
        raise NoDeviceAvailable(f"no replacement for failed device {device}", orphaned=affected)
    plan = []
    for key in affected:
        host = key[0]
        if state.hosts.get(host) is not HostStatus.ACTIVE:
            del state.assignments[key]
            continue
        new = allocate_device(state, host, key[1], rec.kind)
        plan.append(Migration(key, device, new))
    return plan


def host_lost(state: OrchestratorState, host: int) -> tuple[list[Migration], list[tuple]]:
    """A host stopped responding: its workloads are gone and its devices failed.

    Returns the migrations for other hosts' users of its devices and the
    assignments that could not be placed anywhere (already dropped).
    """
    state._host(host)
    for key in [k for k in state.assignments if k[0] == host]:
        del state.assignments[key]
    state.hosts[host] = HostStatus.REMOVED
    plan, orphaned = [], []
    for dev in sorted(i for i, d in state.devices.items() if d.owner == host):
        try:
            plan += handle_failure(state, dev)
        except NoDeviceAvailable as exc:
            orphaned += exc.orphaned
    return plan, orphaned


def hot_remove_host(state: OrchestratorState, host: int) -> DrainPlan:
    """Start draining ``host``: no new allocations land on its devices, users of
    its devices are migrated, and its own workloads' assignments are cancelled
    (their VMs are expected to have been moved off already).

    A host with nothing to migrate is removed immediately; otherwise it stays
    draining until :func:`complete_drain`.
    """
    if state._host(host) is not HostStatus.ACTIVE:
        raise HostNotActive(f"host {host} is {state.hosts[host].value}")
    own_devices = {i for i, d in state.devices.items() if d.owner == host}
    cancelled = sorted(k for k in state.assignments if k[0] == host)
    to_move = sorted(k for k, d in state.assignments.items() if d in own_devices and k[0] != host)
    if to_move:
        kinds = {state.devices[state.assignments[k]].kind for k in to_move}
        for kind in kinds:
            if not [d for d in state.candidates(kind) if d not in own_devices]:
                raise NoDeviceAvailable(f"nowhere to move {kind} users of host {host}")
    state.hosts[host] = HostStatus.DRAINING
    plan = DrainPlan(host, cancelled=cancelled)
    for key in cancelled:
        del state.assignments[key]
    for key in to_move:
        old = state.assignments[key]
        new = allocate_device(state, key[0], key[1], state.devices[old].kind)
        plan.migrations.append(Migration(key, old, new))
    if not plan.migrations:
        state.hosts[host] = HostStatus.REMOVED
        plan.removed = True
    return plan


def complete_drain(state: OrchestratorState, host: int):
    if state._host(host) is not HostStatus.DRAINING:
        raise HostNotActive(f"host {host} is not draining")
    own = {i for i, d in state.devices.items() if d.owner == host}
    left = [k for k, d in state.assignments.items() if d in own]
    if left:
        raise RuntimeError(f"host {host} still serves {left}")
    state.hosts[host] = HostStatus.REMOVED


def hot_add_host(state: OrchestratorState, host: int, devices: list[PcieDeviceSpec] = ()):
    """Bring a host (new, or back from maintenance) into the pool."""
    if state.hosts.get(host) in (HostStatus.ACTIVE, HostStatus.DRAINING):
        raise DuplicateHost(f"host {host} is already {state.hosts[host].value}")
    for d in devices:
        existing = state.devices.get(d.id)
        if existing is not None and existing.owner != host:
            raise DuplicateHost(f"device {d.id} already belongs to host {existing.owner}")
    state.hosts[host] = HostStatus.ACTIVE
    for d in devices:
        state.devices[d.id] = DeviceRecord(owner=host, kind=d.kind)


# -- control messages ----------------------------------------------------------------

NO_DEVICE = -1
KIND_CODES = {None: 0, "nic": 1, "ssd": 2, "accelerator": 3}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
HEALTH_CODES = {Health.HEALTHY: 0, Health.OVERLOADED: 1, Health.FAILED: 2}
HEALTH_NAMES = {v: k for k, v in HEALTH_CODES.items()}


class MsgKind(enum.IntEnum):
    ALLOCATE_REQUEST = 1
    ALLOCATE_REPLY = 2
    HEARTBEAT = 3
    FAILURE_REPORT = 4
    MIGRATE_COMMAND = 5
    MIGRATE_DONE = 6
    HOT_REMOVE_REQUEST = 7
    DRAIN_COMPLETE = 8
    HOT_ADD_ANNOUNCE = 9


_REGISTRY: dict[int, type] = {}


class ControlMessage:
    """Base for fixed-layout control messages: one kind byte, then ``_fmt``."""

    KIND: ClassVar[MsgKind]
    _fmt: ClassVar[struct.Struct]

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        if hasattr(cls, "KIND"):
            _REGISTRY[int(cls.KIND)] = cls

    def _values(self):
        return [getattr(self, f.name) for f in fields(self)]

    def encode(self) -> bytes:
        return bytes([self.KIND]) + self._fmt.pack(*self._values())

    @staticmethod
    def decode(raw: bytes) -> "ControlMessage":
        cls = _REGISTRY[raw[0]]
        vals = cls._fmt.unpack(raw[1:1 + cls._fmt.size])
        return cls(*vals)


@dataclass(frozen=True)
class AllocateRequest(ControlMessage):
    KIND = MsgKind.ALLOCATE_REQUEST
    _fmt = struct.Struct("<IIB")
    host: int
    workload: int
    kind_code: int = 0


@dataclass(frozen=True)
class AllocateReply(ControlMessage):
    KIND = MsgKind.ALLOCATE_REPLY
    _fmt = struct.Struct("<IIi")
    host: int
    workload: int
    device: int


@dataclass(frozen=True)
class Heartbeat(ControlMessage):
    KIND = MsgKind.HEARTBEAT
    _fmt = struct.Struct("<IidB")
    host: int
    device: int       # NO_DEVICE for a host-level beat
    load: float
    health_code: int = 0


@dataclass(frozen=True)
class FailureReport(ControlMessage):
    KIND = MsgKind.FAILURE_REPORT
    _fmt = struct.Struct("<II")
    host: int
    device: int


@dataclass(frozen=True)
class MigrateCommand(ControlMessage):
    KIND = MsgKind.MIGRATE_COMMAND
    _fmt = struct.Struct("<IIii")
    host: int
    workload: int
    from_device: int
    to_device: int    # NO_DEVICE cancels the workload's assignment


@dataclass(frozen=True)
class MigrateDone(ControlMessage):
    KIND = MsgKind.MIGRATE_DONE
    _fmt = struct.Struct("<IIi")
    host: int
    workload: int
    device: int


@dataclass(frozen=True)
class HotRemoveRequest(ControlMessage):
    KIND = MsgKind.HOT_REMOVE_REQUEST
    _fmt = struct.Struct("<I")
    host: int


@dataclass(frozen=True)
class DrainComplete(ControlMessage):
    KIND = MsgKind.DRAIN_COMPLETE
    _fmt = struct.Struct("<I")
    host: int


@dataclass(frozen=True)
class HotAddAnnounce(ControlMessage):
    KIND = MsgKind.HOT_ADD_ANNOUNCE
    _fmt = struct.Struct("<I")
    host: int


MESSAGE_TYPES = tuple(_REGISTRY[k] for k in sorted(_REGISTRY))


def max_encoded_size() -> int:
    return max(1 + cls._fmt.size for cls in MESSAGE_TYPES)


def decode_message(raw: bytes) -> ControlMessage:
    return ControlMessage.decode(raw)


def moves_needed(load: float, assignments: int, threshold: float = DEFAULT_LOAD_THRESHOLD) -> int:
    """Fewest moves bringing a linearly projected load under the threshold."""
    if load < threshold or assignments == 0:
        return 0
    per = load / assignments
    return next(k for k in range(1, assignments + 1) if load - k * per < threshold)
