"""CXL pod description: hosts, multi-headed memory devices, links, PCIe devices.

Also holds the latency/bandwidth parameter set used by every timing model and
the lane-budget arithmetic for deciding whether a host can pool or harvest
devices over its CXL links.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

from .errors import SingleLinkTooNarrow, UnknownHost

INTERLEAVE_BYTES = 256
CACHELINE_BYTES = 64
MAX_MHD_PORTS = 20
LINK_WIDTHS = (1, 2, 4, 8, 16)
DEVICE_KINDS = ("nic", "ssd", "accelerator")
POD_KINDS = ("mhd_direct", "switched")

# Measured idle-latency ratio of a CXL memory controller against local DDR5.
CXL_IDLE_LATENCY_MULTIPLIER = 2.15
CXL_SLOWDOWN_RANGE = (2.0, 3.0)


@dataclass(frozen=True)
class LatencyParams:
    """Timing knobs in nanoseconds; ``lane_bw_gbs`` is per CXL lane.

    1 GB/s moves one byte per nanosecond, so ``nbytes / gbs`` is a time in ns.
    """

    ddr_read_ns: float = 110.0
    ddr_write_ns: float = 100.0
    cxl_read_ns: float = 250.0
    cxl_write_ns: float = 300.0
    switch_extra_ns: float = 250.0
    mmio_ns: float = 150.0
    poll_interval_ns: float = 100.0
    lane_bw_gbs: float = 3.75

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")

    def for_pod(self, pod_kind: str) -> "LatencyParams":
        """Parameters as seen by a host in a pod of the given kind."""
        if pod_kind == "switched":
            return replace(
                self,
                cxl_read_ns=self.cxl_read_ns + self.switch_extra_ns,
                cxl_write_ns=self.cxl_write_ns + self.switch_extra_ns,
            )
        if pod_kind != "mhd_direct":
            raise ValueError(f"unknown pod kind {pod_kind!r}")
        return self

    @property
    def message_floor_ns(self) -> float:
        # one CXL write followed by one CXL read
        return self.cxl_write_ns + self.cxl_read_ns


@dataclass(frozen=True)
class HostSpec:
    id: int
    cpu_sockets: int = 2
    local_ddr_gb: float = 512.0


@dataclass(frozen=True)
class MhdSpec:
    id: int
    capacity_gb: float = 1024.0
    port_count: int = MAX_MHD_PORTS


@dataclass(frozen=True)
class LinkSpec:
    host_id: int
    mhd_id: int
    lane_width: int = 8


@dataclass(frozen=True)
class PcieDeviceSpec:
    id: int
    attached_host_id: int
    kind: str = "nic"
    device_bw_gbs: float = 12.5
    base_latency_ns: float = 5_000.0


@dataclass(frozen=True)
class Violation:
    entity: str
    message: str

    def __str__(self):
        return f"{self.entity}: {self.message}"


@dataclass(frozen=True)
class PodTopology:
    hosts: tuple[HostSpec, ...] = ()
    mhds: tuple[MhdSpec, ...] = ()
    links: tuple[LinkSpec, ...] = ()
    devices: tuple[PcieDeviceSpec, ...] = ()
    pod_kind: str = "mhd_direct"

    def __post_init__(self):
        # accept any iterable, store tuples so the object stays hashable/immutable
        for name in ("hosts", "mhds", "links", "devices"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def host(self, host_id: int) -> HostSpec:
        for h in self.hosts:
            if h.id == host_id:
                return h
        raise UnknownHost(host_id)

    def links_of(self, host_id: int) -> list[LinkSpec]:
        self.host(host_id)
        return [ln for ln in self.links if ln.host_id == host_id]

    def devices_of(self, host_id: int) -> list[PcieDeviceSpec]:
        return [d for d in self.devices if d.attached_host_id == host_id]

    def device(self, device_id: int) -> PcieDeviceSpec:
        for d in self.devices:
            if d.id == device_id:
                return d
        raise KeyError(device_id)

    def host_lanes(self, host_id: int) -> int:
        return sum(ln.lane_width for ln in self.links_of(host_id))


def validate_topology(topology: PodTopology) -> list[Violation]:
    """Return every invariant violation; an empty list means the pod is valid."""
    out = []
    host_ids = [h.id for h in topology.hosts]
    mhd_ids = [m.id for m in topology.mhds]
    for kind, ids in (("host", host_ids), ("mhd", mhd_ids),
                      ("device", [d.id for d in topology.devices])):
        seen = set()
        for i in ids:
            if i in seen:
                out.append(Violation(f"{kind} {i}", "duplicate id"))
            seen.add(i)
    if topology.pod_kind not in POD_KINDS:
        out.append(Violation("pod", f"unknown pod_kind {topology.pod_kind!r}"))

    per_mhd = {m: 0 for m in mhd_ids}
    for i, ln in enumerate(topology.links):
        name = f"link {i} (host {ln.host_id} -> mhd {ln.mhd_id})"
        if ln.host_id not in host_ids:
            out.append(Violation(name, f"unknown host {ln.host_id}"))
        if ln.mhd_id not in per_mhd:
            out.append(Violation(name, f"unknown mhd {ln.mhd_id}"))
        else:
            per_mhd[ln.mhd_id] += 1
        if ln.lane_width not in LINK_WIDTHS:
            out.append(Violation(name, f"lane_width {ln.lane_width} is not a power of two <= 16"))

    for m in topology.mhds:
        if m.port_count > MAX_MHD_PORTS:
            out.append(Violation(f"mhd {m.id}", f"port_count {m.port_count} exceeds {MAX_MHD_PORTS}"))
        if per_mhd[m.id] > m.port_count:
            out.append(Violation(
                f"mhd {m.id}", f"{per_mhd[m.id]} links exceed port_count {m.port_count}"))

    for d in topology.devices:
        if d.attached_host_id not in host_ids:
            out.append(Violation(f"device {d.id}", f"unknown attached host {d.attached_host_id}"))
        if d.kind not in DEVICE_KINDS:
            out.append(Violation(f"device {d.id}", f"unknown kind {d.kind!r}"))
        if d.device_bw_gbs < 0 or d.base_latency_ns < 0:
            out.append(Violation(f"device {d.id}", "negative bandwidth or latency"))
    return out


def required_lanes(bw_gbs: float, aggregate: bool = False, lane_bw_gbs: float = 3.75) -> int:
    """CXL lanes needed to carry ``bw_gbs``.

    A single device gets one link, rounded up to a purchasable width. In
    aggregate mode the demand is spread over interleaved links and only the
    raw lane count matters.
    """
    if bw_gbs < 0:
        raise ValueError("bandwidth must be non-negative")
    if lane_bw_gbs <= 0:
        raise ValueError("lane bandwidth must be positive")
    if aggregate:
        # round away float noise before ceil: 30/3.75 must give 8, not 9
        return math.ceil(round(bw_gbs / lane_bw_gbs, 9))
    for w in LINK_WIDTHS:
        if w * lane_bw_gbs >= bw_gbs:
            return w
    raise SingleLinkTooNarrow(
        f"{bw_gbs} GB/s exceeds a x16 link ({16 * lane_bw_gbs} GB/s)")


def host_cxl_bandwidth(topology: PodTopology, host_id: int, lane_bw_gbs: float = 3.75) -> float:
    return sum(ln.lane_width * lane_bw_gbs for ln in topology.links_of(host_id))


def path_redundancy(topology: PodTopology, host_id: int, failed_mhds: Iterable[int] = ()) -> int:
    """Number of distinct live MHDs the host can reach (lambda)."""
    failed = set(failed_mhds)
    return len({ln.mhd_id for ln in topology.links_of(host_id) if ln.mhd_id not in failed})


@dataclass
class HostBudget:
    host_id: int
    lanes: int
    cxl_bw_gbs: float
    # widest single-device requirement among pod devices vs this host
    pool_single_feasible: bool
    harvest_lanes: int
    harvest_feasible: bool


@dataclass
class FeasibilityReport:
    device_lanes: dict[int, int | None] = field(default_factory=dict)
    hosts: list[HostBudget] = field(default_factory=list)
    harvest_bw_gbs: float = 0.0

    def rows(self):
        """Flat rows for tabular output."""
        for d, lanes in self.device_lanes.items():
            yield {"kind": "device", "id": d, "required_lanes": lanes}
        for h in self.hosts:
            yield {
                "kind": "host", "id": h.host_id, "lanes": h.lanes,
                "cxl_bw_gbs": h.cxl_bw_gbs, "pool_single": h.pool_single_feasible,
                "harvest_lanes": h.harvest_lanes, "harvest": h.harvest_feasible,
            }


def feasibility(topology: PodTopology, params: LatencyParams = LatencyParams()) -> FeasibilityReport:
    """Lane requirements per device and per-host verdicts for both use cases.

    Pooling a single device is feasible on a host when the device's link width
    fits in the host's lanes. Harvesting means one host drives every device in
    the pod at once, which needs the aggregate lane count.
    """
    lane_bw = params.lane_bw_gbs
    report = FeasibilityReport()
    for d in topology.devices:
        try:
            report.device_lanes[d.id] = required_lanes(d.device_bw_gbs, False, lane_bw)
        except SingleLinkTooNarrow:
            report.device_lanes[d.id] = None
    total_bw = sum(d.device_bw_gbs for d in topology.devices)
    report.harvest_bw_gbs = total_bw
    harvest = required_lanes(total_bw, True, lane_bw)
    widest = max((v if v is not None else math.inf for v in report.device_lanes.values()), default=0)
    for h in topology.hosts:
        lanes = topology.host_lanes(h.id)
        report.hosts.append(HostBudget(
            host_id=h.id,
            lanes=lanes,
            cxl_bw_gbs=lanes * lane_bw,
            pool_single_feasible=widest <= lanes,
            harvest_lanes=harvest,
            harvest_feasible=harvest <= lanes,
        ))
    return report
