"""JSON scenario files.

A scenario has up to five sections, all optional except ``topology``::

    {
      "seed": 0,
      "topology": {"pod_kind": ..., "hosts": [...], "mhds": [...], "links": [...], "devices": [...]},
      "latency": {"cxl_read_ns": 250, ...},
      "workload": {"channel_bench": {...}, "udp_bench": {...}, "failover": {...}},
      "stranding": {...},
      "faults": [{"at_ms": 20.5, "event": "fail_device", "device": 0}, ...]
    }

Unknown keys anywhere are rejected. Every problem found is reported at
once in a single :class:`~cxlpool.errors.ValidationError`.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .controlplane import ControlPlaneConfig, WorkloadSpec
from .errors import ParseError, ValidationError
from .stranding import HostShape, StrandingScenario, VmType
from .topology import (DEVICE_KINDS, HostSpec, LatencyParams, LinkSpec, MhdSpec, PcieDeviceSpec,
                       PodTopology, validate_topology)
from .udpbench import PLACEMENTS, UdpBenchConfig

FAULT_EVENTS = {"fail_device": "device", "hot_remove": "host", "crash_host": "host"}


@dataclass(frozen=True)
class ChannelBenchSpec:
    capacity: int = 8
    iters: int = 10_000
    mode: str = "sim"


@dataclass(frozen=True)
class UdpBenchSpec:
    pkt_sizes: tuple[int, ...] = (75, 1500, 9000)
    placements: tuple[str, ...] = PLACEMENTS
    nic_device: int | None = None
    app_host: int | None = None
    config: UdpBenchConfig = UdpBenchConfig()


@dataclass(frozen=True)
class FailoverSpec:
    workloads: tuple[WorkloadSpec, ...] = ()
    duration_ms: float = 60.0
    config: ControlPlaneConfig = ControlPlaneConfig()


@dataclass(frozen=True)
class StrandingSpec:
    scenario: StrandingScenario = StrandingScenario()
    group_sizes: tuple[int, ...] = (1, 2, 4, 8)
    seeds: int = 20


@dataclass(frozen=True)
class Fault:
    at_ms: float
    event: str
    target: int


@dataclass
class Scenario:
    topology: PodTopology
    latency: LatencyParams = LatencyParams()
    seed: int = 0
    channel_bench: ChannelBenchSpec | None = None
    udp_bench: UdpBenchSpec | None = None
    failover: FailoverSpec | None = None
    stranding: StrandingSpec | None = None
    faults: list[Fault] = field(default_factory=list)
    source: str = ""


class _Collector:
    def __init__(self):
        self.problems: list[str] = []

    def add(self, where, msg):
        self.problems.append(f"{where}: {msg}" if where else msg)

    def obj(self, cls, data, where, required=(), converters=None):
        """Build dataclass ``cls`` from a dict, recording problems instead of raising."""
        converters = converters or {}
        if not isinstance(data, dict):
            self.add(where, f"expected an object, got {type(data).__name__}")
            return None
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            self.add(where, f"unknown keys {unknown}")
        missing = [k for k in required if k not in data]
        if missing:
            self.add(where, f"missing keys {missing}")
        if unknown or missing:
            return None
        kwargs = {}
        for k, v in data.items():
            if k in converters:
                v = converters[k](v, f"{where}.{k}")
            elif isinstance(v, list):
                v = tuple(v)
            kwargs[k] = v
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            self.add(where, str(exc))
            return None

    def items(self, cls, data, where, required=()):
        if data is None:
            return ()
        if not isinstance(data, list):
            self.add(where, "expected a list")
            return ()
        out = [self.obj(cls, d, f"{where}[{i}]", required) for i, d in enumerate(data)]
        return tuple(x for x in out if x is not None)

    def keys(self, data, where, allowed):
        if not isinstance(data, dict):
            self.add(where, "expected an object")
            return False
        unknown = sorted(set(data) - set(allowed))
        if unknown:
            self.add(where, f"unknown keys {unknown}")
        return True


_TOP_KEYS = ("seed", "topology", "latency", "workload", "stranding", "faults")


def parse_scenario(data: dict, source: str = "") -> Scenario:
    """Validate a decoded JSON document and build a Scenario."""
    c = _Collector()
    if not c.keys(data, "", _TOP_KEYS):
        raise ValidationError(c.problems)
    if "topology" not in data:
        c.add("", "missing the topology section")

    topo = None
    t = data.get("topology")
    if t is not None and c.keys(t, "topology", ("pod_kind", "hosts", "mhds", "links", "devices")):
        hosts = c.items(HostSpec, t.get("hosts", []), "topology.hosts", ("id",))
        mhds = c.items(MhdSpec, t.get("mhds", []), "topology.mhds", ("id",))
        links = c.items(LinkSpec, t.get("links", []), "topology.links", ("host_id", "mhd_id"))
        devices = c.items(PcieDeviceSpec, t.get("devices", []), "topology.devices",
                          ("id", "attached_host_id"))
        topo = PodTopology(hosts, mhds, links, devices, t.get("pod_kind", "mhd_direct"))
        c.problems += [f"topology: {v}" for v in validate_topology(topo)]

    latency = LatencyParams()
    if "latency" in data:
        latency = c.obj(LatencyParams, data["latency"], "latency") or latency

    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        c.add("seed", f"expected a non-negative integer, got {seed!r}")
        seed = 0

    sc = Scenario(topology=topo, latency=latency, seed=seed, source=source)
    w = data.get("workload")
    if w is not None and c.keys(w, "workload", ("channel_bench", "udp_bench", "failover")):
        if "channel_bench" in w:
            sc.channel_bench = c.obj(ChannelBenchSpec, w["channel_bench"], "workload.channel_bench")
            if sc.channel_bench and sc.channel_bench.mode not in ("sim", "threads"):
                c.add("workload.channel_bench.mode", "must be sim or threads")
        if "udp_bench" in w:
            sc.udp_bench = _udp(c, w["udp_bench"], topo)
        if "failover" in w:
            sc.failover = _failover(c, w["failover"], topo)
    if "stranding" in data:
        sc.stranding = _stranding(c, data["stranding"], seed)
    if "faults" in data:
        sc.faults = _faults(c, data["faults"], topo)
    if c.problems:
        raise ValidationError(c.problems)
    return sc


def _udp(c, d, topo):
    where = "workload.udp_bench"
    own = ("pkt_sizes", "placements", "nic_device", "app_host")
    cfg_keys = [f.name for f in dataclasses.fields(UdpBenchConfig)]
    if not c.keys(d, where, own + tuple(cfg_keys)):
        return None
    cfg = c.obj(UdpBenchConfig, {k: v for k, v in d.items() if k in cfg_keys}, where)
    spec = UdpBenchSpec(tuple(d.get("pkt_sizes", UdpBenchSpec.pkt_sizes)),
                        tuple(d.get("placements", PLACEMENTS)),
                        d.get("nic_device"), d.get("app_host"), cfg or UdpBenchConfig())
    for p in spec.placements:
        if p not in PLACEMENTS:
            c.add(f"{where}.placements", f"unknown placement {p!r}")
    for s in spec.pkt_sizes:
        if not isinstance(s, int) or s <= 0:
            c.add(f"{where}.pkt_sizes", f"packet sizes must be positive integers, got {s!r}")
    if spec.nic_device is not None and topo is not None:
        if spec.nic_device not in {x.id for x in topo.devices}:
            c.add(f"{where}.nic_device", f"unknown device {spec.nic_device}")
    return spec


def _failover(c, d, topo):
    where = "workload.failover"
    cfg_keys = [f.name for f in dataclasses.fields(ControlPlaneConfig)]
    if not c.keys(d, where, ("workloads", "duration_ms") + tuple(cfg_keys)):
        return None
    wls = c.items(WorkloadSpec, d.get("workloads", []), f"{where}.workloads", ("host", "id"))
    cfg = c.obj(ControlPlaneConfig, {k: v for k, v in d.items() if k in cfg_keys}, where)
    host_ids = {h.id for h in topo.hosts} if topo else set()
    seen = set()
    for w in wls:
        if topo is not None and w.host not in host_ids:
            c.add(f"{where}.workloads", f"workload {w.key} on unknown host {w.host}")
        if w.key in seen:
            c.add(f"{where}.workloads", f"duplicate workload {w.key}")
        seen.add(w.key)
        if w.kind not in DEVICE_KINDS:
            c.add(f"{where}.workloads", f"workload {w.key} has unknown device kind {w.kind!r}")
        if w.rate_gbps <= 0 or w.io_bytes <= 0:
            c.add(f"{where}.workloads", f"workload {w.key} needs positive io_bytes and rate_gbps")
    dur = d.get("duration_ms", 60.0)
    if not isinstance(dur, (int, float)) or dur <= 0:
        c.add(f"{where}.duration_ms", "must be positive")
        dur = 60.0
    return FailoverSpec(wls, float(dur), cfg or ControlPlaneConfig())


def _stranding(c, d, seed):
    where = "stranding"
    sc_keys = ("host_shape", "host_count", "pooled_resources", "vm_catalog", "placement")
    if not c.keys(d, where, sc_keys + ("group_sizes", "seeds")):
        return None
    kwargs = {"seed": seed}
    if "host_shape" in d:
        kwargs["host_shape"] = c.obj(HostShape, d["host_shape"], f"{where}.host_shape") or HostShape()
    if "vm_catalog" in d:
        kwargs["vm_catalog"] = c.items(VmType, d["vm_catalog"], f"{where}.vm_catalog",
                                       ("cores", "mem_gb", "ssd_gb", "nic_gbps"))
    for k in ("host_count", "placement"):
        if k in d:
            kwargs[k] = d[k]
    if "pooled_resources" in d:
        kwargs["pooled_resources"] = tuple(d["pooled_resources"])
    scen = StrandingScenario(**kwargs)
    groups = tuple(d.get("group_sizes", (1, 2, 4, 8)))
    seeds = d.get("seeds", 20)
    if not scen.vm_catalog:
        c.add(f"{where}.vm_catalog", "the VM catalog is empty")
    c.problems += [f"{where}: {v}" for v in scen.violations()]
    for n in groups:
        if not isinstance(n, int) or n < 1 or scen.host_count % n:
            c.add(f"{where}.group_sizes", f"group size {n!r} must be a positive divisor of "
                                          f"host_count {scen.host_count}")
    if not isinstance(seeds, int) or seeds < 1:
        c.add(f"{where}.seeds", "must be a positive integer")
    return StrandingSpec(scen, groups, seeds)


def _faults(c, data, topo):
    if not isinstance(data, list):
        c.add("faults", "expected a list")
        return []
    out = []
    host_ids = {h.id for h in topo.hosts} if topo else set()
    dev_ids = {x.id for x in topo.devices} if topo else set()
    for i, f in enumerate(data):
        where = f"faults[{i}]"
        if not isinstance(f, dict) or f.get("event") not in FAULT_EVENTS:
            c.add(where, f"event must be one of {sorted(FAULT_EVENTS)}")
            continue
        target_key = FAULT_EVENTS[f["event"]]
        if not c.keys(f, where, ("at_ms", "event", target_key)):
            continue
        if target_key not in f or "at_ms" not in f:
            c.add(where, f"needs at_ms and {target_key}")
            continue
        target = f[target_key]
        if topo is not None and target not in (dev_ids if target_key == "device" else host_ids):
            c.add(where, f"unknown {target_key} {target!r}")
        if not isinstance(f["at_ms"], (int, float)) or f["at_ms"] < 0:
            c.add(where, "at_ms must be a non-negative number")
            continue
        out.append(Fault(float(f["at_ms"]), f["event"], target))
    return sorted(out, key=lambda f: (f.at_ms, f.event, f.target))


def load_scenario(path) -> Scenario:
    """Read and validate a scenario file. Raises ParseError or ValidationError."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_scenario(data, str(p))


def shipped_scenario_path(name: str = "pod8.json") -> Path:
    return Path(str(resources.files("cxlpool") / "scenarios" / name))
