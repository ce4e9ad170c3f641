"""Pooled I/O through pool memory.

A PCIe device stays physically attached to its owning host. A user on another
host reaches it through pool memory: descriptor rings, completion ring and
I/O buffers live in the shared segment where the device can DMA them, and
MMIO operations (doorbells, register reads and writes) are forwarded as
channel messages to an agent on the owning host.

When the user is the owner the fast path applies: rings and buffers sit in
the owner's private segment, timed as local DDR, and doorbells are plain MMIO.
"""
from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field, replace
from typing import Callable

from .channel import Receiver, RingChannel, Sender, SimChannelEnd, channel_create
from .errors import ChannelDown, DeviceFailed, DeviceQuiesced, NotAssigned, RingFull
from .shmem import SHARED, PoolAllocator, SharedRegion
from .simcore import Engine, EventKind, Poller
from .topology import HostSpec, LatencyParams, PcieDeviceSpec, PodTopology, host_cxl_bandwidth

READ_KINDS = ("udp_tx", "ssd_write")   # device reads the buffer
WRITE_KINDS = ("udp_rx", "ssd_read")   # device fills the buffer
IO_KINDS = READ_KINDS + WRITE_KINDS

_DESC = struct.Struct("<QIBQ")        # buffer addr, length, kind index, request seq
_COMPL = struct.Struct("<QB")         # request seq, status
_MMIO = struct.Struct("<BIIQ")        # op, device id, register, value
_MMIO_REPLY = struct.Struct("<IQ")    # register, value


class MmioOp(enum.IntEnum):
    READ_REG = 1
    WRITE_REG = 2
    DOORBELL = 3


@dataclass
class IoRequest:
    kind: str
    size_bytes: int
    buffer_addr: int = 0
    payload: bytes | None = None
    submit_time: float = 0.0
    complete_time: float | None = None
    status: str = "new"   # new, inflight, done, cancelled
    seq: int = 0
    observed_digest: str | None = None
    on_complete: Callable[["IoRequest"], None] | None = None
    # timestamps of pipeline stages, for analysis
    stages: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in IO_KINDS:
            raise ValueError(f"unknown I/O kind {self.kind!r}")
        if self.size_bytes < 0:
            raise ValueError("negative size")

    @property
    def latency(self) -> float:
        return self.complete_time - self.submit_time


def digest(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=16).hexdigest()


def rx_fill(seq: int, size: int) -> bytes:
    """Deterministic content a device writes for inbound data."""
    pattern = struct.pack("<Q", seq) * 8
    return (pattern * (size // len(pattern) + 1))[:size]


class Port:
    """A FIFO pipe with independent queues per direction.

    One per host for its interleaved CXL links (interleaving is assumed to
    aggregate linearly), and one per host for local DDR.
    """

    def __init__(self, name: str, bw_gbs: float):
        self.name = name
        self.bw_gbs = bw_gbs
        self.busy_until = {"to_mem": 0.0, "from_mem": 0.0}
        self.bytes_moved = {"to_mem": 0, "from_mem": 0}

    def reserve(self, direction: str, start: float, nbytes: int, rate_gbs: float | None = None) -> float:
        """Queue a transfer; returns the time its last byte arrives.

        The port is held for ``nbytes / bw_gbs``. A slower endpoint
        (``rate_gbs``) stretches the transfer but does not hold the port longer.
        """
        if self.bw_gbs <= 0:
            raise ValueError(f"{self.name} has no bandwidth")
        rate = min(self.bw_gbs, rate_gbs) if rate_gbs else self.bw_gbs
        begin = max(start, self.busy_until[direction])
        self.busy_until[direction] = begin + nbytes / self.bw_gbs
        self.bytes_moved[direction] += nbytes
        return begin + nbytes / rate


class DeviceModel:
    """The physical device: serialises service, holds a register file."""

    def __init__(self, spec: PcieDeviceSpec):
        self.spec = spec
        self.failed = False
        self.busy_until = 0.0
        self.registers: dict[int, int] = {}
        self.served = 0
        self.busy_ns = 0.0   # accumulated transfer occupancy, for utilisation

    @property
    def id(self):
        return self.spec.id

    @property
    def actor(self):
        return f"dev{self.spec.id}"

    def service(self, start: float, nbytes: int) -> float:
        """Base latency plus size/bandwidth; the transfer part is serialised."""
        bw = self.spec.device_bw_gbs
        occupancy = nbytes / bw if bw > 0 else 0.0
        begin = max(start, self.busy_until)
        self.busy_until = begin + occupancy
        self.busy_ns += occupancy
        self.served += 1
        return begin + occupancy + self.spec.base_latency_ns


class Fabric:
    """Runtime state of a pod's datapath inside one event engine."""

    def __init__(self, topology: PodTopology, params: LatencyParams | None = None,
                 engine: Engine | None = None, region_bytes: int = 8 << 20,
                 private_bytes: int = 1 << 20, local_mem_bw_gbs: float = 240.0,
                 ring_slots: int = 64):
        self.topology = topology
        self.base_params = params or LatencyParams()
        self.params = self.base_params.for_pod(topology.pod_kind)
        self.engine = engine or Engine()
        self.region = SharedRegion(region_bytes, self.params)
        host_ids = [h.id for h in topology.hosts]
        self.allocator = PoolAllocator.for_region(self.region, host_ids, private_bytes)
        self.cxl_ports = {h: Port(f"cxl{h}", host_cxl_bandwidth(topology, h, self.params.lane_bw_gbs))
                          for h in host_ids}
        self.local_mem_bw_gbs = local_mem_bw_gbs
        self.mem_ports = {h: Port(f"ddr{h}", local_mem_bw_gbs) for h in host_ids}
        self.devices = {d.id: DeviceModel(d) for d in topology.devices}
        self.forwarders = {h: MmioForwarder(self, h) for h in host_ids}
        self.ring_slots = ring_slots
        self.down_hosts: set = set()
        self.vdevs: list[VirtualDevice] = []

    def add_host(self, host: HostSpec, links=(), devices=(), private_bytes: int = 256 << 10):
        """Runtime side of hot-add: a private segment is carved off the shared tail."""
        self.topology = replace(self.topology, hosts=self.topology.hosts + (host,),
                                links=self.topology.links + tuple(links),
                                devices=self.topology.devices + tuple(devices))
        hid = host.id
        self.allocator.carve_segment(hid, private_bytes)
        self.cxl_ports[hid] = Port(f"cxl{hid}", host_cxl_bandwidth(self.topology, hid,
                                                                   self.params.lane_bw_gbs))
        self.mem_ports[hid] = Port(f"ddr{hid}", self.local_mem_bw_gbs)
        self.forwarders[hid] = MmioForwarder(self, hid)
        self.down_hosts.discard(hid)
        for d in devices:
            self.devices[d.id] = DeviceModel(d)

    def set_host_links(self, host_id, bw_gbs: float):
        self.cxl_ports[host_id].bw_gbs = bw_gbs

    def fail_device(self, device_id: int):
        dev = self.devices[device_id]
        if dev.failed:
            return
        dev.failed = True
        self.engine.log(dev.actor, "device_failed", device_id)
        for v in self.vdevs:
            if v.device is dev:
                v.cancel_inflight("device failed")

    def host_down(self, host_id):
        """Owner removed or dead: forwarded MMIO to it can no longer work."""
        self.down_hosts.add(host_id)
        for v in self.vdevs:
            if v.owner == host_id and v.remote:
                v.channel_up = False


class MmioForwarder:
    """Agent-side MMIO executor on a device's owning host."""

    def __init__(self, fabric: Fabric, host):
        self.fabric = fabric
        self.host = host
        self.executed = 0

    def handle(self, vdev: "VirtualDevice", msg):
        op, dev_id, reg, value = _MMIO.unpack(msg.payload[:_MMIO.size])
        eng = self.fabric.engine
        eng.schedule(self.fabric.params.mmio_ns, lambda: self._execute(vdev, MmioOp(op), reg, value),
                     actor=f"agent{self.host}")

    def _execute(self, vdev, op, reg, value):
        self.executed += 1
        vdev.apply_mmio(op, reg, value, forwarded=True)


class VirtualDevice:
    """A user host's handle on a (possibly remote) device."""

    def __init__(self, fabric: Fabric, user, device: DeviceModel):
        self.fabric = fabric
        self.user = user
        self.device = device
        self.owner = device.spec.attached_host_id
        self.remote = self.user != self.owner
        self.channel_up = True
        self.accepting = True
        self.inflight: dict[int, IoRequest] = {}
        self.completed: list[IoRequest] = []
        self.cancelled: list[IoRequest] = []
        self._next_seq = 1
        self._drain_waiters: list[Callable[[], None]] = []
        self._reply_waiters: list[Callable[[int], None]] = []
        self.closed = False

        eng = fabric.engine
        region, alloc = fabric.region, fabric.allocator
        seg = SHARED if self.remote else self.owner
        self.segment = seg
        p = fabric.params
        self.write_ns = p.cxl_write_ns if self.remote else p.ddr_write_ns
        self.read_ns = p.cxl_read_ns if self.remote else p.ddr_read_ns
        self.port = fabric.cxl_ports[self.owner] if self.remote else fabric.mem_ports[self.owner]

        slots = fabric.ring_slots
        self.tx_ring = self._ring(alloc, slots, seg, user, device.actor)
        self.rx_ring = self._ring(alloc, slots, seg, user, device.actor)
        self.completion_ring = self._ring(alloc, 2 * slots, seg, device.actor, user)
        self._completion_poller = Poller(eng, f"host{user}", p.poll_interval_ns,
                                         self._poll_completions, self._phase())
        ch = self.completion_ring[1].channel
        region.watch(ch.base_addr, ch.capacity_slots * 64, self._completion_poller.kick)
        self._completion_poller.start()

        if self.remote:
            db_tx, db_rx = channel_create(region, alloc, 16, user, f"agent{self.owner}")
            rp_tx, rp_rx = channel_create(region, alloc, 16, f"agent{self.owner}", user)
            fwd = fabric.forwarders[self.owner]
            self.user_end = SimChannelEnd(eng, p, db_tx, rp_rx, self._on_reply,
                                          f"host{user}", self._phase())
            self.agent_end = SimChannelEnd(eng, p, rp_tx, db_rx, lambda m: fwd.handle(self, m),
                                           f"agent{self.owner}", self._phase())
            self._channel_addrs = [db_tx.channel.base_addr, rp_tx.channel.base_addr]
        else:
            self.user_end = self.agent_end = None
            self._channel_addrs = []
        # descriptors issued but not yet landed in their ring
        self._landing = {self.tx_ring[0]: 0, self.rx_ring[0]: 0}
        fabric.vdevs.append(self)

    def _phase(self):
        iv = self.fabric.params.poll_interval_ns
        return float(self.fabric.engine.rng.integers(0, int(iv))) if iv >= 1 else 0.0

    def _ring(self, alloc, slots, seg, tx_host, rx_host) -> tuple[Sender, Receiver]:
        # channel_create allocates from SHARED; private rings use the owner segment
        region = self.fabric.region
        if seg == SHARED:
            return channel_create(region, alloc, slots, tx_host, rx_host)
        size = slots * 64 + 64
        base = alloc.alloc(seg, size, 64)
        region.write_through(tx_host, base, bytes(size))
        ch = RingChannel(region, base, slots)
        return Sender(ch, tx_host), Receiver(ch, rx_host)

    # -- buffers -------------------------------------------------------------
    def alloc_buffer(self, size: int) -> int:
        return self.fabric.allocator.alloc(self.segment, max(size, 1), 64)

    def free_buffer(self, addr: int):
        self.fabric.allocator.free(addr)

    def write_buffer(self, addr: int, data: bytes):
        """User-side fill of an I/O buffer, published with a write-through."""
        self.fabric.region.write_through(self.user, addr, data)

    def read_buffer(self, addr: int, size: int) -> bytes:
        return self.fabric.region.fresh_read(self.user, addr, size)

    # -- submission ------------------------------------------------------------
    def post_io(self, req: IoRequest):
        """Queue a request and ring the device's doorbell."""
        if self.device.failed:
            raise DeviceFailed(f"device {self.device.id} has failed")
        if self.remote and not self.channel_up:
            raise ChannelDown(f"owning host {self.owner} is gone")
        if not self.accepting:
            raise DeviceQuiesced(f"device {self.device.id} is draining")
        eng = self.fabric.engine
        ring = self.tx_ring[0] if req.kind in READ_KINDS else self.rx_ring[0]
        seq = self._next_seq
        desc = _DESC.pack(req.buffer_addr, req.size_bytes, IO_KINDS.index(req.kind), seq)
        cap = ring.channel.capacity_slots
        if ring.in_flight + self._landing[ring] >= cap:
            ring._refresh_credit()
        if ring.in_flight + self._landing[ring] >= cap:
            raise RingFull(f"descriptor ring of device {self.device.id} is full")
        self._next_seq += 1
        req.seq = seq
        req.submit_time = eng.now
        req.status = "inflight"
        self.inflight[seq] = req
        eng.log(f"host{self.user}", "post_io", {"dev": self.device.id, "seq": seq,
                                               "kind": req.kind, "size": req.size_bytes})
        # the descriptor store and the doorbell are issued back to back
        self._landing[ring] += 1

        def land():
            self._landing[ring] -= 1
            ring.send(desc)

        eng.schedule(self.write_ns, land, actor=f"host{self.user}")
        if self.remote:
            self.user_end.post(_MMIO.pack(MmioOp.DOORBELL, self.device.id, 0, seq))
        else:
            eng.schedule(self.write_ns + self.fabric.params.mmio_ns,
                         lambda: self.apply_mmio(MmioOp.DOORBELL, 0, seq, forwarded=False),
                         actor=f"host{self.user}")

    def forward_mmio(self, op: MmioOp, reg: int = 0, value: int = 0,
                     on_reply: Callable[[int], None] | None = None):
        """Register access on the device. Reads deliver their value to ``on_reply``."""
        op = MmioOp(op)
        eng = self.fabric.engine
        if not self.remote:
            eng.schedule(self.fabric.params.mmio_ns,
                         lambda: self._local_mmio(op, reg, value, on_reply), actor=f"host{self.user}")
            return
        if not self.channel_up:
            raise ChannelDown(f"owning host {self.owner} is gone")
        if op is MmioOp.READ_REG:
            self._reply_waiters.append(on_reply or (lambda v: None))
        self.user_end.post(_MMIO.pack(op, self.device.id, reg, value))

    def _local_mmio(self, op, reg, value, on_reply):
        result = self.apply_mmio(op, reg, value, forwarded=False)
        if op is MmioOp.READ_REG and on_reply is not None:
            on_reply(result)

    def apply_mmio(self, op, reg, value, forwarded: bool):
        dev = self.device
        eng = self.fabric.engine
        eng.log(dev.actor, "mmio", {"op": int(op), "reg": reg, "forwarded": forwarded})
        if op is MmioOp.WRITE_REG:
            dev.registers[reg] = value
        elif op is MmioOp.READ_REG:
            result = dev.registers.get(reg, 0)
            if forwarded:
                self.agent_end.post(_MMIO_REPLY.pack(reg, result))
            return result
        elif op is MmioOp.DOORBELL:
            self._fetch_descriptors()
        return None

    def _on_reply(self, msg):
        reg, value = _MMIO_REPLY.unpack(msg.payload[:_MMIO_REPLY.size])
        if self._reply_waiters:
            self._reply_waiters.pop(0)(value)

    # -- device side ----------------------------------------------------------------
    def _fetch_descriptors(self):
        eng = self.fabric.engine
        for ring, reads in ((self.tx_ring[1], True), (self.rx_ring[1], False)):
            while (m := ring.try_recv()) is not None:
                addr, length, kind, seq = _DESC.unpack(m.payload[:_DESC.size])
                eng.schedule(self.read_ns, lambda s=seq, r=reads: self._start(s, r),
                             actor=self.device.actor)

    def _live(self, seq):
        req = self.inflight.get(seq)
        if req is None or req.status != "inflight" or self.device.failed:
            return None
        return req

    def _start(self, seq, reads_buffer):
        req = self._live(seq)
        if req is None:
            return
        eng = self.fabric.engine
        req.stages["fetched"] = eng.now
        if reads_buffer:
            end = self.port.reserve("from_mem", eng.now, req.size_bytes, self.device.spec.device_bw_gbs)
            eng.schedule_at(end + self.read_ns, lambda: self._dma_read_done(seq),
                            actor=self.device.actor, kind=EventKind.DMA_COMPLETE)
        else:
            done = self.device.service(eng.now, req.size_bytes)
            eng.schedule_at(done, lambda: self._service_done(seq, reads_buffer),
                            actor=self.device.actor, kind=EventKind.DEVICE_DONE)

    def _dma_read_done(self, seq):
        req = self._live(seq)
        if req is None:
            return
        eng = self.fabric.engine
        req.stages["dma"] = eng.now
        if req.size_bytes and req.buffer_addr:
            data = self.fabric.region.dma_read(self.device.actor, req.buffer_addr, req.size_bytes)
            req.observed_digest = digest(data)
        done = self.device.service(eng.now, req.size_bytes)
        eng.schedule_at(done, lambda: self._service_done(seq, True),
                        actor=self.device.actor, kind=EventKind.DEVICE_DONE)

    def _service_done(self, seq, reads_buffer):
        req = self._live(seq)
        if req is None:
            return
        eng = self.fabric.engine
        req.stages["service"] = eng.now
        if reads_buffer:
            self._write_completion(seq)
            return
        end = self.port.reserve("to_mem", eng.now, req.size_bytes, self.device.spec.device_bw_gbs)

        def landed():
            r = self._live(seq)
            if r is None:
                return
            if r.size_bytes and r.buffer_addr:
                data = rx_fill(seq, r.size_bytes)
                self.fabric.region.write_through(self.device.actor, r.buffer_addr, data)
                r.observed_digest = digest(data)
            r.stages["dma"] = eng.now
            self._post_completion(seq)

        eng.schedule_at(end + self.write_ns, landed, actor=self.device.actor,
                        kind=EventKind.DMA_COMPLETE)

    def _write_completion(self, seq):
        self.fabric.engine.schedule(self.write_ns, lambda: self._post_completion(seq),
                                    actor=self.device.actor)

    def _post_completion(self, seq):
        # completion entry lands in the ring now
        if self._live(seq) is None:
            return
        self.completion_ring[0].send(_COMPL.pack(seq, 0))

    # -- user side completion handling -----------------------------------------
    def _poll_completions(self):
        rx = self.completion_ring[1]
        got = False
        while (m := rx.try_recv()) is not None:
            seq, _status = _COMPL.unpack(m.payload[:_COMPL.size])
            got = True
            self.fabric.engine.schedule(self.read_ns, lambda s=seq: self._complete(s),
                                        actor=f"host{self.user}")
        return got

    def _complete(self, seq):
        req = self.inflight.get(seq)
        if req is None or req.status != "inflight":
            return
        eng = self.fabric.engine
        req.status = "done"
        req.complete_time = eng.now
        del self.inflight[seq]
        self.completed.append(req)
        eng.log(f"host{self.user}", "io_done", {"dev": self.device.id, "seq": seq})
        if req.on_complete:
            req.on_complete(req)
        self._check_drained()

    def cancel_inflight(self, reason: str):
        eng = self.fabric.engine
        for seq in sorted(self.inflight):
            req = self.inflight[seq]
            req.status = "cancelled"
            self.cancelled.append(req)
            eng.log(f"host{self.user}", "io_cancelled", {"dev": self.device.id, "seq": seq,
                                                         "reason": reason})
            if req.on_complete:
                req.on_complete(req)
        self.inflight.clear()
        self._check_drained()

    # -- migration support ----------------------------------------------------------
    def quiesce(self, on_drained: Callable[[], None]):
        """Stop accepting new I/O; call ``on_drained`` once nothing is in flight."""
        self.accepting = False
        self._drain_waiters.append(on_drained)
        self._check_drained()

    def _check_drained(self):
        if not self.inflight and self._drain_waiters and not self.accepting:
            waiters, self._drain_waiters = self._drain_waiters, []
            for fn in waiters:
                fn()

    def close(self):
        self.closed = True
        self.accepting = False
        self._completion_poller.stop()
        if self.user_end is not None:
            self.user_end.close()
            self.agent_end.close()


def attach_remote(fabric: Fabric, state, host, device_id: int) -> VirtualDevice:
    """Open a handle on ``device_id`` for ``host``; requires an orchestrator assignment.

    ``state`` is anything with an ``assignments`` mapping of
    ``(host, workload) -> device_id``.
    """
    if not any(h == host and d == device_id for (h, _w), d in state.assignments.items()):
        raise NotAssigned(f"device {device_id} is not assigned to host {host}")
    if device_id not in fabric.devices:
        raise NotAssigned(f"device {device_id} unknown to the fabric")
    dev = fabric.devices[device_id]
    if dev.failed:
        raise DeviceFailed(f"device {device_id} has failed")
    if dev.spec.attached_host_id != host and dev.spec.attached_host_id in fabric.down_hosts:
        raise ChannelDown(f"owning host {dev.spec.attached_host_id} is gone")
    return VirtualDevice(fabric, host, dev)


def post_io(vdev: VirtualDevice, request: IoRequest):
    vdev.post_io(request)


def forward_mmio(vdev: VirtualDevice, op: MmioOp, reg: int = 0, value: int = 0, on_reply=None):
    vdev.forward_mmio(op, reg, value, on_reply)
