"""UDP echo benchmark over a NIC whose I/O buffers are local or in the pool.

Models the two-socket server setup: the NIC hangs off one socket, the echo
application runs on the other, and each socket has its own CXL links into
the pod. With ``placement="local"`` the application runs on the NIC's socket
and TX/RX buffers sit in local DDR. With ``placement="cxl"`` the buffers come
from pool memory, so the NIC DMAs them over its socket's links and the
application reaches them over its own. TX/RX queues stay in local memory in
both cases.

A request's path through the server is a chain of FIFO stages (NIC wire,
DMA over a port, memory accesses) and fixed delays. Every stage preserves
arrival order, so each request's timeline is computed when it arrives and a
single completion event per request closes the client's loop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .channel import nearest_rank
from .datapath import Port
from .simcore import Engine, EventKind
from .topology import (HostSpec, LatencyParams, LinkSpec, MhdSpec, PcieDeviceSpec, PodTopology,
                       host_cxl_bandwidth)

PLACEMENTS = ("local", "cxl")
STANDARD_PKT_SIZES = (75, 1500, 9000)


@dataclass(frozen=True)
class UdpBenchConfig:
    pkt_size: int = 1500
    nic_gbps: float = 100.0
    # per-socket CXL bandwidth; two x8 links at 3.75 GB/s per lane by default
    nic_port_gbs: float = 30.0
    app_port_gbs: float = 30.0
    local_mem_bw_gbs: float = 240.0
    base_rtt_ns: float = 25_000.0    # client stack + wire at zero load
    app_proc_ns: float = 1_000.0
    clients: int = 256
    window: int = 32                 # outstanding requests per client
    requests: int = 2_000            # measured requests per load point
    warmup: int = 200
    load_step: float = 0.05
    max_load: float = 1.0

    @property
    def nic_gbs(self) -> float:
        return self.nic_gbps / 8.0

    def load_points(self) -> list[float]:
        n = int(round(self.max_load / self.load_step))
        return [round((i + 1) * self.load_step, 6) for i in range(n)]


@dataclass(frozen=True)
class BenchPoint:
    offered_gbps: float
    achieved_gbps: float
    p50_us: float
    p99_us: float
    placement: str
    pkt_size: int


def two_socket_topology(nic_gbps: float = 100.0, lanes_per_socket: int = 8) -> PodTopology:
    """Two sockets (hosts 0 and 1) on one MHD, NIC on socket 0, echo client outside the pod."""
    return PodTopology(
        hosts=[HostSpec(0, 1), HostSpec(1, 1)],
        mhds=[MhdSpec(0, port_count=2)],
        links=[LinkSpec(0, 0, lanes_per_socket), LinkSpec(1, 0, lanes_per_socket)],
        devices=[PcieDeviceSpec(0, 0, "nic", nic_gbps / 8.0, 0.0)],
    )


def config_from_topology(topology: PodTopology, nic_id: int, app_host: int,
                         params: LatencyParams = LatencyParams(), **overrides) -> UdpBenchConfig:
    nic = topology.device(nic_id)
    if nic.kind != "nic":
        raise ValueError(f"device {nic_id} is a {nic.kind}, not a nic")
    cfg = UdpBenchConfig(
        nic_gbps=nic.device_bw_gbs * 8.0,
        nic_port_gbs=host_cxl_bandwidth(topology, nic.attached_host_id, params.lane_bw_gbs),
        app_port_gbs=host_cxl_bandwidth(topology, app_host, params.lane_bw_gbs),
    )
    return replace(cfg, **overrides)


class _Server:
    """Timing of one echo through the server for a given buffer placement."""

    def __init__(self, cfg: UdpBenchConfig, params: LatencyParams, placement: str):
        if placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}")
        self.cfg = cfg
        self.p = params
        self.wire_rx = Port("nic-rx", cfg.nic_gbs)
        self.wire_tx = Port("nic-tx", cfg.nic_gbs)
        local = Port("ddr", cfg.local_mem_bw_gbs)
        if placement == "local":
            self.nic_buf = self.app_buf = local
            self.buf_read, self.buf_write = params.ddr_read_ns, params.ddr_write_ns
        else:
            self.nic_buf = Port("cxl-nic-socket", cfg.nic_port_gbs)
            self.app_buf = Port("cxl-app-socket", cfg.app_port_gbs)
            self.buf_read, self.buf_write = params.cxl_read_ns, params.cxl_write_ns
        self.local = local

    def poll_tick(self, t: float) -> float:
        iv = self.p.poll_interval_ns
        return t if iv <= 0 else math.ceil(t / iv) * iv

    def stages(self):
        """The echo path as (port, direction, endpoint rate, delay after) steps.

        ``port`` None is a pure delay; the string "poll" waits for the
        application's next poll tick.
        """
        p, cfg = self.p, self.cfg
        return [
            (None, None, None, cfg.base_rtt_ns / 2),                            # client -> server
            (self.wire_rx, "to_mem", None, 0.0),                                # NIC receives
            (self.nic_buf, "to_mem", cfg.nic_gbs, self.buf_write + p.ddr_write_ns),  # RX DMA + CQE
            ("poll", None, None, p.ddr_read_ns),                                # app sees completion
            (self.app_buf, "from_mem", None, self.buf_read + cfg.app_proc_ns),  # read payload, process
            (self.app_buf, "to_mem", None,
             self.buf_write + p.ddr_write_ns + p.mmio_ns + p.ddr_read_ns),      # reply, TX desc, doorbell
            (self.nic_buf, "from_mem", cfg.nic_gbs, self.buf_read),             # TX DMA
            (self.wire_tx, "from_mem", None, cfg.base_rtt_ns / 2),              # NIC sends, back to client
        ]


def run_point(cfg: UdpBenchConfig, offered_gbps: float, placement: str,
              params: LatencyParams | None = None, seed: int = 0,
              engine: Engine | None = None) -> tuple[BenchPoint, np.ndarray]:
    """One load level. Returns the summary point and the measured RTTs in ns."""
    params = params or LatencyParams()
    eng = engine or Engine(seed, trace=False)
    server = _Server(cfg, params, placement)
    total = cfg.warmup + cfg.requests
    mean_gap = cfg.pkt_size / (offered_gbps / 8.0)
    gaps = eng.rng.exponential(mean_gap, size=total)
    cap = cfg.clients * cfg.window
    sent_at = np.full(total, np.nan)
    done_at = np.full(total, np.nan)
    st = {"next": 0, "outstanding": 0, "waiting": 0}

    stages = server.stages()
    n = cfg.pkt_size

    def advance(i, k):
        # run stage k of request i at the current time, then schedule the next
        t = eng.now
        while k < len(stages):
            port, direction, rate, delay = stages[k]
            if port == "poll":
                t = server.poll_tick(t) + delay
            elif port is None:
                t += delay
            elif t > eng.now:
                # FIFO reservations must be made at their own time
                eng.schedule_at(t, lambda: advance(i, k), actor="server", kind=EventKind.DMA_COMPLETE)
                return
            else:
                t = port.reserve(direction, t, n, rate) + delay
            k += 1
        eng.schedule_at(t, lambda: complete(i), actor="client", kind=EventKind.DEVICE_DONE)

    def send(i):
        st["outstanding"] += 1
        sent_at[i] = eng.now
        advance(i, 0)

    def arrive():
        i = st["next"]
        st["next"] += 1
        if st["outstanding"] < cap:
            send(i)
        else:
            st["waiting"] += 1
        if st["next"] < total:
            eng.schedule(gaps[st["next"]], arrive, actor="client")

    queue_base = {"head": 0}

    def complete(i):
        done_at[i] = eng.now
        st["outstanding"] -= 1
        if st["waiting"]:
            # oldest deferred request goes out now
            st["waiting"] -= 1
            j = _first_unsent(sent_at, queue_base, st["next"])
            send(j)

    eng.schedule(gaps[0], arrive, actor="client")
    eng.run_until()

    rtt = (done_at - sent_at)[cfg.warmup:]
    finished = np.sort(done_at[cfg.warmup:])
    span = finished[-1] - finished[0]
    achieved = (len(finished) - 1) * cfg.pkt_size / span * 8.0 if span > 0 else 0.0
    point = BenchPoint(
        offered_gbps=offered_gbps,
        achieved_gbps=achieved,
        p50_us=nearest_rank(rtt, 50) / 1e3,
        p99_us=nearest_rank(rtt, 99) / 1e3,
        placement=placement,
        pkt_size=cfg.pkt_size,
    )
    return point, rtt


def _first_unsent(sent_at, cursor, limit):
    # requests arrive in index order; deferred ones are sent in that order too
    i = cursor["head"]
    while i < limit and not np.isnan(sent_at[i]):
        i += 1
    cursor["head"] = i
    return i


def run_udp_bench(cfg: UdpBenchConfig, placement: str, params: LatencyParams | None = None,
                  seed: int = 0) -> list[BenchPoint]:
    """Sweep offered load in ``load_step`` increments up to ``max_load`` of the NIC rate.

    Every load level reuses ``seed``, so both placements see identical
    arrival sequences.
    """
    return [run_point(cfg, frac * cfg.nic_gbps, placement, params, seed)[0]
            for frac in cfg.load_points()]


def saturation_gbps(cfg: UdpBenchConfig, placement: str, params: LatencyParams | None = None,
                    seed: int = 0, overload: float = 2.0) -> float:
    """Achieved throughput when offered ``overload`` times the NIC rate."""
    return run_point(cfg, overload * cfg.nic_gbps, placement, params, seed)[0].achieved_gbps


def bottleneck_gbps(cfg: UdpBenchConfig, placement: str) -> float:
    """Upper bound on echo throughput from the slowest pipe on the path."""
    pipes = [cfg.nic_gbs]
    if placement == "cxl":
        pipes += [cfg.nic_port_gbs, cfg.app_port_gbs]
    else:
        # NIC DMA and application both use local DDR in each direction
        pipes.append(cfg.local_mem_bw_gbs / 2)
    return min(pipes) * 8.0
