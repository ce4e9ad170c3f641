"""Single-producer/single-consumer message ring in pool memory.

Every message occupies one 64-byte slot::

    offset 0   u64  seq      (1, 2, 3, ...; 0 means never written)
    offset 8   u16  len      (<= 54)
    offset 10  54 B payload

A slot is sent with one full-line write-through, so the receiver can never
observe a new ``seq`` next to an old payload. The receiver advertises how many
messages it has consumed in a separate credit line, refreshed every
``capacity // 4`` messages; the sender reads it only when it believes the ring
is full.
"""
from __future__ import annotations

import math
import os
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

from .errors import CorruptSlot, PayloadTooLarge, WouldBlock
from .shmem import LINE, SHARED, PoolAllocator, SharedRegion
from .simcore import Engine, Poller
from .topology import LatencyParams

SLOT_BYTES = 64
MAX_PAYLOAD = 54
_HEADER = struct.Struct("<QH")
_SLOT = struct.Struct("<QH54s")
_CREDIT = struct.Struct("<Q")
_REF = struct.Struct("<QI")


@dataclass(frozen=True)
class Message:
    seq: int
    payload: bytes


@dataclass(frozen=True)
class RingChannel:
    """Placement of a ring in the shared segment. Endpoints hold the cursors."""

    region: SharedRegion
    base_addr: int
    capacity_slots: int

    @property
    def credit_addr(self) -> int:
        return self.base_addr + self.capacity_slots * SLOT_BYTES

    @property
    def footprint(self) -> int:
        return self.capacity_slots * SLOT_BYTES + LINE

    @property
    def credit_every(self) -> int:
        return max(1, self.capacity_slots // 4)

    def slot_addr(self, seq: int) -> int:
        return self.base_addr + (seq % self.capacity_slots) * SLOT_BYTES


def channel_create(region: SharedRegion, allocator: PoolAllocator, capacity_slots: int,
                   sender_host=0, receiver_host=1):
    """Allocate and zero a ring; returns ``(sender, receiver)`` endpoints."""
    if capacity_slots < 2 or capacity_slots & (capacity_slots - 1):
        raise ValueError(f"capacity must be a power of two >= 2, got {capacity_slots}")
    size = capacity_slots * SLOT_BYTES + LINE
    base = allocator.alloc(SHARED, size, LINE)
    region.write_through(sender_host, base, bytes(size))
    ch = RingChannel(region, base, capacity_slots)
    return Sender(ch, sender_host), Receiver(ch, receiver_host)


class Sender:
    def __init__(self, channel: RingChannel, host):
        self.channel = channel
        self.host = host
        self.next_seq = 1
        self.known_consumed = 0
        self.closed = False

    @property
    def in_flight(self) -> int:
        return self.next_seq - 1 - self.known_consumed

    def _refresh_credit(self):
        ch = self.channel
        raw = ch.region.fresh_read(self.host, ch.credit_addr, _CREDIT.size)
        self.known_consumed = _CREDIT.unpack(raw)[0]

    def try_send(self, payload: bytes) -> bool:
        """Send if the ring has room. Returns False instead of blocking."""
        if len(payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"{len(payload)} > {MAX_PAYLOAD} bytes")
        ch = self.channel
        if self.in_flight >= ch.capacity_slots:
            self._refresh_credit()
            if self.in_flight >= ch.capacity_slots:
                return False
        seq = self.next_seq
        addr = ch.slot_addr(seq)
        if ch.region.mode == "threads":
            # payload first, then seq: the seq store acts as the release
            ch.region.write_through(self.host, addr + 8, _HEADER.pack(0, len(payload))[8:]
                                    + payload.ljust(MAX_PAYLOAD, b"\0"))
            ch.region.write_through(self.host, addr, _CREDIT.pack(seq))
        else:
            ch.region.write_through(self.host, addr, _SLOT.pack(seq, len(payload), payload))
        self.next_seq = seq + 1
        return True

    def send(self, payload: bytes):
        if not self.try_send(payload):
            raise WouldBlock(f"ring full ({self.channel.capacity_slots} unconsumed)")


class Receiver:
    def __init__(self, channel: RingChannel, host):
        self.channel = channel
        self.host = host
        self.next_expected = 1
        self.consumed = 0

    def try_recv(self) -> Message | None:
        """Next message, or None when the expected slot is not yet written."""
        ch = self.channel
        raw = ch.region.fresh_read(self.host, ch.slot_addr(self.next_expected), SLOT_BYTES)
        seq, length, payload = _SLOT.unpack(raw)
        if seq != self.next_expected:
            if seq > self.next_expected:
                raise CorruptSlot(f"slot holds seq {seq}, expected {self.next_expected}")
            return None
        if length > MAX_PAYLOAD:
            raise CorruptSlot(f"slot {seq} has length {length}")
        self.next_expected += 1
        self.consumed += 1
        if self.consumed % ch.credit_every == 0:
            ch.region.write_through(self.host, ch.credit_addr, _CREDIT.pack(self.consumed))
        return Message(seq, payload[:length])

    def drain(self):
        out = []
        while (m := self.try_recv()) is not None:
            out.append(m)
        return out


def force_slot(channel: RingChannel, seq: int, payload: bytes = b"", host="test"):
    """Test hook: write an arbitrary slot, bypassing flow control."""
    channel.region.write_through(host, channel.slot_addr(seq),
                                 _SLOT.pack(seq, len(payload), payload))


def encode_ref(addr: int, length: int) -> bytes:
    """Message body pointing at a larger buffer already published in the pool."""
    return _REF.pack(addr, length)


def decode_ref(payload: bytes) -> tuple[int, int]:
    return _REF.unpack(payload[:_REF.size])


# -- latency measurement ------------------------------------------------------

def nearest_rank(samples, pct: float) -> float:
    """Nearest-rank percentile (no interpolation)."""
    s = np.sort(np.asarray(samples))
    if s.size == 0:
        raise ValueError("no samples")
    k = max(1, math.ceil(pct / 100.0 * s.size))
    return float(s[k - 1])


@dataclass
class LatencyDistribution:
    samples: np.ndarray  # one-way latency per iteration, ns

    @property
    def median(self) -> float:
        return nearest_rank(self.samples, 50)

    def percentiles(self, pcts=(10, 50, 90, 99)) -> dict[int, float]:
        return {p: nearest_rank(self.samples, p) for p in pcts}

    def __len__(self):
        return len(self.samples)


class SimChannelEnd:
    """Wires one channel endpoint into the event engine.

    Sends land in pool memory ``cxl_write_ns`` after they are issued; the
    receiving side polls on its grid and hands each message to ``on_message``
    ``cxl_read_ns`` after the poll that observed it.
    """

    def __init__(self, engine: Engine, params: LatencyParams, sender: Sender, receiver: Receiver,
                 on_message, actor: str, phase_ns: float = 0.0):
        self.engine = engine
        self.params = params
        self.sender = sender
        self.receiver = receiver
        self.on_message = on_message
        self.actor = actor
        self.delivered = 0
        self.poller = Poller(engine, actor, params.poll_interval_ns, self._poll, phase_ns)
        ch = receiver.channel
        ch.region.watch(ch.base_addr, ch.capacity_slots * SLOT_BYTES, self.poller.kick)
        self.poller.start()
        self._backlog: list[bytes] = []

    def post(self, payload: bytes):
        """Issue a send now; retries on the poll grid while the ring is full."""
        if len(payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"{len(payload)} > {MAX_PAYLOAD} bytes")
        self._backlog.append(payload)
        if len(self._backlog) == 1:
            self.engine.schedule(self.params.cxl_write_ns, self._land, actor=self.actor)

    def _land(self):
        while self._backlog:
            if not self.sender.try_send(self._backlog[0]):
                self.engine.schedule(max(self.params.poll_interval_ns, 1.0), self._land,
                                     actor=self.actor)
                return
            self._backlog.pop(0)

    def _poll(self):
        msg = self.receiver.try_recv()
        if msg is None:
            return False
        self.engine.schedule(self.params.cxl_read_ns, lambda: self._deliver(msg), actor=self.actor)
        return True

    def _deliver(self, msg):
        self.delivered += 1
        self.on_message(msg)

    def close(self):
        self.poller.stop()


def ping_pong(iterations: int = 10_000, params: LatencyParams | None = None, seed: int = 0,
              capacity: int = 8, think_max_ns: int = 1000, pod_kind: str = "mhd_direct",
              engine: Engine | None = None) -> LatencyDistribution:
    """Simulated ping-pong between two hosts over a pair of rings.

    Each sample is half the round trip. The pinger waits a random think time
    (integer ns, drawn from the engine RNG) before each ping so that sends land
    at varying offsets from the receiver's poll grid.
    """
    params = (params or LatencyParams()).for_pod(pod_kind)
    eng = engine or Engine(seed)
    region = SharedRegion(64 * 1024, params)
    alloc = PoolAllocator({SHARED: region.size_bytes})
    ab_tx, ab_rx = channel_create(region, alloc, capacity, "A", "B")
    ba_tx, ba_rx = channel_create(region, alloc, capacity, "B", "A")

    def draw_phase():
        if params.poll_interval_ns <= 0:
            return 0.0
        return float(eng.rng.integers(0, int(params.poll_interval_ns)))

    samples = np.zeros(iterations)
    state = {"i": 0, "t0": 0.0}

    def ping():
        state["t0"] = eng.now
        eng.log("A", "ping", state["i"])
        a_end.post(struct.pack("<Q", state["i"]))

    def on_ping(msg):
        eng.log("B", "pong", struct.unpack("<Q", msg.payload)[0])
        b_end.post(msg.payload)

    def on_pong(msg):
        i = state["i"]
        samples[i] = (eng.now - state["t0"]) / 2
        state["i"] = i + 1
        if state["i"] < iterations:
            eng.schedule(float(eng.rng.integers(0, think_max_ns)) if think_max_ns else 0.0, ping,
                         actor="A")
        else:
            a_end.close()
            b_end.close()

    # a_end: A sends pings, receives pongs; b_end: the reverse
    b_end = SimChannelEnd(eng, params, ba_tx, ab_rx, on_ping, "B", draw_phase())
    a_end = SimChannelEnd(eng, params, ab_tx, ba_rx, on_pong, "A", draw_phase())
    if iterations:
        eng.schedule(float(eng.rng.integers(0, think_max_ns)) if think_max_ns else 0.0, ping,
                     actor="A")
    eng.run_until()
    return LatencyDistribution(samples[:state["i"]])


# -- real threads ----------------------------------------------------------------

# give the CPU to the peer thread; sleep(0) may return without doing so when
# both threads share one core
_yield = getattr(os, "sched_yield", lambda: time.sleep(0))

@dataclass
class StressResult:
    messages: int
    received: int
    in_order: bool
    duplicates: int
    lost: int
    elapsed_s: float
    sender_stalls: int
    receiver_empty_polls: int


def _stress_payload(i: int) -> bytes:
    # variable length, content derived from the index so corruption is detectable
    n = 8 + (i * 7) % (MAX_PAYLOAD - 7)
    body = (i & 0xFF).to_bytes(1, "little") * (n - 8)
    return struct.pack("<Q", i) + body


def stress_threads(messages: int = 1_000_000, capacity: int = 1024) -> StressResult:
    """Push ``messages`` through one ring between two OS threads."""
    region = SharedRegion((capacity + 1) * SLOT_BYTES, mode="threads")
    alloc = PoolAllocator({SHARED: region.size_bytes})
    tx, rx = channel_create(region, alloc, capacity, "tx", "rx")
    stats = {"stalls": 0, "empty": 0, "received": 0, "dups": 0, "in_order": True}
    expected_payloads = _stress_payload

    def produce():
        i = 0
        send = tx.try_send
        while i < messages:
            if send(expected_payloads(i)):
                i += 1
            else:
                stats["stalls"] += 1
                _yield()

    def consume():
        want = 0
        recv = rx.try_recv
        while want < messages:
            m = recv()
            if m is None:
                stats["empty"] += 1
                _yield()
                continue
            idx = struct.unpack_from("<Q", m.payload)[0]
            if idx < want:
                stats["dups"] += 1
            if idx != want or m.payload != expected_payloads(idx):
                stats["in_order"] = False
            want += 1
        stats["received"] = want

    t0 = time.perf_counter()
    threads = [threading.Thread(target=produce), threading.Thread(target=consume)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t0
    return StressResult(
        messages=messages,
        received=stats["received"],
        in_order=stats["in_order"],
        duplicates=stats["dups"],
        lost=messages - stats["received"],
        elapsed_s=elapsed,
        sender_stalls=stats["stalls"],
        receiver_empty_polls=stats["empty"],
    )


def ping_pong_threads(iterations: int = 1000, capacity: int = 8) -> LatencyDistribution:
    """Wall-clock ping-pong between two threads; samples are half round trips."""
    region = SharedRegion(2 * (capacity + 1) * SLOT_BYTES, mode="threads")
    alloc = PoolAllocator({SHARED: region.size_bytes})
    ab_tx, ab_rx = channel_create(region, alloc, capacity, "A", "B")
    ba_tx, ba_rx = channel_create(region, alloc, capacity, "B", "A")
    samples = np.zeros(iterations)

    def ponger():
        for _ in range(iterations):
            while (m := ab_rx.try_recv()) is None:
                _yield()
            while not ba_tx.try_send(m.payload):
                _yield()

    t = threading.Thread(target=ponger)
    t.start()
    for i in range(iterations):
        t0 = time.perf_counter_ns()
        ab_tx.send(struct.pack("<Q", i))
        while ba_rx.try_recv() is None:
            _yield()
        samples[i] = (time.perf_counter_ns() - t0) / 2
    t.join()
    return LatencyDistribution(samples)
