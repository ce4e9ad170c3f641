"""Pool memory without cross-host coherence.

``SharedRegion`` keeps the authoritative contents of the pool plus one private
line cache per host. Nothing keeps the caches coherent: a host sees its own
cached copy of a line until it explicitly invalidates it, and other hosts see
its writes only after it publishes them (or writes through to the pool in the
first place). This is the hazard software coherence has to manage, made
deterministic so tests can reproduce it.
"""
from __future__ import annotations

import bisect
from collections import defaultdict
from dataclasses import dataclass

from .errors import OutOfBounds, OutOfPoolMemory
from .topology import CACHELINE_BYTES, LatencyParams

LINE = CACHELINE_BYTES
SHARED = "shared"


@dataclass
class AccessCounters:
    backing_reads: int = 0
    backing_writes: int = 0
    cache_hits: int = 0

    def charged_ns(self, params: LatencyParams) -> float:
        return (self.backing_reads * params.cxl_read_ns
                + self.backing_writes * params.cxl_write_ns
                + self.cache_hits * params.ddr_read_ns)


def lines_spanned(addr: int, length: int) -> range:
    if length <= 0:
        return range(0)
    return range(addr // LINE, (addr + length - 1) // LINE + 1)


class SharedRegion:
    """Byte-addressable pool memory with per-host, never-evicted line caches.

    ``mode="threads"`` disables the caches: every access goes to the backing
    store, which is how the real-threads channel stress runs.
    """

    line_size = LINE

    def __init__(self, size_bytes: int, params: LatencyParams | None = None, mode: str = "sim"):
        if size_bytes <= 0 or size_bytes % LINE:
            raise ValueError("region size must be a positive multiple of 64")
        if mode not in ("sim", "threads"):
            raise ValueError(f"unknown mode {mode!r}")
        self.size_bytes = size_bytes
        self.params = params or LatencyParams()
        self.mode = mode
        self.backing = bytearray(size_bytes)
        self.caches: dict[object, dict[int, bytearray]] = defaultdict(dict)
        self.counters: dict[object, AccessCounters] = defaultdict(AccessCounters)
        self._watchers: dict[int, list] = defaultdict(list)
        # every backing-store mutation goes through _store; tests hook this
        self.store_hook = None

    # -- internals ---------------------------------------------------------
    def _check(self, addr: int, length: int):
        if addr < 0 or length < 0 or addr + length > self.size_bytes:
            raise OutOfBounds(f"[{addr}, {addr + length}) outside region of {self.size_bytes} bytes")

    def _store(self, host, line: int, offset: int, data: bytes):
        start = line * LINE + offset
        self.backing[start:start + len(data)] = data
        self.counters[host].backing_writes += 1
        if self.store_hook is not None:
            self.store_hook(host, line, offset, bytes(data))
        for fn in self._watchers.get(line, ()):
            fn()

    def _line(self, host, line: int) -> bytearray:
        cache = self.caches[host]
        copy = cache.get(line)
        if copy is None:
            self.counters[host].backing_reads += 1
            copy = bytearray(self.backing[line * LINE:(line + 1) * LINE])
            cache[line] = copy
        else:
            self.counters[host].cache_hits += 1
        return copy

    # -- public API --------------------------------------------------------
    def watch(self, addr: int, length: int, fn):
        """Call ``fn()`` whenever the backing store of the range changes."""
        for line in lines_spanned(addr, length):
            self._watchers[line].append(fn)

    def unwatch(self, addr: int, length: int, fn):
        for line in lines_spanned(addr, length):
            if fn in self._watchers.get(line, ()):
                self._watchers[line].remove(fn)

    def charged_ns(self, host) -> float:
        return self.counters[host].charged_ns(self.params)

    def cached_read(self, host, addr: int, length: int) -> bytes:
        self._check(addr, length)
        if self.mode == "threads":
            return self._direct_read(host, addr, length)
        out = bytearray()
        end = addr + length
        for line in lines_spanned(addr, length):
            copy = self._line(host, line)
            lo = max(addr, line * LINE) - line * LINE
            hi = min(end, (line + 1) * LINE) - line * LINE
            out += copy[lo:hi]
        return bytes(out)

    def cached_write(self, host, addr: int, data: bytes):
        """Write into the host's cache only. Other hosts cannot see it yet."""
        self._check(addr, len(data))
        if self.mode == "threads":
            raise RuntimeError("cached writes are unavailable with caches disabled")
        end = addr + len(data)
        for line in lines_spanned(addr, len(data)):
            copy = self._line(host, line)
            lo = max(addr, line * LINE)
            hi = min(end, (line + 1) * LINE)
            copy[lo - line * LINE:hi - line * LINE] = data[lo - addr:hi - addr]

    def publish(self, host, addr: int, length: int):
        """Write back the host's cached lines covering the range (whole lines)."""
        self._check(addr, length)
        cache = self.caches.get(host, {})
        for line in lines_spanned(addr, length):
            copy = cache.get(line)
            if copy is not None:
                self._store(host, line, 0, bytes(copy))

    def write_through(self, host, addr: int, data: bytes):
        """Store straight to the pool, dropping the writer's stale copies.

        Each touched line is updated atomically; a multi-line write is not
        atomic as a whole.
        """
        self._check(addr, len(data))
        cache = self.caches.get(host)
        end = addr + len(data)
        for line in lines_spanned(addr, len(data)):
            if cache:
                cache.pop(line, None)
            lo = max(addr, line * LINE)
            hi = min(end, (line + 1) * LINE)
            self._store(host, line, lo - line * LINE, data[lo - addr:hi - addr])

    def invalidate(self, host, addr: int, length: int):
        self._check(addr, length)
        cache = self.caches.get(host)
        if not cache:
            return
        for line in lines_spanned(addr, length):
            cache.pop(line, None)

    def fresh_read(self, host, addr: int, length: int) -> bytes:
        """Invalidate then read: always observes the pool's current contents."""
        self._check(addr, length)
        if self.mode == "threads":
            return self._direct_read(host, addr, length)
        self.invalidate(host, addr, length)
        return self.cached_read(host, addr, length)

    def dma_read(self, agent, addr: int, length: int) -> bytes:
        """Device read of pool memory. Devices keep no CPU cache, so this is
        equivalent to ``fresh_read`` but leaves no cached copies behind."""
        self._check(addr, length)
        return self._direct_read(agent, addr, length)

    def _direct_read(self, host, addr, length):
        self.counters[host].backing_reads += len(lines_spanned(addr, length))
        return bytes(self.backing[addr:addr + length])

    def peek(self, addr: int, length: int) -> bytes:
        """Backing-store contents, no accounting. For tests and tracing."""
        self._check(addr, length)
        return bytes(self.backing[addr:addr + length])


@dataclass
class _Segment:
    start: int
    end: int
    free: list  # sorted [start, size] blocks


class PoolAllocator:
    """First-fit allocator over a shared segment plus per-host private segments.

    ``segments`` maps an owner (a host id or ``SHARED``) to its size in bytes;
    segments are laid out back to back starting at ``base``.
    """

    def __init__(self, segments: dict, base: int = 0, align: int = LINE):
        self.default_align = align
        self.segments: dict[object, _Segment] = {}
        cursor = base
        for owner, size in segments.items():
            if size % LINE:
                raise ValueError("segment sizes must be multiples of 64")
            self.segments[owner] = _Segment(cursor, cursor + size, [[cursor, size]])
            cursor += size
        self.end = cursor
        self._live: dict[int, tuple] = {}  # addr -> (owner, block_start, block_size)

    @classmethod
    def for_region(cls, region: SharedRegion, hosts, private_bytes: int):
        """Carve ``region`` into one private segment per host, the rest shared."""
        segs = {h: private_bytes for h in hosts}
        segs[SHARED] = region.size_bytes - private_bytes * len(segs)
        if segs[SHARED] <= 0:
            raise ValueError("region too small for the requested private segments")
        return cls(segs)

    def carve_segment(self, owner, size: int, source=SHARED):
        """Split a new segment for ``owner`` off the free tail of ``source``."""
        if owner in self.segments:
            raise ValueError(f"segment {owner!r} already exists")
        if size <= 0 or size % LINE:
            raise ValueError("segment sizes must be positive multiples of 64")
        src = self.segments[source]
        if not src.free or src.free[-1][0] + src.free[-1][1] != src.end or src.free[-1][1] < size:
            raise OutOfPoolMemory(f"segment {source!r} has no free tail of {size} bytes")
        tail = src.free[-1]
        tail[1] -= size
        if tail[1] == 0:
            src.free.pop()
        src.end -= size
        self.segments[owner] = _Segment(src.end, src.end + size, [[src.end, size]])
        return src.end

    def segment_bounds(self, owner) -> tuple[int, int]:
        seg = self.segments[owner]
        return seg.start, seg.end

    def owner_of(self, addr: int):
        for owner, seg in self.segments.items():
            if seg.start <= addr < seg.end:
                return owner
        return None

    def alloc(self, owner, size: int, align: int | None = None) -> int:
        align = align or self.default_align
        if size <= 0:
            raise ValueError("size must be positive")
        if align <= 0 or align & (align - 1):
            raise ValueError("alignment must be a power of two")
        if owner not in self.segments:
            raise KeyError(f"no segment for owner {owner!r}")
        seg = self.segments[owner]
        for i, (start, bsize) in enumerate(seg.free):
            addr = -(-start // align) * align
            pad = addr - start
            if pad + size <= bsize:
                used = pad + size
                if used == bsize:
                    del seg.free[i]
                else:
                    seg.free[i] = [start + used, bsize - used]
                self._live[addr] = (owner, start, used)
                return addr
        raise OutOfPoolMemory(f"cannot fit {size} bytes (align {align}) in segment {owner!r}")

    def free(self, addr: int):
        owner, start, size = self._live.pop(addr)
        free = self.segments[owner].free
        i = bisect.bisect_left(free, [start, 0])
        free.insert(i, [start, size])
        # coalesce with neighbours
        if i + 1 < len(free) and free[i][0] + free[i][1] == free[i + 1][0]:
            free[i][1] += free[i + 1][1]
            del free[i + 1]
        if i > 0 and free[i - 1][0] + free[i - 1][1] == free[i][0]:
            free[i - 1][1] += free[i][1]
            del free[i]

    def size_of(self, addr: int) -> int:
        owner, start, used = self._live[addr]
        return start + used - addr

    def live(self):
        """(addr, size, owner) for every outstanding allocation."""
        return [(a, self.size_of(a), o[0]) for a, o in sorted(self._live.items())]
