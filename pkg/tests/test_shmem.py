import random

import pytest

from cxlpool.errors import OutOfBounds, OutOfPoolMemory
from cxlpool.shmem import SHARED, PoolAllocator, SharedRegion
from cxlpool.topology import LatencyParams

from oracles import CoherenceOracle


def region(size=4096):
    return SharedRegion(size, LatencyParams())


def test_unpublished_write_invisible_then_published():
    r = region()
    r.cached_write(0, 128, b"A")
    assert r.fresh_read(1, 128, 1) == b"\0"
    assert r.cached_read(0, 128, 1) == b"A"
    r.publish(0, 128, 1)
    assert r.fresh_read(1, 128, 1) == b"A"


def test_publish_of_untouched_range_is_noop():
    r = region()
    r.write_through(1, 0, b"xyz")
    before = r.peek(0, 4096)
    r.publish(0, 0, 4096)
    assert r.peek(0, 4096) == before


def test_write_through_charges_one_write_per_line():
    r = region()
    r.write_through(0, 64, b"\1" * 64)
    assert r.counters[0].backing_writes == 1
    assert r.charged_ns(0) == 300
    r.write_through(0, 100, b"\2" * 64)      # spans lines 1 and 2
    assert r.counters[0].backing_writes == 3
    assert r.peek(100, 64) == b"\2" * 64


def test_write_through_invalidates_writers_copy():
    r = region()
    assert r.cached_read(0, 0, 4) == b"\0" * 4
    r.write_through(0, 0, b"new!")
    assert r.cached_read(0, 0, 4) == b"new!"


def test_staleness_and_invalidate():
    r = region()
    r.cached_read(0, 0, 8)
    r.write_through(1, 0, b"fresh...")
    assert r.cached_read(0, 0, 8) == b"\0" * 8       # stale
    r.invalidate(0, 0, 8)
    assert r.cached_read(0, 0, 8) == b"fresh..."
    r.invalidate(2, 0, 4096)                          # empty cache, no-op


def test_fresh_read_charges_one_read_per_line():
    r = region()
    r.fresh_read(0, 64, 64)
    assert r.counters[0].backing_reads == 1
    assert r.charged_ns(0) == 250
    r.fresh_read(0, 60, 8)
    assert r.counters[0].backing_reads == 3


def test_bounds():
    r = region(128)
    with pytest.raises(OutOfBounds):
        r.cached_read(0, 120, 16)
    with pytest.raises(OutOfBounds):
        r.write_through(0, -1, b"x")
    with pytest.raises(ValueError):
        SharedRegion(100)


def random_ops(seed, n, hosts=3, size=1024):
    rng = random.Random(seed)
    for _ in range(n):
        op = rng.choice(("cached_read", "cached_write", "publish", "invalidate",
                         "write_through", "fresh_read"))
        h = rng.randrange(hosts)
        length = rng.randint(1, 100)
        addr = rng.randrange(0, size - length)
        if op in ("cached_write", "write_through"):
            yield op, h, addr, bytes(rng.randrange(256) for _ in range(length))
        else:
            yield op, h, addr, length


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_replay_oracle_matches(seed):
    r = region(1024)
    o = CoherenceOracle(1024)
    for i, (op, h, addr, arg) in enumerate(random_ops(seed, 10_000)):
        got = getattr(r, op)(h, addr, arg)
        want = getattr(o, op)(h, addr, arg)
        assert got == want, (i, op, h, addr)
        if i % 500 == 0:
            assert r.peek(0, 1024) == bytes(o.mem)
    assert r.peek(0, 1024) == bytes(o.mem)


def test_store_hook_sees_every_backing_mutation():
    """Each backing-store mutation is attributable to a write_through or a
    publish of a line the host had written; cached_write alone never stores."""
    r = region(1024)
    stores = []
    r.store_hook = lambda host, line, off, data: stores.append((host, line))
    r.cached_write(0, 0, b"a" * 70)
    assert stores == []
    r.publish(0, 0, 70)
    assert stores == [(0, 0), (0, 1)]
    r.write_through(2, 500, b"z")
    assert stores[-1] == (2, 500 // 64)


def test_stale_iff_no_invalidate():
    rng = random.Random(7)
    for _ in range(300):
        r = region(256)
        addr = rng.randrange(0, 200)
        r.cached_read(0, addr, 8)
        new = bytes(rng.randrange(1, 256) for _ in range(8))
        r.write_through(1, addr, new)
        intervened = rng.random() < 0.5
        if intervened:
            r.invalidate(0, addr, 8)
        seen = r.cached_read(0, addr, 8)
        assert (seen == new) == intervened


# -- allocator -------------------------------------------------------------------

def test_alloc_examples():
    a = PoolAllocator({0: 4096, SHARED: 8192})
    x = a.alloc(SHARED, 64, 64)
    y = a.alloc(SHARED, 64, 64)
    assert x % 64 == 0 and y % 64 == 0 and abs(x - y) >= 64
    with pytest.raises(OutOfPoolMemory):
        a.alloc(0, 4097)


def test_allocator_interval_oracle():
    rng = random.Random(11)
    a = PoolAllocator({0: 16384, 1: 16384, SHARED: 65536})
    live = {}
    for _ in range(1000):
        if live and rng.random() < 0.45:
            addr = rng.choice(sorted(live))
            a.free(addr)
            del live[addr]
            continue
        owner = rng.choice([0, 1, SHARED])
        size = rng.randint(1, 2000)
        align = rng.choice([8, 64, 256, 4096])
        try:
            addr = a.alloc(owner, size, align)
        except OutOfPoolMemory:
            continue
        assert addr % align == 0
        lo, hi = a.segment_bounds(owner)
        assert lo <= addr and addr + size <= hi
        for other, (osize, _) in live.items():
            assert addr + size <= other or other + osize <= addr
        live[addr] = (size, owner)
    for addr, (size, owner) in live.items():
        assert a.owner_of(addr) == owner


def test_carve_segment_takes_the_shared_tail():
    a = PoolAllocator({0: 1024, SHARED: 4096})
    _, end = a.segment_bounds(SHARED)
    start = a.carve_segment(5, 1024)
    assert (start, start + 1024) == (end - 1024, end)
    assert a.segment_bounds(SHARED)[1] == start
    assert a.owner_of(a.alloc(5, 64)) == 5
