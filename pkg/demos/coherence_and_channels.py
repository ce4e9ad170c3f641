"""Walk through the non-coherent pool, then send messages over a ring.

Run with ``python3 demos/coherence_and_channels.py``.
"""
import numpy as np

from cxlpool.channel import channel_create, ping_pong
from cxlpool.shmem import SHARED, PoolAllocator, SharedRegion
from cxlpool.topology import LatencyParams

# %% A write that stays in host 0's cache is invisible to host 1
region = SharedRegion(4096)
region.cached_write(0, 0, b"hello")
print("host 1 before publish:", region.fresh_read(1, 0, 5))
region.publish(0, 0, 5)
print("host 1 after publish: ", region.fresh_read(1, 0, 5))

# %% Host 1 keeps its stale copy until it invalidates
region.cached_read(1, 64, 4)
region.write_through(0, 64, b"new!")
print("stale read:", region.cached_read(1, 64, 4))
region.invalidate(1, 64, 4)
print("after invalidate:", region.cached_read(1, 64, 4))

# %% One ring, one message
alloc = PoolAllocator({SHARED: region.size_bytes})
tx, rx = channel_create(region, alloc, 8, sender_host=0, receiver_host=1)
tx.send(b"ping")
print("received:", rx.try_recv())

# %% Ping-pong latency, with and without polling slack
for poll in (100.0, 0.0):
    d = ping_pong(2000, LatencyParams(poll_interval_ns=poll), seed=0)
    p = d.percentiles()
    print(f"poll {poll:5.0f} ns: p10 {p[10]:.0f}  p50 {p[50]:.0f}  p99 {p[99]:.0f} ns,"
          f" floor {np.min(d.samples):.0f}")
