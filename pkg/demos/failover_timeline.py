"""A NIC fails under load and its users move to the remaining devices.

Run with ``python3 demos/failover_timeline.py``.
"""
from cxlpool.controlplane import ControlPlane, demo_topology, demo_workloads

MS = 1e6

plane = ControlPlane(demo_topology(), demo_workloads(), seed=0)
plane.fail_device_at(0, 20.5 * MS)
report = plane.run(40 * MS)

for ev in report.timeline:
    if ev.event != "assigned":
        print(f"{ev.time / MS:9.4f} ms  {ev.event:18s} {ev.workload:5s} {ev.device}")

print()
print(f"submitted {report.submitted}, completed {report.completed}, cancelled {report.cancelled}")
print("conserved:", report.conserved, "| invariant violations:", len(report.violations))
print("final assignments:", dict(sorted(plane.state.assignments.items())))
