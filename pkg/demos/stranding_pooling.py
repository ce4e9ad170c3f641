"""How much SSD and NIC capacity is stranded as the pooling group grows.

Run with ``python3 demos/stranding_pooling.py``.
"""
from cxlpool.stranding import StrandingScenario, compare_pooling

cmp = compare_pooling(StrandingScenario(), group_sizes=(1, 2, 4, 8), seeds=20)

print(f"{'N':>3} {'resource':>8} {'simulated':>10} {'sqrt law':>9}")
for row in cmp.rows():
    if row.resource in ("ssd", "nic"):
        print(f"{row.n:3d} {row.resource:>8} {row.mean_stranded:10.3f} "
              f"{row.analytic_sqrt_prediction:9.3f}")

# packing is not independent across hosts, so the simulated curve need not
# follow the square-root law; what should hold is that pooling never hurts
for r in ("ssd", "nic"):
    print(r, "non-increasing:", cmp.mean_non_increasing(r),
          "| seeds worse than unpooled:", cmp.seed_violations(r))
