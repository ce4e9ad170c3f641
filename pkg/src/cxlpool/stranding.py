"""Resource stranding: the square-root pooling law and a packing simulator.

Hosts are filled with VMs drawn from a catalog until nothing more fits. The
capacity left unused at that point is stranded. Pooling a resource across a
group of N hosts lets a VM use that resource anywhere in its group while its
cores and memory still come from a single host.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, EmptyCatalog, ValidationError

RESOURCES = ("cores", "mem", "ssd", "nic")
POOLABLE = ("ssd", "nic")
PLACEMENT_POLICIES = ("first_fit", "best_fit")
_BATCH = 512


def analytic_pooled_stranding(s0: float, n: int) -> float:
    """Stranded fraction after pooling across ``n`` hosts, if host demands were
    independent: the spread of the total grows as sqrt(n), the capacity as n."""
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
        raise DomainError(f"group size must be an integer >= 1, got {n!r}")
    if not (0.0 <= s0 <= 1.0) or math.isnan(s0):
        raise DomainError(f"stranded fraction must lie in [0, 1], got {s0!r}")
    return s0 / math.sqrt(n)


@dataclass(frozen=True)
class VmType:
    cores: float
    mem_gb: float
    ssd_gb: float
    nic_gbps: float
    weight: float = 1.0
    name: str = ""

    def demand(self) -> np.ndarray:
        return np.array([self.cores, self.mem_gb, self.ssd_gb, self.nic_gbps], dtype=float)


@dataclass(frozen=True)
class HostShape:
    cores: float = 64
    mem_gb: float = 512
    ssd_gb: float = 4000
    nic_gbps: float = 100

    def capacity(self) -> np.ndarray:
        return np.array([self.cores, self.mem_gb, self.ssd_gb, self.nic_gbps], dtype=float)


def default_catalog() -> tuple[VmType, ...]:
    """One compute-, memory-, storage- and network-heavy VM type, equal weights."""
    return (
        VmType(16, 64, 400, 10, 0.25, "compute"),
        VmType(4, 128, 400, 10, 0.25, "memory"),
        VmType(4, 32, 1600, 10, 0.25, "storage"),
        VmType(4, 32, 400, 40, 0.25, "network"),
    )


@dataclass(frozen=True)
class StrandingScenario:
    host_shape: HostShape = HostShape()
    host_count: int = 128
    pool_group_size: int = 1
    pooled_resources: tuple[str, ...] = POOLABLE
    vm_catalog: tuple[VmType, ...] = field(default_factory=default_catalog)
    seed: int = 0
    placement: str = "first_fit"

    def violations(self) -> list[str]:
        out = []
        if self.host_count < 1:
            out.append(f"host_count must be >= 1, got {self.host_count}")
        if self.pool_group_size < 1:
            out.append(f"pool_group_size must be >= 1, got {self.pool_group_size}")
        elif self.host_count >= 1 and self.host_count % self.pool_group_size:
            out.append(f"host_count {self.host_count} not divisible by group size {self.pool_group_size}")
        bad = [r for r in self.pooled_resources if r not in POOLABLE]
        if bad:
            out.append(f"only {POOLABLE} can be pooled, got {bad}")
        if not self.pooled_resources:
            out.append("pooled_resources must be nonempty")
        if self.placement not in PLACEMENT_POLICIES:
            out.append(f"placement must be one of {PLACEMENT_POLICIES}")
        if any(c < 0 for c in self.host_shape.capacity()):
            out.append("host shape has a negative capacity")
        for i, vm in enumerate(self.vm_catalog):
            if any(d < 0 for d in vm.demand()) or vm.weight < 0:
                out.append(f"vm type {i} ({vm.name}) has a negative demand or weight")
        if self.vm_catalog:
            total = sum(vm.weight for vm in self.vm_catalog)
            if not math.isclose(total, 1.0, abs_tol=1e-9):
                out.append(f"catalog weights sum to {total}, not 1")
        return out

    def validate(self):
        if not self.vm_catalog:
            raise EmptyCatalog("the VM catalog is empty")
        v = self.violations()
        if v:
            raise ValidationError(v)
        return self


@dataclass
class StrandingResult:
    stranded: dict[str, float]
    placed: float
    samples: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    rejected: int = 0

    def stddev(self, resource: str) -> float:
        s = self.samples.get(resource)
        return float(np.std(s, ddof=1)) if s is not None and len(s) > 1 else 0.0


class _Packer:
    """Mutable packing state for one scenario."""

    def __init__(self, scenario: StrandingScenario):
        sc = scenario
        self.sc = sc
        self.cap = sc.host_shape.capacity()
        h, n = sc.host_count, sc.pool_group_size
        self.free = np.tile(self.cap, (h, 1))
        self.pooled = np.array([r in sc.pooled_resources for r in RESOURCES])
        self.local = ~self.pooled
        # pooled capacity is tracked per group; per-host columns for pooled
        # resources are unused
        self.group_of = np.arange(h) // n
        self.group_free = np.tile(self.cap * self.pooled * n, (h // n, 1))
        self.demands = np.array([vm.demand() for vm in sc.vm_catalog])
        self.used = np.zeros(4)
        self.placed = 0
        self.rejected = 0
        self.placements: list[int | None] = []

    def fits(self, d: np.ndarray) -> np.ndarray:
        ok = np.all(self.free[:, self.local] >= d[self.local], axis=1)
        gok = np.all(self.group_free[:, self.pooled] >= d[self.pooled], axis=1)
        return ok & gok[self.group_of]

    def choose(self, d, mask) -> int | None:
        idx = np.flatnonzero(mask)
        if not len(idx):
            return None
        if self.sc.placement == "first_fit":
            return int(idx[0])
        # best fit: least normalised leftover in the host's own dimensions
        left = (self.free[idx][:, self.local] - d[self.local]) / np.where(
            self.cap[self.local] > 0, self.cap[self.local], 1)
        return int(idx[np.argmin(left.sum(axis=1))])

    def place(self, t: int) -> int | None:
        d = self.demands[t]
        h = self.choose(d, self.fits(d))
        self.placements.append(h)
        if h is None:
            self.rejected += 1
            return None
        self.free[h, self.local] -= d[self.local]
        self.group_free[self.group_of[h], self.pooled] -= d[self.pooled]
        self.used += d
        self.placed += 1
        return h

    def alive(self, weights) -> bool:
        return any(w > 0 and self.fits(d).any() for d, w in zip(self.demands, weights))

    def result(self) -> StrandingResult:
        total = self.cap * self.sc.host_count
        unused = total - self.used
        frac = {r: (float(unused[i] / total[i]) if total[i] > 0 else 0.0)
                for i, r in enumerate(RESOURCES)}
        frac = {r: min(1.0, max(0.0, v)) for r, v in frac.items()}
        return StrandingResult(frac, self.placed, {r: np.array([v]) for r, v in frac.items()},
                               self.rejected)


def pack_sequence(scenario: StrandingScenario, draws) -> tuple[StrandingResult, list]:
    """Place the VM types in ``draws`` in order; ones that do not fit are skipped.

    Returns the result and, per draw, the host it landed on (or None).
    """
    scenario.validate()
    p = _Packer(scenario)
    for t in draws:
        p.place(int(t))
    return p.result(), p.placements


def pack_until_saturation(scenario: StrandingScenario, seed: int | None = None) -> StrandingResult:
    """Draw VMs i.i.d. from the catalog until no catalog type fits anywhere."""
    scenario.validate()
    rng = np.random.default_rng(scenario.seed if seed is None else seed)
    p = _Packer(scenario)
    weights = np.array([vm.weight for vm in scenario.vm_catalog], dtype=float)
    probs = weights / weights.sum()
    dead = weights <= 0
    while not dead.all():
        for t in rng.choice(len(weights), size=_BATCH, p=probs):
            if dead[t]:
                continue
            if p.place(int(t)) is None:
                # capacity only shrinks, so a type that fails never fits again
                dead[t] = True
                if dead.all():
                    break
    return p.result()


def run_seeds(scenario: StrandingScenario, seeds) -> StrandingResult:
    runs = [pack_until_saturation(scenario, s) for s in seeds]
    samples = {r: np.array([x.stranded[r] for x in runs]) for r in RESOURCES}
    return StrandingResult({r: float(samples[r].mean()) for r in RESOURCES},
                           float(np.mean([x.placed for x in runs])), samples,
                           sum(x.rejected for x in runs))


@dataclass
class PoolingRow:
    n: int
    resource: str
    mean_stranded: float
    stddev: float
    analytic_sqrt_prediction: float | None


@dataclass
class PoolingComparison:
    group_sizes: tuple[int, ...]
    results: dict[int, StrandingResult]
    pooled_resources: tuple[str, ...]

    def rows(self) -> list[PoolingRow]:
        base = self.results[1]
        out = []
        for n in self.group_sizes:
            res = self.results[n]
            for r in RESOURCES:
                pred = (analytic_pooled_stranding(base.stranded[r], n)
                        if r in self.pooled_resources else None)
                out.append(PoolingRow(n, r, res.stranded[r], res.stddev(r), pred))
        return out

    def seed_violations(self, resource: str) -> int:
        """Seeds where pooling at some N > 1 stranded more than the unpooled run."""
        base = self.results[1].samples[resource]
        worse = np.zeros(len(base), dtype=bool)
        for n in self.group_sizes:
            if n > 1:
                worse |= self.results[n].samples[resource] > base + 1e-12
        return int(worse.sum())

    def monotone_violations(self, resource: str) -> int:
        """Seeds whose own stranding rises somewhere along increasing N."""
        sizes = sorted(self.group_sizes)
        runs = np.array([self.results[n].samples[resource] for n in sizes])
        return int(np.any(runs[1:] > runs[:-1] + 1e-12, axis=0).sum())

    def mean_non_increasing(self, resource: str) -> bool:
        means = [self.results[n].stranded[resource] for n in sorted(self.group_sizes)]
        return all(b <= a + 1e-12 for a, b in zip(means, means[1:]))


def compare_pooling(scenario: StrandingScenario, group_sizes=(1, 2, 4, 8),
                    seeds: int = 20) -> PoolingComparison:
    """Run every group size on the same seeds; N = 1 is always included as baseline."""
    sizes = tuple(sorted(set(group_sizes) | {1}))
    seed_list = [scenario.seed + i for i in range(seeds)]
    results = {n: run_seeds(replace(scenario, pool_group_size=n), seed_list) for n in sizes}
    return PoolingComparison(sizes, results, tuple(scenario.pooled_resources))
