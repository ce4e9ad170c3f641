import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cxlpool.errors import DomainError, EmptyCatalog, ValidationError
from cxlpool.stranding import (HostShape, StrandingScenario, VmType, analytic_pooled_stranding,
                               compare_pooling, pack_sequence, pack_until_saturation)

from oracles import first_fit_replay

RES = ("cores", "mem", "ssd", "nic")


def test_analytic_examples():
    assert analytic_pooled_stranding(0.54, 8) == pytest.approx(0.1909, abs=1e-4)
    assert analytic_pooled_stranding(0.29, 8) == pytest.approx(0.1025, abs=1e-4)
    assert analytic_pooled_stranding(0.37, 1) == 0.37


@pytest.mark.parametrize("bad", [(1.2, 4), (-0.1, 4), (0.5, 0), (0.5, 2.5), (float("nan"), 2)])
def test_analytic_domain(bad):
    with pytest.raises(DomainError):
        analytic_pooled_stranding(*bad)


@given(st.floats(0, 1), st.integers(1, 1000), st.floats(0, 1))
def test_analytic_properties(s, n, c):
    assert analytic_pooled_stranding(s, n + 1) <= analytic_pooled_stranding(s, n)
    assert analytic_pooled_stranding(c * s, n) == pytest.approx(c * analytic_pooled_stranding(s, n))


def test_perfect_packing():
    sc = StrandingScenario(HostShape(64, 512, 4000, 100), host_count=8,
                           vm_catalog=(VmType(16, 128, 1000, 25, 1.0),))
    r = pack_until_saturation(sc)
    assert all(v == 0 for v in r.stranded.values())
    assert r.placed == 32


def test_memory_heavy_strands_ssd_and_nic():
    sc = StrandingScenario(HostShape(64, 512, 4000, 100), host_count=8,
                           vm_catalog=(VmType(2, 128, 200, 5, 0.5), VmType(1, 64, 100, 2, 0.5)))
    r = pack_until_saturation(sc, seed=0)
    assert r.stranded["mem"] == pytest.approx(0, abs=1e-9)
    assert r.stranded["ssd"] > 0 and r.stranded["nic"] > 0


def test_accounting_identity():
    sc = StrandingScenario(host_count=16, pool_group_size=4)
    rng = np.random.default_rng(1)
    draws = rng.integers(0, 4, size=500)
    res, placements = pack_sequence(sc, draws)
    cap = sc.host_shape.capacity() * sc.host_count
    used = sum(sc.vm_catalog[t].demand() for t, h in zip(draws, placements) if h is not None)
    for i, r in enumerate(RES):
        assert res.stranded[r] == pytest.approx((cap[i] - used[i]) / cap[i])
        assert 0 <= res.stranded[r] <= 1


SMALL_TYPES = [VmType(3, 10, 6, 2), VmType(1, 4, 9, 5), VmType(2, 2, 2, 2)]


def test_brute_force_first_fit_replay():
    shape = HostShape(4, 16, 12, 6)
    cap = list(shape.capacity())
    checked = 0
    for types in itertools.combinations(range(3), 2):
        catalog = tuple(replace(SMALL_TYPES[t], weight=0.5) for t in types)
        demands = [list(vm.demand()) for vm in catalog]
        for n_hosts, group, pooled in ((1, 1, ("ssd",)), (2, 1, ("ssd", "nic")),
                                       (2, 2, ("ssd",)), (2, 2, ("ssd", "nic"))):
            sc = StrandingScenario(shape, n_hosts, group, pooled, catalog)
            pooled_idx = {RES.index(r) for r in pooled} if group > 1 else set()
            for length in range(1, 7):
                for draws in itertools.product(range(2), repeat=length):
                    want, used = first_fit_replay([cap] * n_hosts, group, pooled_idx, demands, draws)
                    res, got = pack_sequence(sc, draws)
                    assert got == want, (types, n_hosts, group, draws)
                    for i, r in enumerate(RES):
                        total = cap[i] * n_hosts
                        assert res.stranded[r] == pytest.approx((total - used[i]) / total)
                    checked += 1
    assert checked > 1000


def test_validation():
    with pytest.raises(EmptyCatalog):
        StrandingScenario(vm_catalog=()).validate()
    with pytest.raises(ValidationError) as exc:
        StrandingScenario(host_count=10, pool_group_size=4, pooled_resources=()).validate()
    text = str(exc.value)
    assert "divisible" in text and "nonempty" in text
    with pytest.raises(ValidationError):
        StrandingScenario(pooled_resources=("cores",)).validate()
    with pytest.raises(ValidationError):
        StrandingScenario(vm_catalog=(VmType(1, 1, 1, 1, 0.7),)).validate()


def test_pooling_comparison_shape():
    cmp = compare_pooling(StrandingScenario(host_count=32), (2, 4), seeds=3)
    assert cmp.group_sizes == (1, 2, 4)
    rows = cmp.rows()
    assert len(rows) == 3 * 4
    base = {r.resource: r.mean_stranded for r in rows if r.n == 1}
    for r in rows:
        if r.resource in ("ssd", "nic"):
            assert r.analytic_sqrt_prediction == analytic_pooled_stranding(base[r.resource], r.n)
        else:
            assert r.analytic_sqrt_prediction is None


def test_best_fit_also_runs():
    sc = StrandingScenario(host_count=16, placement="best_fit")
    r = pack_until_saturation(sc, seed=0)
    assert r.placed > 0 and all(0 <= v <= 1 for v in r.stranded.values())


def test_seeded_runs_repeat():
    sc = StrandingScenario(host_count=32, pool_group_size=4)
    a = pack_until_saturation(sc, seed=12)
    b = pack_until_saturation(sc, seed=12)
    assert a.stranded == b.stranded and a.placed == b.placed
    assert math.isclose(sum(vm.weight for vm in sc.vm_catalog), 1.0)
