import csv
import io

import pytest

from kmig.bench import (
    CSV_COLUMNS,
    SWEEP_KS,
    CostModel,
    ScenarioSpec,
    WorkloadSpec,
    check_sweep,
    oracle_count,
    overhead_report,
    run_cell,
    sweep,
)
from kmig.errors import ConfigError
from kmig.kernel import GuestSpec
from kmig.memory import Region
from kmig.migration import MigrationReport
from kmig.profile import ObjectKind
from oracles import pages_touched

GUEST = GuestSpec(num_files=120, num_processes=3, seed=2)


def spec(**kw):
    return ScenarioSpec(GUEST, **kw)


def test_baseline_has_no_events():
    row = run_cell(spec(mode="off", cost=CostModel(500, 2))).row
    assert row.events_total == 0 and row.modeled_time == 500


def test_more_monitored_objects_never_fewer_events():
    small = run_cell(spec(k=10, mode="in-place"), 1).row
    large = run_cell(spec(k=120, mode="in-place"), 1).row
    assert large.events_total >= small.events_total


def test_migrated_has_no_false_triggers_and_exact_cost():
    cell = run_cell(spec(k=50, mode="migrated", cost=CostModel(10, 3)))
    assert cell.row.events_false == 0 and cell.oracle_events == cell.row.events_total
    assert cell.row.modeled_time == 10 + 3 * cell.row.events_total
    assert cell.row.protected_pages == 2


def test_oracle_edge_cases():
    trace = [(0x1000, 8, 0, 1), (0x1FFC, 8, 1, 1), (0x5000, 0, 0, 1)]
    assert oracle_count(trace, {}) == 0
    everything = {p: (True, True) for p in range(16)}
    assert oracle_count(trace, everything) == sum(len(pages_touched(a, n)) for a, n, _, _ in trace) == 3


def test_overhead_report():
    area = Region(0x400000, 128 * 1024)
    reports = [MigrationReport(0, 0, ObjectKind.DENTRY) for _ in range(400)]
    assert overhead_report(area, reports) == {
        "pages_used": 13,
        "bytes_used": 51200,
        "area_pages": 32,
        "area_bytes": 131072,
    }
    assert overhead_report(area, [])["bytes_used"] == 0


def test_bad_specs():
    with pytest.raises(ConfigError):
        spec(mode="sometimes")
    with pytest.raises(ConfigError):
        spec(k=121)
    with pytest.raises(ConfigError):
        WorkloadSpec(distribution="zipf")
    with pytest.raises(ConfigError):
        ScenarioSpec.from_dict({"num_files": 5, "workload": {"bogus": 1}})


def test_spec_roundtrip():
    s = spec(k=7, mode="in-place", workload=WorkloadSpec(distribution="owner", cross_share=0.3))
    assert ScenarioSpec.from_dict(s.to_dict()) == s


def test_small_sweep_shape_determinism_and_csv():
    ks = [10, 60, 120]
    a = sweep(spec(), ks, repeats=2)
    b = sweep(spec(), ks, repeats=2, workers=2)
    assert a.rows == b.rows
    assert len(a.rows) == 2 * len(ks) + 1
    assert check_sweep(a) == []
    rows = list(csv.reader(io.StringIO(a.to_csv())))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 1 + len(a.cells) + len(a.rows)
    assert rows[-1][2] == "mean"


def test_owner_distribution_keeps_residual_cross_access():
    owner = spec(k=60, mode="migrated", workload=WorkloadSpec(distribution="owner", cross_share=0.0))
    assert run_cell(owner).row.events_false == 0


def test_sweep_counts():
    assert SWEEP_KS == (10, 50, 100, 150, 200, 250, 300, 350, 400)
