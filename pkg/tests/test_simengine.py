import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exitdvfs import devmodel as dm
from exitdvfs.exitnet import FULL, ExitNetConfig, ExitNetModel
from exitdvfs.profiler import Schedule, SearchConfig
from exitdvfs.scenario import synthetic_trace
from exitdvfs.simengine import (
    ConfigurationError,
    GovernorPolicy,
    SimReport,
    Variant,
    ablation,
    ablation_reports,
    compare,
    simulate,
)
from exitdvfs.tracegen import FrameTrace

XAVIER, EFF = dm.calibrated_scenario("xavier-nx")
AGX, AGX_EFF = dm.calibrated_scenario("agx-orin")
UNTRAINED = ExitNetModel.initialize(ExitNetConfig())


def test_empty_trace_report():
    rep = simulate(FrameTrace([], 4, 20), XAVIER, EFF, UNTRAINED, GovernorPolicy(Variant.E4))
    assert (rep.windows, rep.total_energy, rep.mean_latency, rep.mean_power) == (0, 0.0, 0.0, 0.0)
    assert sum(rep.exit_histogram.values()) == 0


def test_baseline_max_full_latency_matches_anchor():
    rep = simulate(synthetic_trace(10), XAVIER, EFF, None, GovernorPolicy(Variant.BASELINE_MAX))
    assert rep.exit_histogram[FULL] == 10
    assert rep.mean_latency == pytest.approx(30.0, rel=1e-12)
    assert rep.mean_power == pytest.approx(8.6, rel=1e-12)
    assert rep.accuracy is None and rep.evaluation_count == 0


def test_baseline_min_is_slowest():
    tr = synthetic_trace(5)
    lo = simulate(tr, XAVIER, EFF, None, GovernorPolicy(Variant.BASELINE_MIN))
    hi = simulate(tr, XAVIER, EFF, None, GovernorPolicy(Variant.BASELINE_MAX))
    assert lo.mean_latency > hi.mean_latency and lo.mean_power < hi.mean_power


@pytest.mark.parametrize("variant", [Variant.E4, Variant.EARLYEXIT_ONLY, Variant.E4_R])
def test_early_exit_policy_needs_model(variant):
    with pytest.raises(ConfigurationError):
        simulate(synthetic_trace(3), XAVIER, EFF, None, GovernorPolicy(variant))


def test_model_must_match_trace_and_table():
    with pytest.raises(ConfigurationError):
        simulate(synthetic_trace(3, window_length=10), XAVIER, EFF, UNTRAINED, GovernorPolicy(Variant.E4))
    three = ExitNetModel.initialize(ExitNetConfig(num_exits=3))
    with pytest.raises(ConfigurationError):
        simulate(synthetic_trace(3), XAVIER, EFF, three, GovernorPolicy(Variant.E4))


def test_unknown_policy_name():
    with pytest.raises(ConfigurationError, match="BASELINE_MAX"):
        GovernorPolicy("TURBO")


@pytest.mark.parametrize("variant", list(Variant))
def test_report_invariants(variant):
    tr = synthetic_trace(25, seed=4)
    rep = simulate(tr, XAVIER, EFF, UNTRAINED, GovernorPolicy(variant), seed=3)
    assert sum(rep.exit_histogram.values()) == rep.windows == 25
    assert rep.total_energy == pytest.approx(math.fsum(r.energy_j for r in rep.records), rel=1e-9)
    busy = math.fsum(r.latency_ms for r in rep.records) / 1000
    assert rep.mean_power == pytest.approx(rep.total_energy / busy, rel=1e-12)
    assert 0.0 <= rep.accuracy <= 1.0
    assert rep.evaluation_count > 0 if GovernorPolicy(variant).uses_search else rep.evaluation_count == 0


def test_schedules_memoised_per_layer_count():
    rep = simulate(synthetic_trace(40), XAVIER, EFF, UNTRAINED, GovernorPolicy(Variant.E4))
    by_layers = {}
    for r in rep.records:
        by_layers.setdefault(r.layers, set()).add(r.schedule)
    assert all(len(s) == 1 for s in by_layers.values())


def test_deterministic_reports():
    tr = synthetic_trace(20, seed=8)
    pol = GovernorPolicy(Variant.E4_R, SearchConfig(rounds=1, candidates=4))
    a = simulate(tr, AGX, AGX_EFF, UNTRAINED, pol, seed=5)
    b = simulate(tr, AGX, AGX_EFF, UNTRAINED, pol, seed=5)
    assert a.to_json() == b.to_json()


def test_random_search_fallback_is_recorded():
    # a budget a hair above all-max latency: a handful of random draws cannot meet it
    pol = GovernorPolicy(Variant.E4_R, SearchConfig(rounds=1, candidates=1, budget_factor=1.0001))
    rep = simulate(synthetic_trace(5), XAVIER, EFF, UNTRAINED, pol)
    for r in rep.records:
        assert r.fallback
        assert r.schedule == Schedule.uniform(XAVIER.max_pair, r.layers).digest()


def test_report_json_roundtrip():
    rep = simulate(synthetic_trace(6), XAVIER, EFF, UNTRAINED, GovernorPolicy(Variant.E4), seed=2)
    back = SimReport.from_json(rep.to_json())
    assert back == rep
    lines = rep.records_csv().splitlines()
    assert lines[0].startswith("window,label,exit") and len(lines) == 7


@pytest.mark.slow
def test_e4_beats_max_clock_baseline(trained20):
    tr = synthetic_trace(300, seed=11)
    e4 = simulate(tr, AGX, AGX_EFF, trained20, GovernorPolicy(Variant.E4), seed=0)
    base = simulate(tr, AGX, AGX_EFF, trained20, GovernorPolicy(Variant.BASELINE_MAX), seed=0)
    assert e4.total_energy < base.total_energy
    assert e4.mean_latency < base.mean_latency


# -- compare / ablation -----------------------------------------------------------------------


def _fake(policy, lat, energy):
    return SimReport(policy, 0, "d", "t", 1, energy, lat / 1000, energy / (lat / 1000), lat, {}, None, 0)


def test_single_baseline_row():
    table = compare([_fake("BASELINE_MAX", 10.0, 2.0)])
    row = table.rows[0]
    assert (row.speedup, row.energy_saving) == (1.0, 0.0)


def test_halved_latency_doubles_speedup():
    table = compare([_fake("BASELINE_MAX", 10.0, 2.0), _fake("E4", 5.0, 1.5)])
    assert table.rows[1].speedup == 2.0
    assert table.rows[1].energy_saving == pytest.approx(0.25)


def test_missing_baseline():
    with pytest.raises(ConfigurationError):
        compare([_fake("E4", 5.0, 1.0)])
    with pytest.raises(ValueError):
        compare([])


def test_comparison_csv_roundtrip():
    from exitdvfs.simengine import ComparisonTable
    table = compare([_fake("BASELINE_MAX", 10.0, 2.0), _fake("E4", 5.0, 1.5)], ["neither", "both"])
    assert ComparisonTable.from_csv(table.to_csv()) == table


def test_ablation_rows_and_cross_check():
    tr = synthetic_trace(30, seed=6)
    table = ablation(tr, AGX, AGX_EFF, UNTRAINED, seed=1)
    assert [r.label for r in table.rows] == ["neither", "DVFS-only", "EE-only", "both"]
    rebuilt = compare(ablation_reports(tr, AGX, AGX_EFF, UNTRAINED, seed=1), [r.label for r in table.rows])
    assert rebuilt == table


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 1000))
def test_dvfs_only_saves_energy(seed):
    tr = synthetic_trace(10, seed=seed)
    t = ablation(tr, AGX, AGX_EFF, UNTRAINED, seed=seed)
    assert t.row("DVFS-only").energy_j < t.row("neither").energy_j
    assert t.row("DVFS-only").latency_ms > t.row("neither").latency_ms
