import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exitdvfs import devmodel as dm
from exitdvfs.devmodel import CostTable, DeviceProfile, DomainError, FrequencyPair, LayerCost
from exitdvfs.profiler import (
    InfeasibleError,
    ProfileCache,
    Schedule,
    SearchConfig,
    SearchGuardError,
    brute_force,
    cds_search,
    evaluate_schedule,
    format_cache,
    load_schedule,
    max_frequency_latency,
    parse_schedule,
    random_search,
    save_schedule,
)

XAVIER, EFF = dm.calibrated_scenario("xavier-nx")


def small_instance(seed, overhead=0.0, n_layers=3):
    rng = np.random.default_rng(seed)
    prof = DeviceProfile("grid4x3", (0.1, 0.4), (0.1, 0.3), static_power=rng.uniform(0.1, 2.0),
                         cpu_power_coeff=rng.uniform(1, 30), gpu_power_coeff=rng.uniform(1, 30),
                         switch_overhead=overhead)
    layers = [LayerCost(i, rng.uniform(0.01, 1.0), rng.uniform(0.01, 1.0)) for i in range(n_layers)]
    return prof, CostTable("rand", layers, (n_layers,))


def test_empty_schedule_costs_nothing():
    assert evaluate_schedule(Schedule(()), EFF, XAVIER) == (0.0, 0.0)


def test_uniform_schedule_has_no_switching():
    fp = XAVIER.max_pair
    e, lat = evaluate_schedule(Schedule.uniform(fp, 4), EFF, XAVIER)
    assert lat == pytest.approx(sum(dm.layer_latency(XAVIER, c, fp) for c in EFF.layers[:4]))
    assert e == pytest.approx(sum(dm.layer_energy(XAVIER, c, fp) for c in EFF.layers[:4]))


def test_alternating_schedule_pays_three_switches():
    a, b = XAVIER.max_pair, XAVIER.min_pair
    sched = Schedule((a, b, a, b))
    _, lat = evaluate_schedule(sched, EFF, XAVIER)
    base = sum(dm.layer_latency(XAVIER, c, fp) for c, fp in zip(EFF.layers, sched.pairs))
    assert sched.switches == 3
    assert lat == pytest.approx(base + 3 * XAVIER.switch_overhead)


def test_schedule_longer_than_table_rejected():
    with pytest.raises(DomainError):
        evaluate_schedule(Schedule.uniform(XAVIER.max_pair, 17), EFF, XAVIER)


def test_single_pair_grid():
    prof = DeviceProfile("one", (0.5, 0.5), (0.3, 0.3), static_power=1.0)
    table = CostTable("t", [LayerCost(0, 1.0, 1.0)], (1,))
    res = cds_search(1, table, prof, SearchConfig(objective="energy"))
    assert res.schedule.pairs == (FrequencyPair(0.5, 0.3),)


@pytest.mark.parametrize("seed", range(5))
def test_cds_matches_brute_force_when_separable(seed):
    prof, table = small_instance(seed)
    cds = cds_search(3, table, prof, SearchConfig(rounds=1, candidates=12, objective="energy", seed=seed))
    assert cds.energy == brute_force(3, table, prof).energy


def test_cds_under_budget_beats_all_max():
    cfg = SearchConfig(latency_budget=30.0)
    res = cds_search(9, EFF, XAVIER, cfg)
    e_max, _ = evaluate_schedule(Schedule.uniform(XAVIER.max_pair, 9), EFF, XAVIER)
    assert res.latency <= 30.0
    assert res.energy <= e_max


def test_default_budget_is_slack_over_all_max():
    res = cds_search(6, EFF, XAVIER)
    assert res.latency_budget == pytest.approx(1.15 * max_frequency_latency(XAVIER, EFF, 6))
    assert res.latency <= res.latency_budget


def test_unreachable_budget_raises():
    with pytest.raises(InfeasibleError, match="tightest layer"):
        cds_search(9, EFF, XAVIER, SearchConfig(latency_budget=1.0))


def test_evaluation_count_is_cache_misses():
    cache = ProfileCache()
    cfg = SearchConfig(rounds=2, candidates=5)
    res = cds_search(5, EFF, XAVIER, cfg, cache)
    assert res.evaluations == cache.evaluations == len(cache)
    assert res.evaluations <= cfg.eval_budget(5) + 2
    again = cds_search(5, EFF, XAVIER, cfg, cache)
    assert again.evaluations == 0 and again.energy == res.energy


def test_cds_history_non_increasing():
    res = cds_search(9, EFF, XAVIER, SearchConfig(rounds=3, candidates=6, objective="energy"))
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))


def test_cache_returns_identical_numbers():
    cache = ProfileCache()
    s = Schedule((XAVIER.max_pair, XAVIER.mid_pair))
    first = evaluate_schedule(s, EFF, XAVIER, cache)
    assert evaluate_schedule(s, EFF, XAVIER, cache) == first
    assert (cache.evaluations, cache.hits) == (1, 1)


def test_random_search_budget_one_returns_its_sample():
    res = random_search(4, EFF, XAVIER, budget=1, seed=5)
    assert res.evaluations == 1
    assert evaluate_schedule(res.schedule, EFF, XAVIER) == (res.energy, res.latency)


def test_random_search_deterministic():
    a = random_search(6, EFF, XAVIER, budget=50, seed=11)
    b = random_search(6, EFF, XAVIER, budget=50, seed=11)
    assert a.schedule == b.schedule and a.energy == b.energy


def test_brute_force_two_pairs():
    # cpu-only work w=1: 10 ms at 0.1 GHz, 5 ms at 0.2 GHz; powers 300 W and 400 W give 3 J and 2 J
    a_c = 100.0 / 0.007
    prof = DeviceProfile("two", (0.1, 0.2), (0.1, 0.1), static_power=300.0 - 0.001 * a_c,
                         cpu_power_coeff=a_c, switch_overhead=0.0)
    table = CostTable("t", [LayerCost(0, 1.0, 0.0)], (1,))
    energies = [evaluate_schedule(Schedule((fp,)), table, prof)[0] for fp in prof.pairs]
    assert energies == pytest.approx([3.0, 2.0])
    res = brute_force(1, table, prof)
    assert res.schedule.pairs == (FrequencyPair(0.2, 0.1),)
    assert res.energy == pytest.approx(2.0)


def test_brute_force_tie_goes_to_lowest_frequency_sum():
    prof = DeviceProfile("flat", (0.1, 0.4), (0.1, 0.3), static_power=5.0, switch_overhead=0.0)
    table = CostTable("t", [LayerCost(0, 0.0, 0.0)], (1,))
    res = brute_force(1, table, prof)
    assert res.energy == 0.0
    assert res.schedule.pairs == (FrequencyPair(0.1, 0.1),)


@pytest.mark.parametrize("seed", range(5))
def test_brute_force_dominates_cds(seed):
    prof, table = small_instance(seed, overhead=0.3)
    bf = brute_force(3, table, prof)
    cds = cds_search(3, table, prof, SearchConfig(rounds=2, candidates=4, objective="energy", seed=seed))
    assert bf.energy <= cds.energy


def test_brute_force_guard():
    with pytest.raises(SearchGuardError):
        brute_force(9, EFF, XAVIER)


def test_schedule_file_roundtrip(tmp_path):
    res = cds_search(6, EFF, XAVIER)
    path = tmp_path / "s.csv"
    save_schedule(res.schedule, path)
    assert load_schedule(path) == res.schedule
    with pytest.raises(ValueError):
        parse_schedule("layer_index,cpu_freq,gpu_freq\n1,abc,0.5\n")


def test_cache_dump_lists_every_entry():
    cache = ProfileCache()
    cds_search(3, EFF, XAVIER, SearchConfig(rounds=1, candidates=4), cache)
    lines = format_cache(cache, XAVIER).splitlines()
    assert lines[0] == "exit_point,schedule_hash,energy_j,latency_ms"
    assert len(lines) == len(cache) + 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 9), st.integers(1, 12), st.integers(1, 3))
def test_cds_respects_budget(seed, exit_point, n, rounds):
    res = cds_search(exit_point, EFF, XAVIER, SearchConfig(rounds=rounds, candidates=n, seed=seed))
    assert res.latency <= res.latency_budget
    assert evaluate_schedule(res.schedule, EFF, XAVIER) == (res.energy, res.latency)
