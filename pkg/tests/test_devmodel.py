import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exitdvfs import devmodel as dm
from exitdvfs.devmodel import (
    CalibrationAnchor,
    CalibrationError,
    CostTable,
    DeviceProfile,
    DomainError,
    FrequencyPair,
    LayerCost,
)


def toy_profile(**kw):
    base = dict(name="toy", cpu_range=(0.1, 2.0), gpu_range=(0.1, 1.5), static_power=2.0,
                cpu_power_coeff=1.0, gpu_power_coeff=1.0, power_cap=100.0)
    base.update(kw)
    return DeviceProfile(**base)


def test_zero_work_layer_has_zero_latency_and_energy():
    p = toy_profile()
    fp = FrequencyPair(1.0, 1.0)
    assert dm.layer_latency(p, LayerCost(0, 0.0, 0.0), fp) == 0.0
    assert dm.layer_energy(p, LayerCost(0, 0.0, 0.0), fp) == 0.0


def test_cpu_only_layer_latency():
    p = toy_profile()
    assert dm.layer_latency(p, LayerCost(0, 1.0, 0.0), FrequencyPair(0.5, 1.0)) == 2.0


def test_power_at_minimum_clocks():
    p = toy_profile()
    assert dm.device_power(p, FrequencyPair(0.1, 0.1)) == pytest.approx(2.002, abs=1e-12)


def test_energy_is_power_times_time():
    # P = 2 + 1 + 7 = 10 W at cpu=1.0 GHz
    p = toy_profile(gpu_power_coeff=7.0)
    fp = FrequencyPair(1.0, 1.0)
    assert dm.device_power(p, fp) == pytest.approx(10.0)
    assert dm.layer_energy(p, LayerCost(0, 1.0, 0.0), fp) == pytest.approx(0.010)


def test_energy_endpoints_follow_formula():
    p = dm.load_profile("xavier-nx")
    cost = LayerCost(0, 0.25, 1.0)
    for fp in (p.max_pair, p.min_pair):
        lat = cost.cpu_work / fp.cpu_freq + cost.gpu_work / fp.gpu_freq
        power = min(p.static_power + p.cpu_power_coeff * fp.cpu_freq**3 + p.gpu_power_coeff * fp.gpu_freq**3,
                    p.power_cap)
        assert dm.layer_energy(p, cost, fp) == pytest.approx(power * lat / 1000, rel=1e-12)


def test_off_grid_pair_rejected():
    p = toy_profile()
    with pytest.raises(DomainError):
        dm.layer_latency(p, LayerCost(0, 1, 1), FrequencyPair(0.55, 1.0))
    with pytest.raises(DomainError):
        dm.device_power(p, FrequencyPair(2.5, 1.0))


def test_profile_validation():
    with pytest.raises(DomainError):
        toy_profile(cpu_range=(0.05, 1.0))
    with pytest.raises(DomainError):
        toy_profile(gpu_range=(1.0, 0.5))
    with pytest.raises(DomainError):
        toy_profile(static_power=-1.0)
    with pytest.raises(DomainError):
        toy_profile(power_cap=1.0)


TABLE1 = {
    "jetson-nano": ((0.1, 1.4), (0.1, 0.9), 10.0),
    "jetson-tx2": ((0.1, 1.4), (0.1, 1.3), 15.0),
    "orin-nano": ((0.1, 1.5), (0.1, 0.6), 15.0),
    "agx-orin": ((0.1, 2.2), (0.1, 1.3), 60.0),
}


@pytest.mark.parametrize("name", sorted(TABLE1))
def test_shipped_profile_ranges(name):
    p = dm.load_profile(name)
    cpu, gpu, cap = TABLE1[name]
    assert (p.cpu_range, p.gpu_range, p.power_cap) == (cpu, gpu, cap)


def test_xavier_profile_admits_anchor_clock():
    p = dm.load_profile("xavier-nx")
    assert p.power_cap == 20.0
    p.pair_index(FrequencyPair(1.9, 1.1))


@pytest.mark.parametrize("name", dm.available_devices())
def test_max_power_within_cap(name):
    p = dm.load_profile(name)
    assert dm.device_power(p, p.max_pair) <= p.power_cap


def test_unknown_device_names_valid_ones():
    with pytest.raises(KeyError, match="agx-orin"):
        dm.load_profile("pdp-11")


def test_profile_json_roundtrip(tmp_path):
    p = dm.load_profile("agx-orin")
    path = tmp_path / "p.json"
    dm.save_profile(p, path)
    assert dm.load_profile(path) == p
    assert json.loads(path.read_text())["name"] == "agx-orin"


def test_cost_tables_shipped():
    eff = dm.load_cost_table("effnet-b0")
    mob = dm.load_cost_table("mobilenet-v2")
    assert (eff.depth, eff.exit_points) == (16, (3, 6, 9, 12, 16))
    assert (mob.depth, mob.exit_points) == (19, (4, 8, 12, 16, 19))


def test_cost_table_roundtrip(tmp_path):
    t = dm.load_cost_table("effnet-b0").scaled(0.123456789)
    path = tmp_path / "t.csv"
    dm.save_cost_table(t, path)
    back = dm.load_cost_table(path)
    assert back.layers == t.layers and back.exit_points == t.exit_points


# -- calibration -------------------------------------------------------------------


def test_xavier_anchor_reproduced():
    prof, table = dm.calibrated_scenario("xavier-nx")
    fp = FrequencyPair(1.9, 1.1)
    assert dm.table_latency(prof, table.layers, fp) == pytest.approx(30.0, rel=0.05)
    assert dm.device_power(prof, fp) == pytest.approx(8.6, rel=0.05)


def test_single_anchor_fit_is_exact():
    template = dm.load_profile("agx-orin")
    table = dm.load_cost_table("mobilenet-v2")
    res = dm.calibrate(template, [CalibrationAnchor(FrequencyPair(1.0, 0.7), 12.0, 20.0)], table)
    assert res.max_residual < 1e-12


def test_generate_then_fit_recovers_coefficients():
    truth = toy_profile(static_power=3.0, cpu_power_coeff=0.7, gpu_power_coeff=1.9, power_cap=50.0)
    table = CostTable("t", [LayerCost(i, 0.3, 0.9) for i in range(4)], (2, 4))
    scale = 1.7
    anchors = []
    for c, g in [(0.5, 0.5), (1.0, 0.3), (2.0, 1.5), (1.5, 1.0), (0.8, 1.2)]:
        fp = FrequencyPair(c, g)
        anchors.append(CalibrationAnchor(fp, scale * dm.table_latency(truth, table.layers, fp),
                                         dm.device_power(truth, fp)))
    template = toy_profile(static_power=1.0, cpu_power_coeff=0.1, gpu_power_coeff=0.1, power_cap=50.0)
    res = dm.calibrate(template, anchors, table)
    got = np.array([res.profile.static_power, res.profile.cpu_power_coeff, res.profile.gpu_power_coeff])
    np.testing.assert_allclose(got, [3.0, 0.7, 1.9], rtol=0.01)
    assert res.work_scale == pytest.approx(scale, rel=0.01)


def test_calibrate_rejects_bad_input():
    template = toy_profile()
    table = dm.load_cost_table("effnet-b0")
    with pytest.raises(CalibrationError):
        dm.calibrate(template, [], table)
    with pytest.raises(CalibrationError):
        dm.calibrate(template, [CalibrationAnchor(FrequencyPair(1.0, 1.0), 10.0, 500.0)], table)


# -- properties ----------------------------------------------------------------------

XAVIER = dm.load_profile("xavier-nx")
cpu_ix = st.integers(0, len(XAVIER.cpu_grid) - 1)
gpu_ix = st.integers(0, len(XAVIER.gpu_grid) - 1)


@settings(max_examples=200, deadline=None)
@given(cpu_ix, gpu_ix, cpu_ix, gpu_ix, st.floats(0, 5), st.floats(0, 5))
def test_monotone_in_clocks(c1, g1, c2, g2, wc, wg):
    lo = FrequencyPair(XAVIER.cpu_grid[min(c1, c2)], XAVIER.gpu_grid[min(g1, g2)])
    hi = FrequencyPair(XAVIER.cpu_grid[max(c1, c2)], XAVIER.gpu_grid[max(g1, g2)])
    cost = LayerCost(0, wc, wg)
    assert dm.layer_latency(XAVIER, cost, hi) <= dm.layer_latency(XAVIER, cost, lo)
    assert XAVIER.raw_power(hi) >= XAVIER.raw_power(lo)


@settings(max_examples=200, deadline=None)
@given(cpu_ix, gpu_ix, st.floats(0, 5), st.floats(0, 5))
def test_energy_nonnegative_and_zero_only_without_work(c, g, wc, wg):
    fp = FrequencyPair(XAVIER.cpu_grid[c], XAVIER.gpu_grid[g])
    e = dm.layer_energy(XAVIER, LayerCost(0, wc, wg), fp)
    assert e >= 0
    assert (e == 0) == (wc == 0 and wg == 0)


@settings(max_examples=300, deadline=None)
@given(st.floats(0.1, 1.9), st.floats(0.1, 1.1))
def test_snap_yields_grid_pair(c, g):
    fp = XAVIER.snap(c, g)
    XAVIER.pair_index(fp)
    assert math.isclose(fp.cpu_freq, c, abs_tol=0.05 + 1e-9) and math.isclose(fp.gpu_freq, g, abs_tol=0.05 + 1e-9)
