"""Energy model: closed forms, calibration, grid and report coupling."""
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from transkernel.energy import (EnergyParams, Infeasible, WorkloadProfile, ark_breakdown, break_even,
                                calibrate_dram, energy_ark, energy_little, energy_native, energy_report,
                                frange, grid_csv, little_breakdown, load_params, native_breakdown,
                                relative, whatif_grid)

P0 = EnergyParams()
CAL = calibrate_dram()
P = CAL.params


def test_idle_only_native():
    w = WorkloadProfile(0.0, 2.0)
    assert energy_native(P, w) == pytest.approx(2.0 * (80 + 1.3 + 5))


def test_busy_only_native_with_dram_zeroed():
    assert energy_native(P0, WorkloadProfile(3.0, 0.0)) == pytest.approx(3.0 * 635)


def test_algebraic_break_even_with_dram_zeroed():
    c = (630 + 5) / (6 * (17 + 5))
    w = WorkloadProfile(1.0, 0.0)
    assert energy_ark(P0, w, c) == pytest.approx(energy_native(P0, w))


def test_calibration_closed_form():
    # c clamps to zero, leaving 6 * 3.5 * (22 + bg) = 635 + bg
    assert CAL.c == 0
    assert CAL.bg == pytest.approx(173 / 20)
    assert 6 * 3.5 * (22 + CAL.bg) == pytest.approx(635 + CAL.bg)
    assert CAL.exact_c < 0
    assert CAL.residual == pytest.approx(relative(P, 5.2, 0.2) - 1)


def test_calibrated_thresholds():
    assert 0.98 <= relative(P, 3.5, 1.0) <= 1.02
    assert 0.95 <= relative(P, 5.2, 0.2) <= 1.05
    assert 0.51 <= relative(P, 2.7, 0.4) <= 0.70
    assert relative(P, 2.7, 0.4) == pytest.approx(0.6564, abs=1e-4)


@pytest.mark.parametrize("usage", [0.2, 0.4, 0.7, 1.0])
def test_baseline_like_overhead_wastes_energy(usage):
    assert relative(P, 13.9, usage) > 1


def test_big_little_ordering():
    w = WorkloadProfile.from_usage(0.4)
    assert energy_ark(P, w, 2.7) < energy_little(P, w) < energy_native(P, w)


def test_little_idle_term():
    assert energy_little(P, WorkloadProfile(0.0, 1.0)) == pytest.approx(40 + 1.3 + 5)


def test_little_all_busy_recomputed():
    w = WorkloadProfile(1.0, 0.0)
    busy = 1 / 0.7
    mem = P.dram_bg + P.dram_c * 12
    want = (630 / 1.3 + busy * (mem + 5)) / (630 + mem + 5)
    assert energy_little(P, w) / energy_native(P, w) == pytest.approx(want)


def _sheet(p, tb, ti, c):
    """Row-by-row recomputation, the way a spreadsheet would lay it out."""
    cols = {}
    cols["nat_cpu"] = tb * p.P_cpu_busy + ti * p.P_cpu_idle
    cols["nat_mem"] = tb * (p.dram_bg + p.dram_c * (8 + 4)) + ti * p.P_mem_sr
    cols["nat_io"] = (tb + ti) * p.P_io
    stretched = tb * p.F * c
    cols["ark_cpu"] = stretched * p.P_pc_busy + ti * p.P_pc_idle
    cols["ark_mem"] = stretched * (p.dram_bg + p.dram_c * (32 + 2)) + ti * p.P_mem_sr
    cols["ark_io"] = (stretched + ti) * p.P_io
    nat = cols["nat_cpu"] + cols["nat_mem"] + cols["nat_io"]
    ark = cols["ark_cpu"] + cols["ark_mem"] + cols["ark_io"]
    return nat, ark


@pytest.mark.parametrize("params", [P, EnergyParams(dram_bg=4, dram_c=0.25)])
@pytest.mark.parametrize("tb, ti, c", [(0.4, 0.6, 2.7), (1.0, 0.0, 3.5), (0.2, 0.8, 5.2), (3.0, 7.0, 13.9)])
def test_independent_recomputation(params, tb, ti, c):
    nat, ark = _sheet(params, tb, ti, c)
    w = WorkloadProfile(tb, ti)
    assert energy_native(params, w) == pytest.approx(nat, rel=1e-12)
    assert energy_ark(params, w, c) == pytest.approx(ark, rel=1e-12)


@given(tb=st.floats(0, 10), ti=st.floats(0, 10), c=st.floats(0.1, 30))
def test_breakdowns_add_up_and_are_non_negative(tb, ti, c):
    if tb + ti <= 0:
        return
    w = WorkloadProfile(tb, ti)
    rep = energy_report(P, w, c)
    for b, total in ((rep.native, rep.E_native), (rep.ark, rep.E_ark), (rep.little, rep.E_little)):
        assert min(b.core, b.dram, b.io) >= 0
        assert b.core + b.dram + b.io == total


def test_grid_is_monotone_in_overhead():
    cs = frange(1, 10, 0.5)
    us = frange(0.1, 1, 0.1)
    rows = whatif_grid(P, cs, us)
    assert len(rows) == len(cs) * len(us)
    for u in us:
        col = [r for c, uu, r in rows if uu == u]
        assert col == sorted(col)


def test_grid_cell_matches_direct_call():
    u = 0.37
    (c, uu, r), = whatif_grid(P, [2.7], [u])
    w = WorkloadProfile.from_usage(u)
    assert r == energy_ark(P, w, 2.7) / energy_native(P, w)


def test_grid_zero_usage_limit():
    (_, _, r), = whatif_grid(P, [7.0], [0.0])
    assert r == pytest.approx((1 + 1.3 + 5) / (80 + 1.3 + 5))


def test_grid_rejects_empty_ranges():
    with pytest.raises(ValueError):
        whatif_grid(P, [], [0.5])
    assert frange(2, 1, 0.5) == []


def test_grid_csv_header():
    text = grid_csv(whatif_grid(P, [1, 2], [0.5]))
    lines = text.splitlines()
    assert lines[0] == "overhead,usage,relative_energy"
    assert len(lines) == 3
    assert float(lines[1].split(",")[2]) == pytest.approx(relative(P, 1, 0.5), abs=1e-6)


def test_break_even_is_non_increasing_in_usage():
    us = frange(0.05, 1, 0.05)
    be = [break_even(P, u) for u in us]
    assert all(a >= b - 1e-12 for a, b in zip(be, be[1:]))
    assert break_even(P, 1.0) == pytest.approx(3.5)
    for u in (0.2, 0.6, 1.0):
        assert relative(P, break_even(P, u), u) == pytest.approx(1.0)


def test_params_validation_and_file(tmp_path):
    with pytest.raises(ValueError):
        EnergyParams(F=1)
    with pytest.raises(ValueError):
        EnergyParams(P_io=-1)
    f = tmp_path / "p.txt"
    f.write_text("# overrides\nP_io = 7\nF=4\n")
    p = load_params(str(f))
    assert p.P_io == 7 and p.F == 4 and p.P_cpu_busy == 630
    with pytest.raises(ValueError):
        load_params(text="bogus = 3\n")
    assert load_params(text=P.to_text()) == P


def test_calibration_infeasible_when_break_even_needs_negative_dram():
    with pytest.raises(Infeasible):
        calibrate_dram(primary=(30.0, 1.0))


def test_measured_core_energy_replaces_model():
    w = WorkloadProfile(1.0, 1.0, E_core=500.0)
    assert native_breakdown(P, w).core == 500.0
    assert little_breakdown(P, w).core == pytest.approx((500 - 80) / 1.3 + 40)
    assert ark_breakdown(P, w, 2.0).core == pytest.approx(2 * 6 * 17 + 1)


def test_usage_profile_bounds():
    with pytest.raises(ValueError):
        WorkloadProfile.from_usage(1.5)
    with pytest.raises(ValueError):
        WorkloadProfile(0, 0)
    assert WorkloadProfile.from_usage(0.25).usage == pytest.approx(0.25)
    assert not math.isnan(relative(P, 1.0, 1.0))
