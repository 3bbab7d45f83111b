import math

import numpy as np
import pytest

from chilrig.components import (
    DCLink,
    DGUnit,
    FeederLine,
    FeederModel,
    GridSource,
    InverterAvg,
    LoadBank,
    PVArray,
    RLCLoadBank,
    TapTransformer,
    dclink_step,
    grid_voltage,
    inverter_output,
    pv_current,
    pv_power,
    rlc_total_load,
    saturate_dq,
    tap_ratio,
)
from chilrig.engine import NumericalDivergence


# ------------------------------------------------------------ grid source


def test_healthy_source_peak_is_sqrt2_times_rms():
    src = GridSource(u_rms=230.0, f0=50.0)
    t_peak = 0.25 / 50.0  # quarter period: sin = 1 on phase 1
    ua, _, _ = grid_voltage(src, t_peak)
    assert ua == pytest.approx(325.2691193458119, abs=1e-9)


def test_zero_residual_gives_zero_voltages():
    src = GridSource(u_rms=230.0)
    src.set_residual((0.0, 0.0, 0.0))
    assert grid_voltage(src, 0.0123) == (0.0, 0.0, 0.0)


def test_dip_residual_scales_peak():
    src = GridSource(u_rms=230.0)
    src.set_residual((0.05, 0.05, 0.05))
    t_peak = 0.25 / 50.0
    ua, _, _ = grid_voltage(src, t_peak)
    assert ua == pytest.approx(16.263455967290593, abs=1e-9)


def test_phase_sequence_lags():
    src = GridSource(u_rms=1.0, f0=50.0)
    # phase 2 hits its positive peak one third of a period after phase 1
    t1 = 0.25 / 50.0
    t2 = t1 + (1.0 / 50.0) / 3.0
    assert grid_voltage(src, t2)[1] == pytest.approx(grid_voltage(src, t1)[0])


def test_residual_bounds_validated():
    src = GridSource(u_rms=230.0)
    with pytest.raises(ValueError):
        src.set_residual((2.0, 1.0, 1.0))


# --------------------------------------------------------------- PV array


def test_pv_open_circuit_current_is_zero():
    pv = PVArray(p_stc=5800.0, v_mpp=700.0)
    assert pv_current(pv, pv.v_oc) == pytest.approx(0.0, abs=1e-9)


def test_pv_short_circuit_current():
    pv = PVArray(p_stc=5800.0, v_mpp=700.0)
    i_sc = pv_current(pv, 0.0)
    assert i_sc > pv.p_stc / pv.v_mpp  # short-circuit above MPP current


def test_pv_mpp_power_matches_rating_via_grid_scan():
    # independent oracle: dense scan of v*i(v) locates the maximum
    pv = PVArray(p_stc=5800.0, v_mpp=700.0)
    v = np.linspace(0.0, pv.v_oc, 20001)
    p = np.array([pv_power(pv, float(x)) for x in v])
    k = int(np.argmax(p))
    assert p[k] == pytest.approx(5800.0, rel=0.01)
    assert v[k] == pytest.approx(700.0, rel=0.01)
    assert pv_current(pv, 700.0) == pytest.approx(5800.0 / 700.0, rel=0.01)


def test_pv_curve_monotone_and_single_peak():
    pv = PVArray(p_stc=10000.0, v_mpp=650.0, v_oc_ratio=1.3)
    v = np.linspace(0.0, pv.v_oc, 5001)
    i = np.array([pv_current(pv, float(x)) for x in v])
    assert (np.diff(i) <= 1e-12).all()
    p = v * i
    k = int(np.argmax(p))
    assert 0 < k < len(p) - 1
    # power rises before the peak and falls after it (unique interior max)
    assert (np.diff(p[: k + 1]) >= -1e-9).all()
    assert (np.diff(p[k:]) <= 1e-9).all()


def test_pv_irradiance_scales_current():
    pv = PVArray(p_stc=5800.0, v_mpp=700.0, irradiance=500.0)
    ref = PVArray(p_stc=5800.0, v_mpp=700.0)
    assert pv_current(pv, 350.0) == pytest.approx(0.5 * pv_current(ref, 350.0))


# --------------------------------------------------------------- DC link


def test_dclink_balanced_power_keeps_voltage():
    link = DCLink(capacitance=2e-3, v_dc=700.0)
    out = dclink_step(link, p_in=4000.0, p_out=4000.0, dt=1e-3)
    assert out.v_dc == pytest.approx(700.0, abs=1e-12)


def test_dclink_blocked_export_charges_up():
    link = DCLink(capacitance=2e-3, v_dc=700.0)
    for _ in range(10):
        new = dclink_step(link, p_in=2000.0, p_out=0.0, dt=1e-3)
        assert new.v_dc > link.v_dc
        link = new


def test_dclink_energy_update_closed_form():
    # sqrt(700^2 + 2*5000*0.001/0.002) = 703.5623639735144
    link = DCLink(capacitance=2e-3, v_dc=700.0)
    out = dclink_step(link, p_in=5000.0, p_out=0.0, dt=1e-3)
    assert out.v_dc == pytest.approx(703.5623639735144, abs=1e-9)


def test_dclink_split_rails_symmetric():
    link = DCLink(capacitance=1e-3, v_dc=650.0)
    assert link.v_plus == pytest.approx(325.0)
    assert link.v_minus == pytest.approx(-325.0)


def test_dclink_energy_conservation_over_run():
    link = DCLink(capacitance=2e-3, v_dc=700.0)
    rng = np.random.default_rng(2)
    dt = 1e-4
    e0 = 0.5 * link.capacitance * link.v_dc**2
    total = 0.0
    for _ in range(5000):
        p_in = float(rng.uniform(0, 6000))
        p_out = float(rng.uniform(0, 6000))
        link = dclink_step(link, p_in, p_out, dt)
        total += (p_in - p_out) * dt
    e1 = 0.5 * link.capacitance * link.v_dc**2
    assert e1 - e0 == pytest.approx(total, rel=1e-3)


def test_dclink_divergence_detected():
    link = DCLink(capacitance=1e-3, v_dc=700.0)
    with pytest.raises(NumericalDivergence):
        dclink_step(link, p_in=float("inf"), p_out=0.0, dt=1e-3)


# ------------------------------------------------------ average inverter


def make_inverter(**kw):
    base = dict(p_rated=10000.0, i_rated=10000.0 / (3 * 230.0))
    base.update(kw)
    return InverterAvg(**base)


def test_inverter_zero_reference_decays_to_zero():
    inv = make_inverter(i_d=10.0, i_q=-4.0)
    for k in range(5000):
        out = inverter_output(inv, (0.0, 0.0), grid_angle=0.01 * k, dt=1e-4)
    assert math.hypot(inv.i_d, inv.i_q) < 1e-9
    assert max(abs(x) for x in out) < 1e-8


def test_inverter_tracks_rated_reference():
    inv = make_inverter()
    ref = (inv.i_rated, 0.0)
    t = 0.0
    dt = 1e-4
    for _ in range(3000):
        t += dt
        inverter_output(inv, ref, grid_angle=2 * math.pi * 50 * t, dt=dt)
    assert inv.i_d == pytest.approx(inv.i_rated, rel=1e-6)
    assert inv.i_q == pytest.approx(0.0, abs=1e-9)
    # balanced three-phase set at rated amplitude
    vals = []
    n = 200
    for k in range(n):
        t += dt
        vals.append(inverter_output(inv, ref, 2 * math.pi * 50 * t, dt))
    peaks = np.max(np.abs(np.array(vals)), axis=0)
    assert np.allclose(peaks, math.sqrt(2) * inv.i_rated, rtol=1e-3)


def test_inverter_saturates_reference_to_limit():
    inv = make_inverter()
    lim = inv.limit_a()
    d, q = saturate_dq(0.0, 1.5 * inv.i_rated, lim)
    assert math.hypot(d, q) == pytest.approx(1.2 * inv.i_rated, rel=1e-12)
    # run to steady state; emitted magnitude is the 1.2 p.u. limit
    dt = 1e-4
    t = 0.0
    for _ in range(5000):
        t += dt
        inverter_output(inv, (0.0, 1.5 * inv.i_rated), 2 * math.pi * 50 * t, dt)
    assert math.hypot(inv.i_d, inv.i_q) == pytest.approx(lim, rel=1e-6)
    assert math.hypot(inv.i_d, inv.i_q) <= lim + 1e-9


def test_inverter_limit_invariant_under_random_references():
    inv = make_inverter()
    lim = inv.limit_a()
    rng = np.random.default_rng(9)
    t = 0.0
    dt = 1e-4
    for _ in range(2000):
        t += dt
        ref = tuple(rng.uniform(-3, 3, size=2) * inv.i_rated)
        out = inverter_output(inv, ref, 2 * math.pi * 50 * t, dt)
        assert math.hypot(inv.i_d, inv.i_q) <= lim + 1e-9
        assert max(abs(x) for x in out) <= math.sqrt(2) * lim + 1e-9


# ------------------------------------------------------- tap transformer


def test_tap_ratio_neutral():
    assert tap_ratio(TapTransformer()) == pytest.approx(1.0)


def test_tap_ratio_arithmetic():
    assert tap_ratio(TapTransformer(step_pu=0.015, tap=2)) == pytest.approx(1.03)


def test_tap_clamps_at_bounds():
    xf = TapTransformer(step_pu=0.015, tap_min=-2, tap_max=2)
    xf.shift(+5)
    assert xf.tap == 2
    assert tap_ratio(xf) == pytest.approx(1.03)
    xf.shift(-10)
    assert xf.tap == -2


# -------------------------------------------------------- RLC load banks


def make_bank(**kw):
    base = dict(
        banks=[LoadBank(4000.0), LoadBank(2000.0), LoadBank(1000.0, 50.0)],
        u_nominal=230.0,
    )
    base.update(kw)
    return RLCLoadBank(**base)


def test_bank_nothing_switched_draws_nothing():
    assert rlc_total_load(make_bank(), 230.0) == (0.0, 0.0)


def test_bank_single_switched_at_nominal():
    bank = make_bank()
    bank.switch(2)
    p, q = rlc_total_load(bank, 230.0)
    assert p == pytest.approx(1000.0)
    assert q == pytest.approx(50.0)


def test_bank_quadratic_voltage_scaling():
    bank = make_bank()
    bank.switch(2)
    p, q = rlc_total_load(bank, 0.9 * 230.0)
    assert p == pytest.approx(810.0)
    assert q == pytest.approx(0.81 * 50.0)


def test_fine_element_conductance_term_and_clamp():
    bank = make_bank(g_max=0.01)
    bank.set_fine(0.005)
    p, _ = rlc_total_load(bank, 230.0)
    assert p == pytest.approx(0.005 * 230.0**2)
    assert bank.set_fine(0.5) == pytest.approx(0.01)
    assert bank.set_fine(-1.0) == pytest.approx(0.0)


def test_bank_switch_mask():
    bank = make_bank()
    bank.switch(0)
    bank.switch(2)
    assert bank.switched_mask() == 0b101


# --------------------------------------------------- feeder data helpers


def test_feeder_injection_combines_load_and_dg():
    feeder = FeederModel(
        buses=["a"],
        lines=[FeederLine("root", "a", 0.01, 0.02)],
        loads={"a": 0.5 + 0.2j},
        dgs={"a": DGUnit(p_pu=0.3, q_pu=0.1)},
    )
    assert feeder.injection("a") == pytest.approx(0.2 + 0.1j)


def test_dg_q_setpoint_clamps_to_capability():
    dg = DGUnit(p_pu=0.5, q_min=-0.2, q_max=0.25)
    assert dg.set_q(0.4) == pytest.approx(0.25)
    assert dg.set_q(-0.7) == pytest.approx(-0.2)
