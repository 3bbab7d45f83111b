import cmath
import math

import numpy as np
import pytest

from chilrig.components import DGUnit, FeederLine, FeederModel
from chilrig.loadflow import InvalidTopology, solve_radial, voltage_extrema


# ------------------------------------------------- independent oracles


def nodal_oracle(feeder, tap_ratio=1.0, tol=1e-12, max_iter=2000):
    """Dense Ybus fixed-point solution, independent of the sweep solver."""
    buses = list(feeder.buses)
    index = {b: i for i, b in enumerate(buses)}
    n = len(buses)
    y_ll = np.zeros((n, n), dtype=complex)
    y_l0 = np.zeros(n, dtype=complex)
    for line in feeder.lines:
        y = 1.0 / complex(line.r_pu, line.x_pu)
        f, t = line.from_bus, line.to_bus
        if f == feeder.root:
            y_ll[index[t], index[t]] += y
            y_l0[index[t]] -= y
        else:
            fi, ti = index[f], index[t]
            y_ll[fi, fi] += y
            y_ll[ti, ti] += y
            y_ll[fi, ti] -= y
            y_ll[ti, fi] -= y
    v0 = feeder.slack_v_pu * tap_ratio
    s_inj = np.array([-feeder.injection(b) for b in buses])  # generation > 0
    v = np.full(n, complex(v0), dtype=complex)
    for _ in range(max_iter):
        i_inj = np.conj(s_inj / v)
        v_new = np.linalg.solve(y_ll, i_inj - y_l0 * v0)
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    return {b: complex(v[index[b]]) for b in buses}


def chain_feeder(n_buses=3, z=0.02 + 0.05j, loads=None, dgs=None):
    buses = [f"b{i}" for i in range(1, n_buses + 1)]
    lines = []
    prev = "root"
    for b in buses:
        lines.append(FeederLine(prev, b, z.real, z.imag))
        prev = b
    return FeederModel(
        buses=buses, lines=lines, loads=loads or {}, dgs=dgs or {}
    )


# ----------------------------------------------------------- basic cases


def test_no_load_feeder_is_flat_at_tap_scaled_slack():
    feeder = chain_feeder(3)
    sol = solve_radial(feeder, tap_ratio=1.03)
    assert sol.converged
    assert sol.iterations == 1
    for b in feeder.buses:
        assert sol.v[b] == pytest.approx(1.03, abs=1e-15)


def test_two_bus_feeder_matches_fixed_point_oracle():
    # independent oracle: iterate V <- 1 - Z*conj(S/V) to 1e-12. The fixed
    # point also has the closed form Im(V) = -Im(Z*conj(S)) and
    # Re(V) = (1 + sqrt(1 - 4*(Re(Z*conj(S)) + Im(Z*conj(S))^2)))/2.
    z = 0.02 + 0.04j
    s = 0.5 + 0.2j
    v_fp = 1.0 + 0j
    for _ in range(500):
        v_next = 1.0 - z * (s / v_fp).conjugate()
        if abs(v_next - v_fp) < 1e-15:
            v_fp = v_next
            break
        v_fp = v_next
    c = z * s.conjugate()
    re_closed = 0.5 * (1.0 + math.sqrt(1.0 - 4.0 * (c.real + c.imag**2)))
    assert v_fp.real == pytest.approx(re_closed, abs=1e-12)
    assert v_fp.imag == pytest.approx(-c.imag, abs=1e-12)
    assert v_fp == pytest.approx(0.9813979642665723 - 0.016j, abs=1e-12)

    feeder = FeederModel(
        buses=["b1"],
        lines=[FeederLine("root", "b1", z.real, z.imag)],
        loads={"b1": s},
    )
    sol = solve_radial(feeder)
    assert sol.converged
    assert abs(sol.v["b1"] - v_fp) < 1e-9


def test_dg_injection_raises_voltage_above_slack():
    feeder = FeederModel(
        buses=["b1"],
        lines=[FeederLine("root", "b1", 0.02, 0.04)],
        dgs={"b1": DGUnit(p_pu=0.5)},
    )
    sol = solve_radial(feeder)
    assert sol.converged
    assert abs(sol.v["b1"]) > 1.0


# ------------------------------------------------------------ invariants


def test_oracle_equivalence_on_small_feeders():
    rng = np.random.default_rng(17)
    for trial in range(20):
        n = int(rng.integers(1, 5))
        loads = {
            f"b{i}": complex(rng.uniform(0, 0.4), rng.uniform(-0.1, 0.15))
            for i in range(1, n + 1)
        }
        dgs = {}
        if n >= 2 and trial % 2 == 0:
            dgs[f"b{n}"] = DGUnit(p_pu=float(rng.uniform(0, 0.5)))
        feeder = chain_feeder(n, z=0.01 + 0.03j, loads=loads, dgs=dgs)
        tap = float(rng.choice([0.97, 1.0, 1.03]))
        sol = solve_radial(feeder, tap_ratio=tap)
        assert sol.converged
        oracle = nodal_oracle(feeder, tap_ratio=tap)
        for b in feeder.buses:
            assert abs(sol.v[b] - oracle[b]) < 1e-9


def test_branched_feeder_matches_oracle():
    feeder = FeederModel(
        buses=["m1", "m2", "m3"],
        lines=[
            FeederLine("root", "m1", 0.02, 0.05),
            FeederLine("m1", "m2", 0.015, 0.04),
            FeederLine("m1", "m3", 0.01, 0.03),
        ],
        loads={"m2": 0.3 + 0.1j, "m3": 0.25 + 0.08j},
        dgs={"m3": DGUnit(p_pu=0.4, q_pu=0.05)},
    )
    sol = solve_radial(feeder)
    assert sol.converged
    oracle = nodal_oracle(feeder)
    for b in feeder.buses:
        assert abs(sol.v[b] - oracle[b]) < 1e-9


def test_tap_linearity_with_zero_load():
    feeder = chain_feeder(4)
    base = solve_radial(feeder, tap_ratio=1.0)
    scaled = solve_radial(feeder, tap_ratio=1.045)
    for b in feeder.buses:
        assert scaled.v[b] == pytest.approx(base.v[b] * 1.045, abs=1e-14)


def test_voltage_drops_monotonically_with_only_loads():
    loads = {f"b{i}": 0.2 + 0.05j for i in range(1, 5)}
    feeder = chain_feeder(4, loads=loads)
    sol = solve_radial(feeder)
    mags = [abs(sol.v["root"])] + [abs(sol.v[f"b{i}"]) for i in range(1, 5)]
    assert all(a >= b for a, b in zip(mags, mags[1:]))


def test_power_balance_at_slack():
    feeder = chain_feeder(
        3,
        loads={"b1": 0.3 + 0.1j, "b2": 0.2 + 0.05j, "b3": 0.3 + 0.1j},
        dgs={"b3": DGUnit(p_pu=0.6)},
    )
    sol = solve_radial(feeder)
    total_load = sum(feeder.loads.values())
    total_dg = sum(complex(d.p_pu, d.q_pu) for d in feeder.dgs.values())
    balance = sol.slack_injection + total_dg - total_load - sol.losses(feeder)
    assert abs(balance) < 1e-8


def test_increasing_tap_raises_every_downstream_bus():
    loads = {f"b{i}": 0.25 + 0.08j for i in range(1, 4)}
    feeder = chain_feeder(3, loads=loads)
    lo = solve_radial(feeder, tap_ratio=1.0)
    hi = solve_radial(feeder, tap_ratio=1.015)
    for b in feeder.buses:
        assert abs(hi.v[b]) > abs(lo.v[b])


# -------------------------------------------------------------- extrema


def test_extrema_uniform_profile():
    feeder = chain_feeder(3)
    sol = solve_radial(feeder)
    v_min, v_max, spread = voltage_extrema(sol)
    assert (v_min, v_max, spread) == (1.0, 1.0, 0.0)


def test_extrema_spread():
    feeder = chain_feeder(2, loads={"b1": 0.0j, "b2": 0.9 + 0.3j})
    sol = solve_radial(feeder)
    v_min, v_max, spread = voltage_extrema(sol)
    assert spread == pytest.approx(v_max - v_min)
    assert v_max <= 1.0000001
    assert v_min < v_max


def test_extrema_single_bus_spread_zero():
    feeder = chain_feeder(1, loads={"b1": 0.4 + 0.1j})
    sol = solve_radial(feeder)
    _, _, spread = voltage_extrema(sol)
    assert spread == pytest.approx(0.0)


# ------------------------------------------------------------- topology


def test_loop_rejected():
    feeder = FeederModel(
        buses=["a", "b"],
        lines=[
            FeederLine("root", "a", 0.01, 0.01),
            FeederLine("a", "b", 0.01, 0.01),
            FeederLine("b", "a", 0.01, 0.01),
        ],
    )
    with pytest.raises(InvalidTopology):
        solve_radial(feeder)


def test_disconnected_bus_rejected():
    feeder = FeederModel(
        buses=["a", "b"],
        lines=[FeederLine("root", "a", 0.01, 0.01)],
    )
    with pytest.raises(InvalidTopology):
        solve_radial(feeder)


def test_double_fed_bus_rejected():
    feeder = FeederModel(
        buses=["a", "b"],
        lines=[
            FeederLine("root", "a", 0.01, 0.01),
            FeederLine("root", "b", 0.01, 0.01),
            FeederLine("a", "b", 0.01, 0.01),
        ],
    )
    with pytest.raises(InvalidTopology):
        solve_radial(feeder)


def test_heavy_load_returns_flagged_best_iterate():
    # infeasibly heavy load: solver must flag instead of raising
    feeder = chain_feeder(1, loads={"b1": 30.0 + 10.0j})
    sol = solve_radial(feeder, max_iter=50)
    assert not sol.converged
