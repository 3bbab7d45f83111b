"""Scenario plant compositions.

Each plant owns its components and advances them in a fixed order per tick
(sources, converter chain, network solve, measurements). Plants expose the
same small surface to the engine: ``names``, ``initialize()``,
``advance(dt, t_next)``, ``apply_event(ev)`` and ``apply_controls(ctrl, t)``.

Plants initialize in steady state: the test begins with the rig already
running at its operating point, the way a real-time simulator is brought
up before a recording starts.
"""

from __future__ import annotations

import math

import numpy as np

from .components import (
    DCLink,
    FeederModel,
    GridSource,
    InverterAvg,
    PVArray,
    RLCLoadBank,
    TapTransformer,
    grid_voltage,
    inverter_output,
    pv_current,
    rlc_total_load,
    tap_ratio,
)
from .engine import Event, InvalidEvent, NumericalDivergence
from .loadflow import solve_radial, voltage_extrema

TWO_PI = 2.0 * math.pi
SQRT2 = math.sqrt(2.0)
SQRT3 = math.sqrt(3.0)


def _pv_slope(pv: PVArray, v_dc: float) -> float:
    """d(i_pv)/d(v_dc); zero in the clipped region beyond v_oc."""
    if v_dc >= pv.v_oc or pv_current(pv, v_dc) <= 0.0:
        return 0.0
    g = pv.irradiance / 1000.0
    tf = 1.0 + pv.temp_coeff_voc * (pv.temperature - 25.0)
    v_eq = v_dc / tf
    return -g * pv._isc_stc * math.exp(v_eq / pv._shape_a) / (
        pv._shape_a * pv._denom * tf
    )


class _ConverterChain:
    """PV array feeding an average inverter through a split DC link.

    The DC-link state is advanced with a backward-Euler energy balance:
    the array power is evaluated at the end-of-step voltage (Newton on a
    monotone scalar residual), so the stored energy matches the integrated
    power exchange exactly.
    """

    def __init__(self, pv: PVArray, dclink: DCLink, inverter: InverterAvg):
        self.pv = pv
        self.dclink = dclink
        self.inverter = inverter
        self.p_pv = 0.0

    def dc_step(self, p_out: float, dt: float) -> None:
        c = self.dclink.capacitance
        v_old_sq = self.dclink.v_dc ** 2
        k = 2.0 * dt / c
        v = max(self.dclink.v_dc, 1.0)
        for _ in range(80):
            i = pv_current(self.pv, v)
            g = v * v - v_old_sq - k * (v * i - p_out)
            dg = 2.0 * v - k * (i + v * _pv_slope(self.pv, v))
            step = g / dg
            v_new = v - step
            if v_new < 0.0:
                v_new = 0.5 * v
            if abs(v_new - v) <= 1e-12 * max(v, 1.0):
                v = v_new
                break
            v = v_new
        if not math.isfinite(v):
            raise NumericalDivergence("DC-link update diverged")
        self.dclink = DCLink(capacitance=c, v_dc=max(v, 0.0))
        self.p_pv = self.dclink.v_dc * pv_current(self.pv, self.dclink.v_dc)


class _ModulationAngle:
    """Phase reference the inverter modulates at, advanced from the last
    controller command (zero-order held angle/frequency pair)."""

    def __init__(self, f0: float, cycle_s: float):
        self.cycle_s = cycle_s
        self.theta0 = 0.0
        self.omega = TWO_PI * f0
        self.t0 = 0.0

    def at(self, t: float) -> float:
        return self.theta0 + self.omega * (t - self.t0)

    def command(self, theta: float, omega: float, t_cmd: float) -> None:
        # the controller's angle is its prediction for t_cmd + cycle
        self.theta0 = theta
        self.omega = omega
        self.t0 = t_cmd + self.cycle_s


def _instant_pq(u_abc, i_abc) -> tuple[float, float]:
    """Instantaneous three-phase power pair.

    P is the plain sum of u*i. Q uses the cross-phase form and is reported
    injection-positive: a current leading the voltage by 90 degrees
    (capacitive support) gives Q > 0.
    """
    ua, ub, uc = u_abc
    ia, ib, ic = i_abc
    p = ua * ia + ub * ib + uc * ic
    q = -((ub - uc) * ia + (uc - ua) * ib + (ua - ub) * ic) / SQRT3
    return p, q


# ------------------------------------------------------------ dip rig


class DipRigPlant:
    """Grid simulator imposing the voltage on a PV inverter under test.

    The grid side is an ideal source (the dip generator of a ride-through
    test bench), so the plant voltage is the source voltage and the unit's
    behaviour shows up entirely in its currents and DC-link state.
    """

    names = (
        "I_L1",
        "I_L2",
        "I_L3",
        "P_ac",
        "P_pv",
        "Q_ac",
        "U_L1",
        "U_L2",
        "U_L3",
        "V_dc",
        "V_dcn",
        "V_dcp",
    )

    def __init__(
        self,
        source: GridSource,
        pv: PVArray,
        dclink: DCLink,
        inverter: InverterAvg,
        controller_cycle_s: float,
    ):
        self.source = source
        self.chain = _ConverterChain(pv, dclink, inverter)
        self.angle = _ModulationAngle(source.f0, controller_cycle_s)
        v_ref = dclink.v_dc
        p0 = v_ref * pv_current(pv, v_ref)
        i_d0 = p0 / (3.0 * source.u_rms)
        self.refs = [i_d0 / inverter.i_rated, 0.0]  # p.u., ZOH between cycles
        inverter.i_d = i_d0
        inverter.i_q = 0.0
        self._frame = None

    def initialize(self):
        self._measure(0.0)
        return self.names, self._frame

    def advance(self, dt: float, t_next: float):
        inv = self.chain.inverter
        u_abc = grid_voltage(self.source, t_next)
        ref_a = (self.refs[0] * inv.i_rated, self.refs[1] * inv.i_rated)
        i_abc = inverter_output(inv, ref_a, self.angle.at(t_next), dt)
        p_ac, q_ac = _instant_pq(u_abc, i_abc)
        self.chain.dc_step(p_out=p_ac, dt=dt)
        self._measure(t_next, u_abc, i_abc, p_ac, q_ac)
        return self._frame

    def apply_event(self, ev: Event) -> None:
        if ev.action == "fault_apply":
            self.source.set_residual(ev.params["residual"])
        elif ev.action == "fault_clear":
            self.source.clear_fault()
        else:
            _param_set(self, ev.params)

    def apply_controls(self, ctrl: dict, t: float) -> None:
        if "i_d_ref_pu" in ctrl:
            self.refs[0] = float(ctrl["i_d_ref_pu"])
        if "i_q_ref_pu" in ctrl:
            self.refs[1] = float(ctrl["i_q_ref_pu"])
        if "theta" in ctrl and "omega" in ctrl:
            self.angle.command(float(ctrl["theta"]), float(ctrl["omega"]), t)

    _PARAM_PATHS = {
        "pv.irradiance": lambda self, v: setattr(self.chain.pv, "irradiance", v),
        "pv.temperature": lambda self, v: setattr(self.chain.pv, "temperature", v),
        "grid.u_rms": lambda self, v: setattr(self.source, "u_rms", v),
    }

    def _measure(self, t, u_abc=None, i_abc=None, p_ac=None, q_ac=None):
        if u_abc is None:
            u_abc = grid_voltage(self.source, t)
            inv = self.chain.inverter
            th = self.angle.at(t)
            i_abc = tuple(
                SQRT2 * (inv.i_d * math.sin(th + off) + inv.i_q * math.cos(th + off))
                for off in (0.0, -TWO_PI / 3.0, -2.0 * TWO_PI / 3.0)
            )
            p_ac, q_ac = _instant_pq(u_abc, i_abc)
            self.chain.p_pv = self.chain.dclink.v_dc * pv_current(
                self.chain.pv, self.chain.dclink.v_dc
            )
        link = self.chain.dclink
        self._frame = (
            i_abc[0],
            i_abc[1],
            i_abc[2],
            p_ac,
            self.chain.p_pv,
            q_ac,
            u_abc[0],
            u_abc[1],
            u_abc[2],
            link.v_dc,
            link.v_minus,
            link.v_plus,
        )


# ----------------------------------------------------- feeder rig (CVCU)


class FeederRigPlant:
    """Quasi-static medium-voltage feeder behind a tap transformer.

    Every tick solves the radial load flow with the present tap, DG
    reactive setpoints and (optionally noisy) loads; the measurements are
    the per-bus voltage magnitudes and their extrema.
    """

    def __init__(
        self,
        feeder: FeederModel,
        transformer: TapTransformer,
        noise_amplitude: float = 0.0,
        seed: int = 0,
    ):
        self.feeder = feeder
        self.transformer = transformer
        self.noise_amplitude = noise_amplitude
        self._rng = np.random.default_rng(seed)
        self._base_loads = dict(feeder.loads)
        self._monitored = sorted(feeder.buses)
        self._dg_buses = sorted(feeder.dgs)
        self.names = tuple(
            ["P_slack_pu"]
            + [f"Q_dg_{b}" for b in self._dg_buses]
            + [f"V_{b}" for b in self._monitored]
            + ["tap_pos", "v_max_pu", "v_min_pu", "v_spread_pu"]
        )
        self._frame = None

    def initialize(self):
        self._solve_and_measure()
        return self.names, self._frame

    def advance(self, dt: float, t_next: float):
        self._solve_and_measure()
        return self._frame

    def apply_event(self, ev: Event) -> None:
        if ev.action != "param_set":
            raise InvalidEvent(f"feeder plant cannot apply event {ev.action!r}")
        _param_set(self, ev.params)

    def apply_controls(self, ctrl: dict, t: float) -> None:
        tap_cmd = int(ctrl.get("tap_cmd", 0.0))
        if tap_cmd:
            self.transformer.shift(tap_cmd)
        for bus in self._dg_buses:
            key = f"q_dg_{bus}"
            if key in ctrl:
                self.feeder.dgs[bus].set_q(float(ctrl[key]))

    def _set_load(self, bus: str, part: str, value: float) -> None:
        s = self._base_loads.get(bus, 0j)
        if part == "p":
            s = complex(value, s.imag)
        else:
            s = complex(s.real, value)
        self._base_loads[bus] = s

    def _solve_and_measure(self) -> None:
        loads = dict(self._base_loads)
        if self.noise_amplitude > 0.0:
            eta = self._rng.uniform(-1.0, 1.0, size=len(self._monitored))
            for b, n in zip(self._monitored, eta):
                if b in loads:
                    loads[b] = loads[b] * (1.0 + self.noise_amplitude * float(n))
        self.feeder.loads = loads
        sol = solve_radial(self.feeder, tap_ratio=tap_ratio(self.transformer))
        if not sol.converged:
            raise NumericalDivergence(
                f"load flow stalled at mismatch {sol.mismatch:.3e}"
            )
        v_min, v_max, spread = voltage_extrema(sol, self._monitored)
        self._frame = tuple(
            [sol.slack_injection.real]
            + [self.feeder.dgs[b].q_pu for b in self._dg_buses]
            + [abs(sol.v[b]) for b in self._monitored]
            + [float(self.transformer.tap), v_max, v_min, spread]
        )


# -------------------------------------------------- resonant-load rig


class ResonantLoadRigPlant:
    """PV inverter exporting into a stiff grid beside a switchable load.

    Grid power is what the local load does not absorb. All power values
    are averaged over exactly one fundamental period by modeled power
    meters whose windows are pre-filled from the stationary pre-run
    waveforms, so the first exchanged measurement is already valid.
    """

    def __init__(
        self,
        source: GridSource,
        pv: PVArray,
        dclink: DCLink,
        inverter: InverterAvg,
        bank: RLCLoadBank,
        dt: float,
        dc_gain_w_per_v: float = 20.0,
    ):
        self.source = source
        self.chain = _ConverterChain(pv, dclink, inverter)
        self.bank = bank
        self.dc_gain = dc_gain_w_per_v
        self.v_dc_ref = dclink.v_dc
        self.p_ref = dclink.v_dc * pv_current(pv, dclink.v_dc)
        n = int(round(1.0 / (source.f0 * dt)))
        if n < 4:
            raise ValueError("need at least 4 samples per fundamental period")
        self._n_window = n
        i_d0 = self.p_ref / (3.0 * source.u_rms)
        inverter.i_d = i_d0
        inverter.i_q = 0.0
        self._buf_p_inv = []
        self._buf_p_load = []
        self._buf_p_grid = []
        self._buf_u_sq = []
        for k in range(-n, 0):  # stationary history for the meter windows
            t = k * dt
            u_abc = grid_voltage(source, t)
            th = TWO_PI * source.f0 * t
            i_inv = tuple(
                SQRT2 * i_d0 * math.sin(th + off)
                for off in (0.0, -TWO_PI / 3.0, -2.0 * TWO_PI / 3.0)
            )
            self._push_meters(u_abc, i_inv, (0.0, 0.0, 0.0))
        self.names = (
            "I_grid_L1",
            "I_grid_L2",
            "I_grid_L3",
            "I_inv_L1",
            "I_inv_L2",
            "I_inv_L3",
            "P_grid",
            "P_inv",
            "P_load",
            "U_L1",
            "U_L2",
            "U_L3",
            "U_rms",
            "V_dc",
            "banks_on",
            "fine_g",
        )
        self._frame = None
        self._last = None  # latest instantaneous sample set

    def initialize(self):
        t = 0.0
        u_abc = grid_voltage(self.source, t)
        inv = self.chain.inverter
        th = TWO_PI * self.source.f0 * t
        i_inv = tuple(
            SQRT2 * (inv.i_d * math.sin(th + off) + inv.i_q * math.cos(th + off))
            for off in (0.0, -TWO_PI / 3.0, -2.0 * TWO_PI / 3.0)
        )
        i_load = self._load_currents(t, u_abc)
        self._push_meters(u_abc, i_inv, i_load)
        self._measure(u_abc, i_inv, i_load)
        return self.names, self._frame

    def advance(self, dt: float, t_next: float):
        inv = self.chain.inverter
        u_abc = grid_voltage(self.source, t_next)
        i_d_ref = self._dc_regulator()
        ref_a = (i_d_ref * inv.i_rated, 0.0)
        i_inv = inverter_output(inv, ref_a, TWO_PI * self.source.f0 * t_next, dt)
        i_load = self._load_currents(t_next, u_abc)
        p_inst, _ = _instant_pq(u_abc, i_inv)
        self.chain.dc_step(p_out=p_inst, dt=dt)
        self._push_meters(u_abc, i_inv, i_load)
        self._measure(u_abc, i_inv, i_load)
        return self._frame

    def apply_event(self, ev: Event) -> None:
        if ev.action != "param_set":
            raise InvalidEvent(
                f"resonant-load plant cannot apply event {ev.action!r}"
            )
        _param_set(self, ev.params)

    def apply_controls(self, ctrl: dict, t: float) -> None:
        if "bank_on" in ctrl:
            self.bank.switch(int(ctrl["bank_on"]), True)
        if "fine_g" in ctrl:
            self.bank.set_fine(float(ctrl["fine_g"]))

    _PARAM_PATHS = {
        "pv.irradiance": lambda self, v: setattr(self.chain.pv, "irradiance", v),
    }

    def _dc_regulator(self) -> float:
        """Plant-internal export control: hold the DC link at its MPP
        voltage by trimming the active current reference."""
        inv = self.chain.inverter
        p_target = self.p_ref + self.dc_gain * (self.chain.dclink.v_dc - self.v_dc_ref)
        i_d = p_target / (3.0 * self.source.u_rms) / inv.i_rated
        return min(max(i_d, 0.0), inv.i_limit_pu)

    def _load_currents(self, t, u_abc):
        """Instantaneous bank currents: P part in phase with the voltage,
        Q part lagging it by 90 degrees."""
        u_rms_now = self.source.u_rms * self.source.residual[0]
        if u_rms_now <= 0.0:
            return (0.0, 0.0, 0.0)
        p, q = rlc_total_load(self.bank, u_rms_now)
        gp = p / 3.0 / u_rms_now**2
        gq = q / 3.0 / u_rms_now**2
        th = TWO_PI * self.source.f0 * t
        peak = SQRT2 * u_rms_now
        out = []
        for off in (0.0, -TWO_PI / 3.0, -2.0 * TWO_PI / 3.0):
            u = peak * math.sin(th + off)
            u_quad = peak * math.cos(th + off)
            out.append(gp * u - gq * u_quad)
        return tuple(out)

    def _push_meters(self, u_abc, i_inv, i_load) -> None:
        i_grid = tuple(a - b for a, b in zip(i_inv, i_load))
        p_inv = sum(u * i for u, i in zip(u_abc, i_inv))
        p_load = sum(u * i for u, i in zip(u_abc, i_load))
        p_grid = sum(u * i for u, i in zip(u_abc, i_grid))
        n = self._n_window
        for buf, val in (
            (self._buf_p_inv, p_inv),
            (self._buf_p_load, p_load),
            (self._buf_p_grid, p_grid),
            (self._buf_u_sq, u_abc[0] * u_abc[0]),
        ):
            buf.append(val)
            if len(buf) > n:
                del buf[0]
        self._last = (u_abc, i_inv, i_load, i_grid)

    def _measure(self, u_abc, i_inv, i_load) -> None:
        n = self._n_window
        i_grid = self._last[3]
        self._frame = (
            i_grid[0],
            i_grid[1],
            i_grid[2],
            i_inv[0],
            i_inv[1],
            i_inv[2],
            sum(self._buf_p_grid) / n,
            sum(self._buf_p_inv) / n,
            sum(self._buf_p_load) / n,
            u_abc[0],
            u_abc[1],
            u_abc[2],
            math.sqrt(sum(self._buf_u_sq) / n),
            self.chain.dclink.v_dc,
            float(self.bank.switched_mask()),
            self.bank.g_fine,
        )


# ------------------------------------------------------------ utilities


def _param_set(plant, params: dict) -> None:
    path, value = params["path"], params["value"]
    if path.startswith("loads.") and isinstance(plant, FeederRigPlant):
        _, bus, part = path.split(".")
        if part not in ("p", "q") or bus not in plant.feeder.buses:
            raise InvalidEvent(f"unknown load path {path!r}")
        plant._set_load(bus, part, float(value))
        return
    if path.startswith("dgs.") and isinstance(plant, FeederRigPlant):
        _, bus, part = path.split(".")
        if part != "p" or bus not in plant.feeder.dgs:
            raise InvalidEvent(f"unknown DG path {path!r}")
        plant.feeder.dgs[bus].p_pu = float(value)
        return
    setter = getattr(plant, "_PARAM_PATHS", {}).get(path)
    if setter is None:
        raise InvalidEvent(f"unknown parameter path {path!r}")
    setter(plant, float(value))
