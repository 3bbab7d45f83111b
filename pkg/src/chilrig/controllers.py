"""Reference controllers for the three shipped scenarios.

Each controller is a sequential state machine: one measurement payload in,
one control payload out, never re-entered concurrently. All of them can be
driven in-process or from a separate process over the wire protocol; their
behaviour is fully determined by the exchanged payloads and their own
configuration, which is what makes the two paths bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

TWO_PI = 2.0 * math.pi
SQRT2 = math.sqrt(2.0)


class TuningDiverged(RuntimeError):
    """Fine tuning made the grid power worse five steps in a row."""


# -------------------------------------------------------------------- PLL


@dataclass
class PLLState:
    """Synchronous-reference-frame PLL locked to the measured voltages."""

    f0: float  # nominal grid frequency, Hz
    u_nominal: float  # line-to-neutral RMS, V (normalizes the q error)
    kp: float = 188.5  # loop gains for ~15 Hz natural frequency,
    ki: float = 8883.0  # critically damped
    theta: float = 0.0  # estimated angle, rad, wrapped to [0, 2*pi)
    omega: float | None = None  # estimated angular frequency, rad/s
    integrator: float = 0.0

    def __post_init__(self):
        if self.omega is None:
            self.omega = TWO_PI * self.f0


def pll_step(v_abc: tuple[float, float, float], state: PLLState, dt: float) -> PLLState:
    """One PLL update: Park-transform at the estimated angle, PI on the
    q-axis voltage drives the frequency, integrate to the angle.

    The frequency estimate is clamped to +/-10 % of nominal.
    """
    va, vb, vc = v_abc
    v_alpha = (2.0 * va - vb - vc) / 3.0
    v_beta = (vb - vc) / math.sqrt(3.0)
    # with the sin-based phase convention, lock means v_q -> 0:
    # v_q = v_alpha*cos(theta) + v_beta*sin(theta) ~ peak * sin(angle error)
    v_q = v_alpha * math.cos(state.theta) + v_beta * math.sin(state.theta)
    err = v_q / (SQRT2 * state.u_nominal)
    state.integrator += state.ki * err * dt
    w0 = TWO_PI * state.f0
    omega = w0 + state.kp * err + state.integrator
    state.omega = min(max(omega, 0.9 * w0), 1.1 * w0)
    state.theta = (state.theta + state.omega * dt) % TWO_PI
    return state


def clarke_amplitude(v_abc: tuple[float, float, float]) -> float:
    """Instantaneous amplitude of the space vector (peak volts for a
    balanced set); divides out exactly for balanced dips."""
    va, vb, vc = v_abc
    v_alpha = (2.0 * va - vb - vc) / 3.0
    v_beta = (vb - vc) / math.sqrt(3.0)
    return math.hypot(v_alpha, v_beta)


# -------------------------------------------------- ride-through control


@dataclass
class LVRTController:
    """Inverter control with dip ride-through and reactive current support.

    Normal mode regulates the DC link by adjusting the active current so
    the array stays at its maximum power point. When the positive-sequence
    voltage drops below the dip threshold the controller enters
    ride-through: reactive current k_rt*(1 - v_pos) is injected and the
    active current gives way so the total magnitude stays at or below the
    current limit. After the fault clears, references ramp back at the
    configured slew rate.
    """

    u_nominal: float  # V RMS line-to-neutral
    i_rated: float  # A RMS per phase
    f0: float
    cycle_s: float  # controller cycle (equals the exchange period)
    p_ref_w: float  # export target, normally the array MPP power
    v_dc_ref: float  # V, DC-link regulation point
    k_dc: float = 20.0  # W per V of DC-link deviation
    k_rt: float = 2.0  # p.u. reactive current per p.u. voltage deviation
    dip_threshold_pu: float = 0.9
    i_limit_pu: float = 1.2
    slew_pu_per_s: float = 30.0
    support_mode: str = "reactive"  # "curtail" drops the unit during dips

    pll: PLLState = None
    mode: str = "normal"
    i_d_cmd: float = 0.0  # last emitted references, p.u.
    i_q_cmd: float = 0.0
    i_d_prefault: float = 0.0

    def __post_init__(self):
        if self.support_mode not in ("reactive", "curtail"):
            raise ValueError(f"unknown support_mode {self.support_mode!r}")
        if self.pll is None:
            self.pll = PLLState(f0=self.f0, u_nominal=self.u_nominal)
        self.i_d_cmd = self.normal_i_d_target(self.v_dc_ref)
        self.i_d_prefault = self.i_d_cmd

    def normal_i_d_target(self, v_dc: float) -> float:
        p_target = self.p_ref_w + self.k_dc * (v_dc - self.v_dc_ref)
        i_d = p_target / (3.0 * self.u_nominal) / self.i_rated
        return min(max(i_d, 0.0), self.i_limit_pu)

    def on_exchange(self, tick: int, t: float, meas: dict) -> dict:
        return lvrt_step(meas, self, self.cycle_s)


def lvrt_step(meas: dict, state: LVRTController, dt: float) -> dict:
    """One control cycle; returns the dq reference payload for the plant."""
    v_abc = (meas["U_L1"], meas["U_L2"], meas["U_L3"])
    pll_step(v_abc, state.pll, dt)
    v_pos_pu = clarke_amplitude(v_abc) / (SQRT2 * state.u_nominal)

    in_dip = v_pos_pu < state.dip_threshold_pu
    if in_dip and state.mode == "normal":
        state.i_d_prefault = state.i_d_cmd
    state.mode = "ride_through" if in_dip else "normal"

    lim = state.i_limit_pu
    if in_dip:
        if state.support_mode == "curtail":
            state.i_d_cmd, state.i_q_cmd = 0.0, 0.0
        else:
            i_q = min(state.k_rt * (1.0 - v_pos_pu), lim)
            head = math.sqrt(max(lim * lim - i_q * i_q, 0.0))
            state.i_d_cmd = min(state.i_d_prefault, head)
            state.i_q_cmd = i_q
    else:
        step = state.slew_pu_per_s * dt
        i_d_tgt = state.normal_i_d_target(meas["V_dc"])
        state.i_d_cmd += min(max(i_d_tgt - state.i_d_cmd, -step), step)
        state.i_q_cmd += min(max(0.0 - state.i_q_cmd, -step), step)
    state.i_d_cmd, state.i_q_cmd = _saturate(state.i_d_cmd, state.i_q_cmd, lim)

    return {
        "i_d_ref_pu": state.i_d_cmd,
        "i_q_ref_pu": state.i_q_cmd,
        "theta": state.pll.theta,
        "omega": state.pll.omega,
        "mode_rt": 1.0 if in_dip else 0.0,
        "v_pos_pu": v_pos_pu,
    }


def _saturate(d: float, q: float, limit: float) -> tuple[float, float]:
    mag = math.hypot(d, q)
    if mag <= limit or mag == 0.0:
        return d, q
    s = limit / mag
    return d * s, q * s


# --------------------------------------- coordinated voltage control unit


@dataclass
class CVCUController:
    """Two-stage feeder voltage controller.

    The range stage compresses the spread between the highest and lowest
    monitored voltage by moving DG reactive power one step per cycle
    (absorb at the DG nearest the highest bus, inject at the one nearest
    the lowest). The level stage shifts the whole profile through the
    transformer tap, and only when a limit is actually violated
    (minimize-taps policy). After issuing a command the controller waits
    until it observes a measurement taken after that command before acting
    again, which keeps it stable under communication delay.
    """

    buses: list[str]  # monitored buses
    upper_pu: float = 1.02
    lower_pu: float = 0.94
    q_step_pu: float = 0.05
    dg_q_limits: dict[str, tuple[float, float]] = field(default_factory=dict)
    nearest_dg: dict[str, str] = field(default_factory=dict)  # bus -> DG bus
    q_set: dict[str, float] = field(default_factory=dict)

    last_tap_cmd_t: float | None = None
    last_q_cmd_t: float | None = None
    infeasible: bool = False

    def __post_init__(self):
        if not (self.upper_pu > self.lower_pu):
            raise ValueError("upper limit must exceed lower limit")
        for dg in self.dg_q_limits:
            self.q_set.setdefault(dg, 0.0)

    def on_exchange(self, tick: int, t: float, meas: dict) -> dict:
        return cvcu_step(meas, self, now=t)


def cvcu_step(meas: dict, state: CVCUController, now: float | None = None) -> dict:
    """One controller cycle over a measurement payload.

    ``meas`` carries per-bus magnitudes as V_<bus> plus the meta keys
    ``valid`` and ``meas_t`` (the time the data was measured, which lags
    ``now`` under communication delay). Returns the command payload; a
    tap_cmd of 0 and absent q keys mean "change nothing".
    """
    if meas.get("valid", 1.0) != 1.0:
        return {"tap_cmd": 0.0}
    if now is None:
        now = meas.get("meas_t", 0.0)
    meas_t = meas.get("meas_t", now)

    volts = {b: meas[f"V_{b}"] for b in state.buses}
    v_max = max(volts.values())
    v_min = min(volts.values())
    spread = v_max - v_min
    band = state.upper_pu - state.lower_pu
    commands: dict[str, float] = {}
    state.infeasible = False

    # range stage: one sensitivity-based gradient step per cycle
    if spread > band and _fresh(meas_t, state.last_q_cmd_t):
        hi_bus = max(volts, key=lambda b: (volts[b], b))
        lo_bus = min(volts, key=lambda b: (volts[b], b))
        moved = False
        dg_hi = state.nearest_dg.get(hi_bus)
        dg_lo = state.nearest_dg.get(lo_bus)
        if dg_hi is not None:
            moved |= _move_q(state, dg_hi, -state.q_step_pu, commands)
        if dg_lo is not None and dg_lo != dg_hi:
            moved |= _move_q(state, dg_lo, +state.q_step_pu, commands)
        if moved:
            state.last_q_cmd_t = now
        else:
            state.infeasible = True  # all DG reactive power saturated

    # level stage: tap only on an actual limit violation
    tap_cmd = 0.0
    if _fresh(meas_t, state.last_tap_cmd_t):
        over = v_max > state.upper_pu
        under = v_min < state.lower_pu
        if over and under:
            state.infeasible = True
            tap_cmd = 1.0  # supply security first: fix the under-voltage
        elif over:
            tap_cmd = -1.0
        elif under:
            tap_cmd = 1.0
        if tap_cmd != 0.0:
            state.last_tap_cmd_t = now
    commands["tap_cmd"] = tap_cmd
    if state.infeasible:
        commands["infeasible"] = 1.0
    return commands


def _fresh(meas_t: float, last_cmd_t: float | None) -> bool:
    return last_cmd_t is None or meas_t > last_cmd_t


def _move_q(state: CVCUController, dg: str, delta: float, commands: dict) -> bool:
    q_min, q_max = state.dg_q_limits.get(dg, (-0.3, 0.3))
    old = state.q_set.get(dg, 0.0)
    new = min(max(old + delta, q_min), q_max)
    if new == old:
        return False
    state.q_set[dg] = new
    commands[f"q_dg_{dg}"] = new
    return True


# ------------------------------------------------- load-bank auto tuner


@dataclass
class RLCTuner:
    """Coarse/fine tuner driving the net grid power exchange to zero.

    Coarse phase switches in the largest fixed bank that does not
    overshoot the measured export; fine phase applies one proportional
    conductance correction per cycle. Done once the export is inside the
    tolerance band around zero.
    """

    banks_w: list[float]
    u_nominal: float  # V RMS, fallback when no measured RMS is given
    coarse_threshold_w: float = 600.0
    tolerance: float = 0.03
    p_reference_w: float = 5800.0
    g_min: float = 0.0
    g_max: float = float("inf")

    phase: str = "coarse"  # coarse -> fine -> done
    switched_mask: int = 0
    fine_g: float = 0.0
    steps: int = 0
    transitions: list[tuple[int, str]] = field(default_factory=list)
    _prev_abs_p: float | None = None
    _worse_count: int = 0

    def on_exchange(self, tick: int, t: float, meas: dict) -> dict:
        return rlc_tuner_step(meas["P_grid"], self, u_rms=meas.get("U_rms"))


def rlc_tuner_step(p_grid_w: float, state: RLCTuner, u_rms: float | None = None) -> dict:
    """One tuner step on a full-fundamental-window power measurement."""
    state.steps += 1
    u = state.u_nominal if u_rms is None else u_rms
    p_abs = abs(p_grid_w)

    if state.phase == "coarse":
        if p_abs <= state.coarse_threshold_w:
            _transition(state, "fine")
        else:
            idx = _largest_fitting_bank(state, p_grid_w)
            if idx is None:
                _transition(state, "fine")  # nothing fits any more
            else:
                state.switched_mask |= 1 << idx
                return {"bank_on": float(idx)}

    if state.phase == "fine":
        if p_abs <= state.tolerance * state.p_reference_w:
            _transition(state, "done")
            return {"done": 1.0}
        if state._prev_abs_p is not None and p_abs > state._prev_abs_p:
            state._worse_count += 1
            if state._worse_count >= 5:
                raise TuningDiverged(
                    f"|P_grid| grew for {state._worse_count} consecutive fine steps"
                )
        else:
            state._worse_count = 0
        state._prev_abs_p = p_abs
        state.fine_g = min(max(state.fine_g + p_grid_w / (u * u), state.g_min), state.g_max)
        return {"fine_g": state.fine_g}

    return {"done": 1.0}


def _transition(state: RLCTuner, phase: str) -> None:
    state.phase = phase
    state.transitions.append((state.steps, phase))


def _largest_fitting_bank(state: RLCTuner, p_grid_w: float) -> int | None:
    best = None
    for i, size in enumerate(state.banks_w):
        if state.switched_mask & (1 << i):
            continue
        if size <= p_grid_w and (best is None or size > state.banks_w[best]):
            best = i
    return best
