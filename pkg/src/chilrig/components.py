"""Electrical component library: grid source with dip profiles, PV array,
split DC link, average-model inverter, tap-changer transformer, radial
feeder description and switchable RLC load banks.

Phase convention used everywhere: phase 1 is sqrt(2)*U_rms*sin(2*pi*f0*t),
phase 2 lags by 120 degrees, phase 3 by 240 degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .engine import NumericalDivergence

TWO_PI = 2.0 * math.pi
SQRT2 = math.sqrt(2.0)

# phase offsets (rad): L1, L2 lagging 120 deg, L3 lagging 240 deg
PHASE_OFFSETS = (0.0, -TWO_PI / 3.0, -2.0 * TWO_PI / 3.0)


# ------------------------------------------------------------ grid source


@dataclass
class GridSource:
    """Ideal three-phase voltage source with per-phase dip residuals."""

    u_rms: float  # line-to-neutral, V
    f0: float = 50.0  # Hz
    residual: tuple[float, float, float] = (1.0, 1.0, 1.0)  # p.u., 1.0 healthy

    def __post_init__(self):
        if not (self.f0 > 0.0):
            raise ValueError(f"f0 must be > 0, got {self.f0!r}")
        self.set_residual(self.residual)

    def set_residual(self, residual) -> None:
        r = tuple(float(x) for x in residual)
        if len(r) != 3 or any(not (0.0 <= x <= 1.5) for x in r):
            raise ValueError(f"residual must be three values in [0, 1.5], got {r}")
        self.residual = r

    def clear_fault(self) -> None:
        self.residual = (1.0, 1.0, 1.0)


def grid_voltage(source: GridSource, t: float) -> tuple[float, float, float]:
    """Instantaneous line-to-neutral voltages at time t.

    Phase k is residual_k * sqrt(2) * u_rms * sin(2*pi*f0*t + phi_k); dip
    residuals act multiplicatively on the amplitude.
    """
    peak = SQRT2 * source.u_rms
    w = TWO_PI * source.f0
    return tuple(
        source.residual[k] * peak * math.sin(w * t + PHASE_OFFSETS[k])
        for k in range(3)
    )


# -------------------------------------------------------------- PV array


@dataclass
class PVArray:
    """Single-exponential diode I-V curve anchored at standard test conditions.

    The curve shape parameter is fitted so the maximum power point sits at
    (v_mpp, p_stc/v_mpp) exactly at STC; the photocurrent scales linearly
    with irradiance and the voltage axis shifts with temperature.
    """

    p_stc: float  # W at 1000 W/m2, 25 degC
    v_mpp: float  # V at STC
    v_oc_ratio: float = 1.25  # v_oc / v_mpp at STC
    irradiance: float = 1000.0  # W/m2
    temperature: float = 25.0  # degC
    temp_coeff_voc: float = -0.003  # fractional v_oc change per K

    def __post_init__(self):
        if not (self.p_stc > 0.0 and self.v_mpp > 0.0 and self.v_oc_ratio > 1.0):
            raise ValueError("p_stc, v_mpp must be > 0 and v_oc_ratio > 1")
        # MPP condition for i = i_sc*(1 - (e^(v/a)-1)/(e^(voc/a)-1)) reduces
        # to ln(1+x) = (r-1)*x with x = v_mpp/a, r = voc/vmpp; bisect for x.
        r = self.v_oc_ratio
        f = lambda x: math.log1p(x) - (r - 1.0) * x
        lo, hi = 1e-9, 80.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if f(mid) > 0.0:
                lo = mid
            else:
                hi = mid
        x = 0.5 * (lo + hi)
        self._shape_a = self.v_mpp / x
        self._voc_stc = self.v_oc_ratio * self.v_mpp
        denom = math.expm1(self._voc_stc / self._shape_a)
        i_mpp = self.p_stc / self.v_mpp
        self._isc_stc = i_mpp / (1.0 - math.expm1(self.v_mpp / self._shape_a) / denom)
        self._denom = denom

    @property
    def v_oc(self) -> float:
        """Open-circuit voltage at the present temperature."""
        return self._voc_stc * self._temp_factor()

    def _temp_factor(self) -> float:
        return 1.0 + self.temp_coeff_voc * (self.temperature - 25.0)


def pv_current(pv: PVArray, v_dc: float) -> float:
    """Array current at DC voltage v_dc (A, never negative)."""
    if v_dc < 0.0:
        raise ValueError(f"v_dc must be >= 0, got {v_dc!r}")
    g = pv.irradiance / 1000.0
    v_eq = v_dc / pv._temp_factor()  # map back onto the STC voltage axis
    i = g * pv._isc_stc * (1.0 - math.expm1(v_eq / pv._shape_a) / pv._denom)
    return max(i, 0.0)


def pv_power(pv: PVArray, v_dc: float) -> float:
    return v_dc * pv_current(pv, v_dc)


# --------------------------------------------------------------- DC link


@dataclass
class DCLink:
    """Symmetric split DC link; the midpoint is the neutral reference."""

    capacitance: float  # F
    v_dc: float  # rail-to-rail, V

    def __post_init__(self):
        if not (self.capacitance > 0.0):
            raise ValueError("capacitance must be > 0")

    @property
    def v_plus(self) -> float:
        return 0.5 * self.v_dc

    @property
    def v_minus(self) -> float:
        return -0.5 * self.v_dc


def dclink_step(link: DCLink, p_in: float, p_out: float, dt: float) -> DCLink:
    """Energy update of the capacitor: 0.5*C*v^2 changes by (p_in-p_out)*dt.

    The update is exact for constant powers over the step; a fully drained
    link clamps at 0 V.
    """
    if not (dt > 0.0):
        raise ValueError("dt must be > 0")
    v_sq = link.v_dc * link.v_dc + 2.0 * dt * (p_in - p_out) / link.capacitance
    if not math.isfinite(v_sq):
        raise NumericalDivergence(f"DC link voltage diverged (v^2 = {v_sq!r})")
    return DCLink(capacitance=link.capacitance, v_dc=math.sqrt(max(v_sq, 0.0)))


# ------------------------------------------------------ average inverter


@dataclass
class InverterAvg:
    """Average converter model: controlled current source with first-order
    tracking of a dq current reference and a hard magnitude limit."""

    p_rated: float  # W
    i_rated: float  # A RMS per phase
    i_limit_pu: float = 1.2
    bandwidth: float = TWO_PI * 100.0  # rad/s current-tracking bandwidth
    i_d: float = 0.0  # tracked state, A RMS
    i_q: float = 0.0

    def limit_a(self) -> float:
        return self.i_limit_pu * self.i_rated


def saturate_dq(i_d: float, i_q: float, limit: float) -> tuple[float, float]:
    """Scale a dq pair radially so its magnitude never exceeds ``limit``."""
    mag = math.hypot(i_d, i_q)
    if mag <= limit or mag == 0.0:
        return i_d, i_q
    s = limit / mag
    return i_d * s, i_q * s


def inverter_output(
    inv: InverterAvg, i_ref_dq: tuple[float, float], grid_angle: float, dt: float
) -> tuple[float, float, float]:
    """Advance the current tracker one dt and emit instantaneous phase currents.

    The reference is magnitude-saturated before tracking, so the emitted
    current can never exceed the limit: the tracker output is a convex
    combination of the previous state and the saturated reference.
    """
    lim = inv.limit_a()
    ref_d, ref_q = saturate_dq(i_ref_dq[0], i_ref_dq[1], lim)
    a = inv.bandwidth * dt / (1.0 + inv.bandwidth * dt)  # backward Euler
    inv.i_d += a * (ref_d - inv.i_d)
    inv.i_q += a * (ref_q - inv.i_q)
    inv.i_d, inv.i_q = saturate_dq(inv.i_d, inv.i_q, lim)  # absorb float dust
    peak_d, peak_q = SQRT2 * inv.i_d, SQRT2 * inv.i_q
    return tuple(
        peak_d * math.sin(grid_angle + off) + peak_q * math.cos(grid_angle + off)
        for off in PHASE_OFFSETS
    )


# ------------------------------------------------------- tap transformer


@dataclass
class TapTransformer:
    """Discrete-step voltage ratio; ratio(tap) = 1 + tap*step, tap clamped."""

    step_pu: float = 0.015
    tap_min: int = -9
    tap_max: int = 9
    tap: int = 0

    def __post_init__(self):
        if self.tap_min > self.tap_max:
            raise ValueError("tap_min must be <= tap_max")
        self.tap = self._clamp(self.tap)

    def _clamp(self, tap: int) -> int:
        return max(self.tap_min, min(self.tap_max, int(tap)))

    def shift(self, delta: int) -> int:
        """Move the tap by delta steps, clamping at the bounds."""
        self.tap = self._clamp(self.tap + delta)
        return self.tap


def tap_ratio(xfmr: TapTransformer) -> float:
    return 1.0 + xfmr._clamp(xfmr.tap) * xfmr.step_pu


# -------------------------------------------------------- RLC load banks


@dataclass
class LoadBank:
    """One fixed switchable load, rated at the bank's nominal voltage."""

    p_w: float
    q_var: float = 0.0
    switched: bool = False


@dataclass
class RLCLoadBank:
    """Coarse switchable banks plus a continuously adjustable fine element.

    Fixed banks scale with (v/v_nominal)^2 (constant-impedance behaviour);
    the fine element is a conductance g with P = g * v_rms^2.
    """

    banks: list[LoadBank]
    u_nominal: float  # V RMS line-to-neutral
    g_fine: float = 0.0  # S (effective, three-phase lumped)
    g_min: float = 0.0
    g_max: float = float("inf")

    def __post_init__(self):
        if not (self.u_nominal > 0.0):
            raise ValueError("u_nominal must be > 0")
        self.set_fine(self.g_fine)

    def set_fine(self, g: float) -> float:
        self.g_fine = min(max(float(g), self.g_min), self.g_max)
        return self.g_fine

    def switch(self, index: int, on: bool = True) -> None:
        self.banks[index].switched = bool(on)

    def switched_mask(self) -> int:
        return sum(1 << i for i, b in enumerate(self.banks) if b.switched)


def rlc_total_load(bank: RLCLoadBank, v_rms: float) -> tuple[float, float]:
    """Total (P, Q) drawn at voltage v_rms: switched banks scaled by
    (v_rms/v_nominal)^2 plus the fine conductance term."""
    if v_rms < 0.0:
        raise ValueError("v_rms must be >= 0")
    scale = (v_rms / bank.u_nominal) ** 2
    p = sum(b.p_w for b in bank.banks if b.switched) * scale
    q = sum(b.q_var for b in bank.banks if b.switched) * scale
    return p + bank.g_fine * v_rms * v_rms, q


# --------------------------------------------------- radial feeder model


@dataclass
class FeederLine:
    from_bus: str
    to_bus: str
    r_pu: float
    x_pu: float

    def __post_init__(self):
        if self.r_pu < 0.0 or self.x_pu < 0.0:
            raise ValueError("line impedances must be >= 0")

    @property
    def z(self) -> complex:
        return complex(self.r_pu, self.x_pu)


@dataclass
class DGUnit:
    """Constant-P distributed generator with a controllable Q setpoint."""

    p_pu: float
    q_pu: float = 0.0
    q_min: float = -0.3
    q_max: float = 0.3

    def set_q(self, q: float) -> float:
        self.q_pu = min(max(float(q), self.q_min), self.q_max)
        return self.q_pu


@dataclass
class FeederModel:
    """Radial positive-sequence feeder: tree of lines fed from one root."""

    buses: list[str]  # non-root buses, declaration order
    lines: list[FeederLine]
    loads: dict[str, complex] = field(default_factory=dict)  # S drawn, p.u.
    dgs: dict[str, DGUnit] = field(default_factory=dict)
    slack_v_pu: float = 1.0
    root: str = "root"

    def injection(self, bus: str) -> complex:
        """Net complex power drawn at a bus (load minus DG output)."""
        s = self.loads.get(bus, 0j)
        dg = self.dgs.get(bus)
        if dg is not None:
            s = s - complex(dg.p_pu, dg.q_pu)
        return s
