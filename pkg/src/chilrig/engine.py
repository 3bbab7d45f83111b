"""Deterministic fixed-timestep engine.

The engine advances a plant one tick at a time, fires scheduled events,
exchanges frames with controller bindings at their cycle boundaries and
records a trace. Simulated time is decoupled from wall-clock time unless
real-time pacing is requested.

Time is always recomputed as tick*dt, never accumulated, so recorded
timestamps carry no floating-point drift.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence


class NumericalDivergence(ArithmeticError):
    """A simulation state became non-finite (unstable dt or parameters)."""


class InvalidEvent(ValueError):
    """Event outside the run window or with an unknown action."""


@dataclass
class SimClock:
    """Integer tick counter with immutable step size; t is derived."""

    dt: float
    tick: int = 0

    def __post_init__(self):
        if not (self.dt > 0.0):
            raise ValueError(f"dt must be > 0, got {self.dt!r}")

    @property
    def t(self) -> float:
        return self.tick * self.dt

    def advance(self) -> None:
        self.tick += 1


@dataclass(frozen=True)
class SignalFrame:
    """Named instantaneous signals measured at one tick."""

    tick: int
    t: float
    signals: dict[str, float]


@dataclass(frozen=True)
class Event:
    """Scheduled plant mutation; fires once at the first tick with t >= fire_t."""

    fire_t: float
    action: str  # "fault_apply" | "fault_clear" | "param_set"
    params: dict = field(default_factory=dict)

    _ACTIONS = ("fault_apply", "fault_clear", "param_set")

    def __post_init__(self):
        if self.action not in self._ACTIONS:
            raise InvalidEvent(f"unknown event action {self.action!r}")


def schedule(events: Iterable[Event], duration: float | None = None) -> list[Event]:
    """Stable sort of events by fire time; ties keep declaration order."""
    evs = list(events)
    for ev in evs:
        if ev.fire_t < 0.0:
            raise InvalidEvent(f"event at t={ev.fire_t:g} is before the run start")
        if duration is not None and ev.fire_t > duration:
            raise InvalidEvent(
                f"event at t={ev.fire_t:g} is after the run end ({duration:g} s)"
            )
    return sorted(evs, key=lambda e: e.fire_t)


class Trace:
    """Columnar recording of SignalFrames taken every ``decimation`` ticks."""

    def __init__(self, names: Sequence[str], dt: float, decimation: int = 1):
        if decimation < 1:
            raise ValueError("decimation must be >= 1")
        self.names = tuple(names)
        self.dt = dt
        self.decimation = decimation
        self._ticks: list[int] = []
        self._rows: list[tuple[float, ...]] = []

    def append(self, tick: int, values: tuple[float, ...]) -> None:
        self._ticks.append(tick)
        self._rows.append(values)

    def __len__(self) -> int:
        return len(self._rows)

    @property
    def ticks(self) -> list[int]:
        return list(self._ticks)

    def times(self) -> list[float]:
        return [tick * self.dt for tick in self._ticks]

    def column(self, name: str) -> list[float]:
        i = self.names.index(name)
        return [row[i] for row in self._rows]

    def frame(self, row: int) -> SignalFrame:
        tick = self._ticks[row]
        return SignalFrame(
            tick=tick, t=tick * self.dt, signals=dict(zip(self.names, self._rows[row]))
        )

    def to_csv(self) -> str:
        """CSV with header ``tick,t,<names...>``, 9 significant digits."""
        lines = ["tick,t," + ",".join(self.names)]
        for tick, row in zip(self._ticks, self._rows):
            t = tick * self.dt
            vals = ",".join(f"{v:.9g}" for v in row)
            lines.append(f"{tick},{t:.9g},{vals}")
        return "\n".join(lines) + "\n"


@dataclass
class RunResult:
    """Trace plus the controller and event activity of one run."""

    trace: Trace
    exchanges: list[dict]
    fired_events: list[dict]
    controller_disconnected: bool = False


class Engine:
    """Single-threaded sequential engine; one instance drives one run.

    The per-tick order is fixed: due events fire, the plant advances one
    dt (sources, converter chain, network solve, measurements), the frame
    is recorded, and on controller-cycle boundaries the fresh frame is
    exchanged for a control frame that takes effect from the next tick
    (zero-order hold in between).
    """

    def __init__(
        self,
        plant,
        dt: float,
        duration: float,
        events: Iterable[Event] = (),
        binding=None,
        decimation: int = 1,
        realtime: bool = False,
    ):
        self.plant = plant
        self.clock = SimClock(dt=dt)
        self.total_ticks = _ticks_for(duration, dt)
        self.events = schedule(events, duration)
        self.binding = binding
        self.decimation = decimation
        self.realtime = realtime
        self._next_event = 0
        self._fired: list[dict] = []

    def run(self) -> RunResult:
        plant, clock = self.plant, self.clock
        self._fire_due_events(0.0)
        names, values = plant.initialize()
        trace = Trace(names, clock.dt, self.decimation)
        trace.append(0, values)
        if self.total_ticks > 0:
            self._maybe_exchange(0, 0.0, names, values)
        t_wall0 = time.perf_counter()
        for tick in range(1, self.total_ticks + 1):
            t = tick * clock.dt
            self._fire_due_events(t)
            values = plant.advance(clock.dt, t)
            _check_finite(values, tick, names)
            clock.advance()
            if tick % self.decimation == 0:
                trace.append(tick, values)
            if tick < self.total_ticks:
                self._maybe_exchange(tick, t, names, values)
            if self.realtime:
                _pace(t_wall0, t)
        exchanges = self.binding.log if self.binding is not None else []
        disconnected = bool(self.binding is not None and self.binding.disconnected)
        if self.binding is not None:
            self.binding.close()
        return RunResult(
            trace=trace,
            exchanges=exchanges,
            fired_events=list(self._fired),
            controller_disconnected=disconnected,
        )

    def step(self, controls: dict | None = None) -> SignalFrame:
        """Advance exactly one dt and return the post-step measurements.

        ``controls`` (when given) is applied to the plant before the
        advance, exactly once: command-type entries are consumed, not held.
        """
        if self.clock.tick == 0 and not hasattr(self, "_names"):
            self._fire_due_events(0.0)
            self._names, _ = self.plant.initialize()
        if controls is not None:
            self.plant.apply_controls(controls, self.clock.t)
        t_next = (self.clock.tick + 1) * self.clock.dt
        self._fire_due_events(t_next)
        values = self.plant.advance(self.clock.dt, t_next)
        _check_finite(values, self.clock.tick + 1, self._names)
        self.clock.advance()
        return SignalFrame(
            tick=self.clock.tick,
            t=self.clock.t,
            signals=dict(zip(self._names, values)),
        )

    # -- internals ----------------------------------------------------

    def _fire_due_events(self, t: float) -> None:
        while self._next_event < len(self.events):
            ev = self.events[self._next_event]
            if ev.fire_t > t:
                break
            self.plant.apply_event(ev)
            self._fired.append({"t": t, "fire_t": ev.fire_t, "action": ev.action})
            self._next_event += 1

    def _maybe_exchange(self, tick, t, names, values) -> None:
        b = self.binding
        if b is None or tick % b.cycle_ticks != 0:
            return
        controls = b.exchange(tick, t, names, values)
        if controls:
            self.plant.apply_controls(controls, t)


def run(plant, dt, duration, events=(), binding=None, decimation=1, realtime=False) -> Trace:
    """Run a plant from t=0 to t=duration and return its Trace."""
    result = Engine(
        plant, dt, duration, events, binding, decimation, realtime
    ).run()
    return result.trace


def _ticks_for(duration: float, dt: float) -> int:
    ticks = duration / dt
    n = round(ticks)
    if abs(ticks - n) > 1e-6:
        raise ValueError(
            f"duration {duration:g} s is not an integer number of {dt:g} s ticks"
        )
    return int(n)


def _check_finite(values, tick, names) -> None:
    for name, v in zip(names, values):
        if not math.isfinite(v):
            raise NumericalDivergence(
                f"signal {name} is {v!r} at tick {tick}; "
                "dt or plant parameters are numerically unstable"
            )


def _pace(t_wall0: float, t_sim: float) -> None:
    lag = t_sim - (time.perf_counter() - t_wall0)
    if lag > 0:
        time.sleep(lag)
