"""Scenario definitions, sequencing and pass/fail evaluation.

A test case is a JSON document with the ``chil-rig/v1`` schema. Loading
fills documented defaults, rejects unknown keys (strictness is part of
the certification-style contract) and validates every structural
invariant up front. Runs are deterministic: the same case produces
byte-identical traces and reports on every execution.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    NeverReached,
    WindowTooShort,
    band_check,
    rise_time,
    sliding_positive_sequence,
    thd,
)
from .components import (
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
)
from .controllers import CVCUController, LVRTController, RLCTuner
from .engine import Engine, RunResult, Event
from .plants import DipRigPlant, FeederRigPlant, ResonantLoadRigPlant
from .protocol import ReferenceBinding, SocketBinding, TimeoutPolicy

SCHEMA_ID = "chil-rig/v1"
REPORT_SCHEMA_ID = "chil-rig/report/v1"
SCENARIOS = ("lvrt", "cvcu", "rlctune")


class CaseParseError(ValueError):
    """Case file is not valid JSON; carries line/column context."""


class ValidationError(ValueError):
    """Case violates a structural invariant; the message names it."""


@dataclass(frozen=True)
class ControllerSpec:
    kind: str  # "reference" | "external"
    cycle: float  # s, integer multiple of dt
    endpoint: str | None
    timeout: float
    timeout_action: str  # "hold" | "abort"
    params: dict


@dataclass(frozen=True)
class TestCase:
    name: str
    scenario: str
    dt: float
    duration: float
    decimation: int
    seed: int
    controller: ControllerSpec
    plant: dict
    events: list[dict]
    evaluation: dict
    normalized: dict = field(repr=False)  # fully defaulted raw document

    @property
    def config_hash(self) -> str:
        return config_hash(self.normalized)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(normalized: dict) -> str:
    return hashlib.sha256(canonical_json(normalized).encode("utf-8")).hexdigest()


# ------------------------------------------------------------- loading


def load_testcase(path) -> TestCase:
    """Read, default and validate a case file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseParseError(
            f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    return parse_testcase(raw)


def parse_testcase(raw: dict) -> TestCase:
    """Apply defaults and validate a raw case document."""
    if not isinstance(raw, dict):
        raise ValidationError("case document must be a JSON object")
    if raw.get("schema") != SCHEMA_ID:
        raise ValidationError(
            f"schema must be {SCHEMA_ID!r}, got {raw.get('schema')!r}"
        )
    scenario = raw.get("scenario")
    if scenario not in SCENARIOS:
        raise ValidationError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")

    defaults = _case_defaults(scenario)
    merged = _merge_strict(defaults, raw, path="case")
    doc = {"schema": SCHEMA_ID, "scenario": scenario, **merged}
    _fill_derived_defaults(doc, scenario)
    _validate_case(doc)

    ctl = doc["controller"]
    return TestCase(
        name=doc["name"],
        scenario=scenario,
        dt=float(doc["dt"]),
        duration=float(doc["duration"]),
        decimation=int(doc["decimation"]),
        seed=int(doc["seed"]),
        controller=ControllerSpec(
            kind=ctl["kind"],
            cycle=float(ctl["cycle"]),
            endpoint=ctl["endpoint"],
            timeout=float(ctl["timeout"]),
            timeout_action=ctl["timeout_action"],
            params=dict(ctl["params"]),
        ),
        plant=doc["plant"],
        events=doc["events"],
        evaluation=doc["evaluation"],
        normalized=doc,
    )


def _merge_strict(defaults, given, path):
    """Recursive defaulting; unknown keys are rejected, scalar types must
    match the default's type (int is acceptable where float is expected)."""
    out = {}
    for key, dflt in defaults.items():
        if key == "__open__":
            continue
        if key in given:
            out[key] = _merge_value(dflt, given[key], f"{path}.{key}")
        elif dflt is _REQUIRED:
            raise ValidationError(f"{path}.{key} is required")
        else:
            out[key] = json.loads(json.dumps(dflt))  # deep copy of the default
    allowed = set(defaults) | ({"schema", "scenario"} if path == "case" else set())
    unknown = set(given) - allowed
    if unknown:
        raise ValidationError(f"unknown key(s) under {path}: {sorted(unknown)}")
    return out


def _merge_value(dflt, value, path):
    if isinstance(dflt, dict) and not dflt.get("__open__", False):
        if not isinstance(value, dict):
            raise ValidationError(f"{path} must be an object")
        return _merge_strict(dflt, value, path)
    if isinstance(dflt, dict):  # open mapping (e.g. loads keyed by bus)
        if not isinstance(value, dict):
            raise ValidationError(f"{path} must be an object")
        return json.loads(json.dumps(value))
    if isinstance(dflt, bool) or isinstance(value, bool):
        raise ValidationError(f"{path} must not be a boolean")
    if isinstance(dflt, float) and isinstance(value, (int, float)):
        return float(value)
    if isinstance(dflt, int) and isinstance(value, int):
        return value
    if dflt is None or isinstance(dflt, str):
        if value is not None and not isinstance(value, str):
            raise ValidationError(f"{path} must be a string")
        return value
    if isinstance(dflt, list):
        if not isinstance(value, list):
            raise ValidationError(f"{path} must be an array")
        return json.loads(json.dumps(value))
    if dflt is _REQUIRED:
        return json.loads(json.dumps(value))
    raise ValidationError(f"{path}: unsupported value {value!r}")


class _Required:
    pass


_REQUIRED = _Required()


def _case_defaults(scenario: str) -> dict:
    common = {
        "name": f"{scenario}-case",
        "decimation": 1,
        "controller": {
            "kind": "reference",
            "endpoint": None,
            "timeout": 5.0,
            "timeout_action": "hold",
            "params": {"__open__": True},
        },
        "events": [],
    }
    if scenario == "lvrt":
        return {
            **common,
            "dt": 5e-5,
            "duration": 0.6,
            "seed": 1,
            "controller": {**common["controller"], "cycle": 5e-5},
            "plant": {
                "grid": {"u_rms": 230.0, "f0": 50.0},
                "pv": {
                    "p_stc": 10000.0,
                    "v_mpp": 700.0,
                    "v_oc_ratio": 1.25,
                    "irradiance": 1000.0,
                    "temperature": 25.0,
                },
                "dclink": {"capacitance": 0.002},
                "inverter": {"p_rated": 0.0, "i_limit_pu": 1.2, "bandwidth_hz": 100.0},
            },
            "evaluation": {
                "upper_pu": 1.2,
                "lower_pu": 0.9,
                "settle_s": 0.06,
                "thd_harmonics": 49,
                "rise_low_frac": 0.1,
                "rise_high_frac": 0.9,
            },
        }
    if scenario == "cvcu":
        return {
            **common,
            "dt": 0.1,
            "duration": 300.0,
            "seed": 42,
            "controller": {**common["controller"], "cycle": 7.5},
            "plant": {
                "slack_v_pu": 1.0,
                "transformer": {
                    "tap": 0,
                    "tap_min": -9,
                    "tap_max": 9,
                    "step_pu": 0.015,
                },
                "feeder": {
                    "buses": _REQUIRED,
                    "lines": _REQUIRED,
                    "loads": {"__open__": True},
                    "dgs": {"__open__": True},
                },
                "load_noise": {"amplitude": 0.0},
            },
            "evaluation": {
                "delays": [0.0, 60.0],
                "overvoltage_bounds_s": [[0.0, 15.0], [45.0, 70.0]],
            },
        }
    return {
        **common,
        "dt": 1e-3,
        "duration": 1.0,
        "seed": 7,
        "controller": {**common["controller"], "cycle": 0.1},
        "plant": {
            "grid": {"u_rms": 230.0, "f0": 50.0},
            "pv": {
                "p_stc": 5800.0,
                "v_mpp": 700.0,
                "v_oc_ratio": 1.25,
                "irradiance": 1000.0,
                "temperature": 25.0,
            },
            "dclink": {"capacitance": 0.002},
            "inverter": {"p_rated": 0.0, "i_limit_pu": 1.2, "bandwidth_hz": 100.0},
            "load_banks": [[4000.0, 0.0], [2000.0, 0.0], [1000.0, 0.0], [500.0, 0.0], [250.0, 0.0]],
            "fine_g_max": 0.0,
        },
        "evaluation": {
            "coarse_max_w": 600.0,
            "final_max_w": 0.0,
            "max_steps": 15,
        },
    }


def _fill_derived_defaults(doc: dict, scenario: str) -> None:
    """Defaults that depend on other fields."""
    plant = doc["plant"]
    params = doc["controller"]["params"]
    if scenario in ("lvrt", "rlctune"):
        pv = plant["pv"]
        p_mpp = pv["p_stc"] * pv["irradiance"] / 1000.0
        if plant["inverter"]["p_rated"] == 0.0:
            plant["inverter"]["p_rated"] = pv["p_stc"]
        params.setdefault("p_ref_w", p_mpp)
        v_mpp_eff = pv["v_mpp"] * (1.0 - 0.003 * (pv["temperature"] - 25.0))
        params.setdefault("v_dc_ref", v_mpp_eff)
        params.setdefault("k_dc", 20.0)
    if scenario == "lvrt":
        params.setdefault("k_rt", 2.0)
        params.setdefault("dip_threshold_pu", 0.9)
        params.setdefault("slew_pu_per_s", 30.0)
        params.setdefault("support_mode", "reactive")
    if scenario == "rlctune":
        u = plant["grid"]["u_rms"]
        if plant["fine_g_max"] == 0.0:
            plant["fine_g_max"] = 600.0 / (u * u)
        params.setdefault("coarse_threshold_w", 600.0)
        params.setdefault("tolerance", 0.03)
        params.setdefault("p_reference_w", params["p_ref_w"])
        ev = doc["evaluation"]
        if ev["final_max_w"] == 0.0:
            ev["final_max_w"] = params["tolerance"] * params["p_reference_w"]
    if scenario == "cvcu":
        params.setdefault("upper_pu", 1.02)
        params.setdefault("lower_pu", 0.94)
        params.setdefault("q_step_pu", 0.05)


def _validate_case(doc: dict) -> None:
    dt, duration = doc["dt"], doc["duration"]
    if not (dt > 0.0):
        raise ValidationError("dt must be > 0")
    if not (duration > 0.0):
        raise ValidationError("duration must be > 0")
    if abs(duration / dt - round(duration / dt)) > 1e-6:
        raise ValidationError("duration is not an integer number of dt ticks")
    if doc["decimation"] < 1:
        raise ValidationError("decimation must be >= 1")
    ctl = doc["controller"]
    if ctl["kind"] not in ("reference", "external"):
        raise ValidationError("controller kind must be reference or external")
    ratio = ctl["cycle"] / dt
    if abs(ratio - round(ratio)) > 1e-6 or round(ratio) < 1:
        raise ValidationError("controller cycle is not an integer multiple of dt")
    if ctl["timeout_action"] not in ("hold", "abort"):
        raise ValidationError("controller timeout_action must be hold or abort")
    for ev in doc["events"]:
        if set(ev) - {"t", "action", "residual", "path", "value"}:
            raise ValidationError(f"unknown event key(s) in {sorted(ev)}")
        if "t" not in ev or "action" not in ev:
            raise ValidationError("events need t and action")
        if not (0.0 <= ev["t"] <= duration):
            raise ValidationError(
                f"event at t={ev['t']!r} lies outside the run window"
            )
        if ev["action"] not in ("fault_apply", "fault_clear", "param_set"):
            raise ValidationError(f"unknown event action {ev['action']!r}")
        if ev["action"] == "fault_apply" and len(ev.get("residual", ())) != 3:
            raise ValidationError("fault_apply needs a residual triple")
        if ev["action"] == "param_set" and ("path" not in ev or "value" not in ev):
            raise ValidationError("param_set needs path and value")
    ev = doc["evaluation"]
    if "upper_pu" in ev and not (ev["upper_pu"] > ev["lower_pu"]):
        raise ValidationError("evaluation upper limit must exceed the lower limit")
    params = doc["controller"]["params"]
    if "upper_pu" in params and not (params["upper_pu"] > params["lower_pu"]):
        raise ValidationError("controller upper limit must exceed the lower limit")
    if "feeder" in doc["plant"]:
        _validate_feeder(doc)
    if "delays" in ev:
        if len(ev["delays"]) != len(ev["overvoltage_bounds_s"]):
            raise ValidationError("one overvoltage bound pair per delay is required")


def _validate_feeder(doc: dict) -> None:
    feeder = doc["plant"]["feeder"]
    buses = feeder["buses"]
    if len(set(buses)) != len(buses) or "root" in buses:
        raise ValidationError("feeder buses must be unique and not named root")
    known = {"root", *buses}
    for line in feeder["lines"]:
        if set(line) != {"from", "to", "r_pu", "x_pu"}:
            raise ValidationError("feeder lines need from/to/r_pu/x_pu")
        if line["from"] not in known or line["to"] not in known:
            raise ValidationError(f"line references unknown bus {line!r}")
    for bus in feeder["loads"]:
        if bus not in buses:
            raise ValidationError(f"load references unknown bus {bus!r}")
        if len(feeder["loads"][bus]) != 2:
            raise ValidationError(f"load at {bus!r} must be a [p, q] pair")
    for bus, dg in feeder["dgs"].items():
        if bus not in buses:
            raise ValidationError(f"DG references unknown bus {bus!r}")
        if set(dg) - {"p_pu", "q_pu", "q_min", "q_max"}:
            raise ValidationError(f"unknown DG key(s) at {bus!r}")
    for ev in doc["events"]:
        if ev["action"] == "param_set":
            parts = ev["path"].split(".")
            if parts[0] in ("loads", "dgs") and parts[1] not in buses:
                raise ValidationError(
                    f"event path {ev['path']!r} references an unknown bus"
                )


# ------------------------------------------------------- construction


def build_plant(case: TestCase):
    p = case.plant
    if case.scenario == "lvrt":
        source = GridSource(u_rms=p["grid"]["u_rms"], f0=p["grid"]["f0"])
        pv = PVArray(
            p_stc=p["pv"]["p_stc"],
            v_mpp=p["pv"]["v_mpp"],
            v_oc_ratio=p["pv"]["v_oc_ratio"],
            irradiance=p["pv"]["irradiance"],
            temperature=p["pv"]["temperature"],
        )
        dclink = DCLink(
            capacitance=p["dclink"]["capacitance"],
            v_dc=case.controller.params["v_dc_ref"],
        )
        inverter = InverterAvg(
            p_rated=p["inverter"]["p_rated"],
            i_rated=p["inverter"]["p_rated"] / (3.0 * p["grid"]["u_rms"]),
            i_limit_pu=p["inverter"]["i_limit_pu"],
            bandwidth=2.0 * math.pi * p["inverter"]["bandwidth_hz"],
        )
        return DipRigPlant(source, pv, dclink, inverter, case.controller.cycle)
    if case.scenario == "cvcu":
        feeder = _build_feeder(case)
        xf = p["transformer"]
        transformer = TapTransformer(
            step_pu=xf["step_pu"],
            tap_min=xf["tap_min"],
            tap_max=xf["tap_max"],
            tap=xf["tap"],
        )
        return FeederRigPlant(
            feeder,
            transformer,
            noise_amplitude=p["load_noise"]["amplitude"],
            seed=case.seed,
        )
    source = GridSource(u_rms=p["grid"]["u_rms"], f0=p["grid"]["f0"])
    pv = PVArray(
        p_stc=p["pv"]["p_stc"],
        v_mpp=p["pv"]["v_mpp"],
        v_oc_ratio=p["pv"]["v_oc_ratio"],
        irradiance=p["pv"]["irradiance"],
        temperature=p["pv"]["temperature"],
    )
    dclink = DCLink(
        capacitance=p["dclink"]["capacitance"],
        v_dc=case.controller.params["v_dc_ref"],
    )
    inverter = InverterAvg(
        p_rated=p["inverter"]["p_rated"],
        i_rated=p["inverter"]["p_rated"] / (3.0 * p["grid"]["u_rms"]),
        i_limit_pu=p["inverter"]["i_limit_pu"],
        bandwidth=2.0 * math.pi * p["inverter"]["bandwidth_hz"],
    )
    bank = RLCLoadBank(
        banks=[LoadBank(p_w=b[0], q_var=b[1]) for b in p["load_banks"]],
        u_nominal=p["grid"]["u_rms"],
        g_min=0.0,
        g_max=p["fine_g_max"],
    )
    return ResonantLoadRigPlant(
        source,
        pv,
        dclink,
        inverter,
        bank,
        dt=case.dt,
        dc_gain_w_per_v=case.controller.params.get("k_dc", 20.0),
    )


def _build_feeder(case: TestCase) -> FeederModel:
    f = case.plant["feeder"]
    return FeederModel(
        buses=list(f["buses"]),
        lines=[
            FeederLine(l["from"], l["to"], float(l["r_pu"]), float(l["x_pu"]))
            for l in f["lines"]
        ],
        loads={b: complex(v[0], v[1]) for b, v in f["loads"].items()},
        dgs={
            b: DGUnit(
                p_pu=float(d.get("p_pu", 0.0)),
                q_pu=float(d.get("q_pu", 0.0)),
                q_min=float(d.get("q_min", -0.3)),
                q_max=float(d.get("q_max", 0.3)),
            )
            for b, d in f["dgs"].items()
        },
        slack_v_pu=float(case.plant["slack_v_pu"]),
    )


def nearest_dg_map(case: TestCase) -> dict[str, str]:
    """Closest DG bus (hop count, DG bus name breaking ties) per bus."""
    f = case.plant["feeder"]
    adj: dict[str, list[str]] = {}
    for line in f["lines"]:
        adj.setdefault(line["from"], []).append(line["to"])
        adj.setdefault(line["to"], []).append(line["from"])
    dg_buses = sorted(f["dgs"])
    out: dict[str, str] = {}
    for bus in f["buses"]:
        seen = {bus}
        frontier = [bus]
        found = None
        while frontier and found is None:
            hits = sorted(b for b in frontier if b in dg_buses)
            if hits:
                found = hits[0]
                break
            nxt = []
            for b in frontier:
                for n in sorted(adj.get(b, ())):
                    if n not in seen:
                        seen.add(n)
                        nxt.append(n)
            frontier = nxt
        if found is not None:
            out[bus] = found
    return out


def build_reference_controller(case: TestCase):
    """The in-process controller for a case; external clients implement
    the same arithmetic from the same case document."""
    params = case.controller.params
    p = case.plant
    if case.scenario == "lvrt":
        return LVRTController(
            u_nominal=p["grid"]["u_rms"],
            i_rated=p["inverter"]["p_rated"] / (3.0 * p["grid"]["u_rms"]),
            f0=p["grid"]["f0"],
            cycle_s=case.controller.cycle,
            p_ref_w=params["p_ref_w"],
            v_dc_ref=params["v_dc_ref"],
            k_dc=params["k_dc"],
            k_rt=params["k_rt"],
            dip_threshold_pu=params["dip_threshold_pu"],
            i_limit_pu=p["inverter"]["i_limit_pu"],
            slew_pu_per_s=params["slew_pu_per_s"],
            support_mode=params["support_mode"],
        )
    if case.scenario == "cvcu":
        feeder = case.plant["feeder"]
        return CVCUController(
            buses=sorted(feeder["buses"]),
            upper_pu=params["upper_pu"],
            lower_pu=params["lower_pu"],
            q_step_pu=params["q_step_pu"],
            dg_q_limits={
                b: (float(d.get("q_min", -0.3)), float(d.get("q_max", 0.3)))
                for b, d in feeder["dgs"].items()
            },
            nearest_dg=nearest_dg_map(case),
            q_set={b: float(d.get("q_pu", 0.0)) for b, d in feeder["dgs"].items()},
        )
    return RLCTuner(
        banks_w=[b[0] for b in p["load_banks"]],
        u_nominal=p["grid"]["u_rms"],
        coarse_threshold_w=params["coarse_threshold_w"],
        tolerance=params["tolerance"],
        p_reference_w=params["p_reference_w"],
        g_min=0.0,
        g_max=p["fine_g_max"],
    )


def build_events(case: TestCase) -> list[Event]:
    events = []
    for ev in case.events:
        if ev["action"] == "fault_apply":
            params = {"residual": tuple(ev["residual"])}
        elif ev["action"] == "param_set":
            params = {"path": ev["path"], "value": ev["value"]}
        else:
            params = {}
        events.append(Event(fire_t=float(ev["t"]), action=ev["action"], params=params))
    return events


def resolve_endpoint(case: TestCase, override: str | None = None) -> tuple[str, int]:
    """Endpoint for an external controller: CHIL_ENDPOINT overrides the
    command-line value, which overrides the case document."""
    spec = os.environ.get("CHIL_ENDPOINT") or override or case.controller.endpoint
    if not spec:
        raise ValidationError("external controller requires an endpoint")
    if spec.startswith("tcp:"):
        spec = spec[4:]
    host, _, port = spec.rpartition(":")
    if not host or not port.isdigit():
        raise ValidationError(f"endpoint must be tcp:HOST:PORT, got {spec!r}")
    return host, int(port)


def run_testcase(
    case: TestCase,
    delay: float = 0.0,
    controller_override: str | None = None,
    endpoint_override: str | None = None,
    realtime: bool = False,
    binding=None,
) -> RunResult:
    """One engine run of a case with the given measurement-path delay."""
    plant = build_plant(case)
    cycle_ticks = int(round(case.controller.cycle / case.dt))
    kind = controller_override or case.controller.kind
    if binding is None:
        if kind == "external":
            binding = SocketBinding(
                resolve_endpoint(case, endpoint_override),
                cycle_ticks,
                plant.names,
                policy=TimeoutPolicy(
                    timeout=case.controller.timeout,
                    action=case.controller.timeout_action,
                ),
                delay=delay,
            )
        else:
            binding = ReferenceBinding(
                build_reference_controller(case), cycle_ticks, delay=delay
            )
    engine = Engine(
        plant,
        case.dt,
        case.duration,
        events=build_events(case),
        binding=binding,
        decimation=case.decimation,
        realtime=realtime,
    )
    return engine.run()


# ---------------------------------------------------------- test report


@dataclass
class TestReport:
    case_name: str
    scenario: str
    config_hash: str
    criteria: list[dict]
    metrics: dict
    series: dict  # name -> {"columns": [...], "rows": [[...], ...]}
    traces: dict  # filename stem -> Trace
    passed: bool
    error: str | None = None
    controller_disconnected: bool = False
    tool_version: str = __version__

    def to_json_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA_ID,
            "tool_version": self.tool_version,
            "case": {
                "name": self.case_name,
                "scenario": self.scenario,
                "config_hash": self.config_hash,
            },
            "pass": self.passed,
            "criteria": self.criteria,
            "metrics": self.metrics,
            "series": self.series,
            "traces": sorted(f"{stem}.csv" for stem in self.traces),
            "error": self.error,
            "controller_disconnected": self.controller_disconnected,
        }


def run_case_report(
    case: TestCase,
    delay_override: float | None = None,
    controller_override: str | None = None,
    endpoint_override: str | None = None,
    realtime: bool = False,
) -> TestReport:
    """Dispatch to the scenario runner; engine errors become a failed
    report instead of a crash."""
    kw = dict(
        controller_override=controller_override,
        endpoint_override=endpoint_override,
        realtime=realtime,
    )
    if case.scenario == "cvcu":
        kw["delays"] = None if delay_override is None else [delay_override]
        runner = run_cvcu
    else:
        kw["delay"] = delay_override if delay_override is not None else 0.0
        runner = {"lvrt": run_lvrt, "rlctune": run_rlctune}[case.scenario]
    try:
        return runner(case, **kw)
    except Exception as exc:  # recorded, not raised: sequencing continues
        return TestReport(
            case_name=case.name,
            scenario=case.scenario,
            config_hash=case.config_hash,
            criteria=[],
            metrics={},
            series={},
            traces={},
            passed=False,
            error=f"{type(exc).__name__}: {exc}",
        )


def run_lvrt(case: TestCase, **kw) -> TestReport:
    result = run_testcase(case, **kw)
    trace = result.trace
    p = case.plant
    i_rated = p["inverter"]["p_rated"] / (3.0 * p["grid"]["u_rms"])
    i_limit = p["inverter"]["i_limit_pu"]
    f0 = p["grid"]["f0"]
    ev = case.evaluation

    t = np.asarray(trace.times())
    ia = np.asarray(trace.column("I_L1"))
    ib = np.asarray(trace.column("I_L2"))
    ic = np.asarray(trace.column("I_L3"))
    ends, mags = sliding_positive_sequence(ia, ib, ic, f0, case.dt)
    series_t = t[ends]
    series_v = mags / i_rated

    fault_times = [e["t"] for e in case.events if e["action"] in ("fault_apply", "fault_clear")]
    verdict = band_check(
        series_t,
        series_v,
        upper=ev["upper_pu"],
        lower=ev["lower_pu"],
        settle=ev["settle_s"],
        events=fault_times,
    )

    peak_limit = i_limit * i_rated * math.sqrt(2.0)
    peak_seen = float(max(np.abs(ia).max(), np.abs(ib).max(), np.abs(ic).max()))
    current_ok = peak_seen <= peak_limit + 1e-6

    metrics = {
        "i_pos_norm_max": float(series_v.max()),
        "i_pos_norm_min": float(series_v.min()),
        "peak_phase_current_a": peak_seen,
        "peak_phase_current_limit_a": peak_limit,
        "exchanges": len(result.exchanges),
        "violations": verdict.violations,
        "masked_excursions": verdict.masked,
        "fault_times": fault_times,
        "band_upper_pu": ev["upper_pu"],
        "band_lower_pu": ev["lower_pu"],
    }
    fault_start = fault_times[0] if fault_times else None
    if fault_start is not None:
        target = ev.get("rise_target_pu", i_limit)
        try:
            metrics["rise_time_s"] = rise_time(
                series_t,
                series_v,
                event_t=fault_start,
                target=target,
                low_frac=ev["rise_low_frac"],
                high_frac=ev["rise_high_frac"],
            )
        except NeverReached:
            metrics["rise_time_s"] = None
        metrics.update(_lvrt_thd_metrics(case, trace, fault_times))

    criteria = [
        {
            "id": "band",
            "description": (
                f"positive-sequence current stays within "
                f"[{ev['lower_pu']:g}, {ev['upper_pu']:g}] p.u. outside "
                f"{ev['settle_s']:g} s settle windows"
            ),
            "pass": verdict.passed,
            "violations": len(verdict.violations),
        },
        {
            "id": "current_limit",
            "description": (
                f"instantaneous phase current <= {i_limit:g} p.u. peak"
            ),
            "pass": current_ok,
        },
    ]
    return TestReport(
        case_name=case.name,
        scenario="lvrt",
        config_hash=case.config_hash,
        criteria=criteria,
        metrics=metrics,
        series={
            "i_pos_norm": {
                "columns": ["t", "i_pos_norm_pu"],
                "rows": [[float(a), float(b)] for a, b in zip(series_t, series_v)],
            }
        },
        traces={"trace": trace},
        passed=all(c["pass"] for c in criteria),
        controller_disconnected=result.controller_disconnected,
    )


def _lvrt_thd_metrics(case: TestCase, trace, fault_times) -> dict:
    """THD of voltage and current over one-period windows taken before the
    fault and late inside it."""
    f0 = case.plant["grid"]["f0"]
    n = int(round(1.0 / (f0 * case.dt)))
    n_harm = case.evaluation["thd_harmonics"]
    fault_start = fault_times[0]
    fault_end = fault_times[1] if len(fault_times) > 1 else case.duration
    out = {}
    windows = {
        "prefault": fault_start - 0.1,  # window ends 100 ms before the dip
        "infault": fault_end - 0.02,
    }
    u = np.asarray(trace.column("U_L1"))
    i = np.asarray(trace.column("I_L1"))
    t = np.asarray(trace.times())
    for label, t_end in windows.items():
        k_end = int(np.searchsorted(t, t_end))
        if k_end - n < 0:
            continue
        sl = slice(k_end - n, k_end)
        try:
            out[f"thd_v_{label}"] = thd(u[sl], f0, case.dt, n_harm)
            out[f"thd_i_{label}"] = thd(i[sl], f0, case.dt, n_harm)
        except (WindowTooShort, ValueError):
            pass
    return out


def run_cvcu(case: TestCase, delays=None, **kw) -> TestReport:
    ev = case.evaluation
    delays = list(ev["delays"]) if delays is None else list(delays)
    upper = case.controller.params["upper_pu"]
    lower = case.controller.params["lower_pu"]
    criteria = []
    metrics = {"delays": delays, "band_upper_pu": upper, "band_lower_pu": lower}
    series = {}
    traces = {}
    disconnected = False
    for k, delay in enumerate(delays):
        result = run_testcase(case, delay=delay, **kw)
        disconnected |= result.controller_disconnected
        trace = result.trace
        label = _delay_label(delay)
        traces[f"trace_{label}"] = trace
        t = np.asarray(trace.times())
        v_max = np.asarray(trace.column("v_max_pu"))
        v_min = np.asarray(trace.column("v_min_pu"))
        duration = _longest_episode(v_max > upper, case.dt)
        taps = [
            {"t": x["t"], "tap_cmd": x["ctrl"]["tap_cmd"]}
            for x in result.exchanges
            if x["ctrl"].get("tap_cmd", 0.0) != 0.0
        ]
        bounds = ev["overvoltage_bounds_s"][k] if k < len(ev["overvoltage_bounds_s"]) else None
        in_band_end = bool(v_max[-1] <= upper and v_min[-1] >= lower)
        metrics[f"overvoltage_duration_s_{label}"] = duration
        metrics[f"tap_commands_{label}"] = taps
        metrics[f"final_in_band_{label}"] = in_band_end
        if bounds is not None:
            criteria.append(
                {
                    "id": f"overvoltage_duration_{label}",
                    "description": (
                        f"over-voltage duration with {delay:g} s delay within "
                        f"[{bounds[0]:g}, {bounds[1]:g}] s"
                    ),
                    "pass": bool(bounds[0] <= duration <= bounds[1]),
                    "measured_s": duration,
                }
            )
        criteria.append(
            {
                "id": f"band_restored_{label}",
                "description": f"all voltages inside [{lower:g}, {upper:g}] p.u. at the end ({delay:g} s delay)",
                "pass": in_band_end,
            }
        )
        series[f"voltage_band_{label}"] = {
            "columns": ["t", "v_max_pu", "v_min_pu"],
            "rows": [
                [float(a), float(b), float(c)] for a, b, c in zip(t, v_max, v_min)
            ],
        }
    return TestReport(
        case_name=case.name,
        scenario="cvcu",
        config_hash=case.config_hash,
        criteria=criteria,
        metrics=metrics,
        series=series,
        traces=traces,
        passed=all(c["pass"] for c in criteria),
        controller_disconnected=disconnected,
    )


def _delay_label(delay: float) -> str:
    return f"delay{delay:g}".replace(".", "p")


def _longest_episode(mask: np.ndarray, dt: float) -> float:
    best = run = 0
    for flag in mask:
        run = run + 1 if flag else 0
        best = max(best, run)
    return best * dt


def run_rlctune(case: TestCase, **kw) -> TestReport:
    result = run_testcase(case, **kw)
    trace = result.trace
    ev = case.evaluation

    p_series = []
    coarse_end_p = None
    final_p = None
    done_step = None
    phase = "coarse"
    transitions = []
    for step, x in enumerate(result.exchanges, start=1):
        p = x["meas"].get("P_grid")
        p_series.append([x["t"], p])
        ctrl = x["ctrl"]
        if phase == "coarse" and "bank_on" not in ctrl:
            phase = "fine"
            transitions.append({"step": step, "phase": "fine"})
            coarse_end_p = p
        if "done" in ctrl and done_step is None:
            done_step = step
            final_p = p
            if phase != "done":
                phase = "done"
                transitions.append({"step": step, "phase": "done"})
    if final_p is None and p_series:
        final_p = p_series[-1][1]

    criteria = [
        {
            "id": "coarse_handoff",
            "description": f"|P_grid| <= {ev['coarse_max_w']:g} W when coarse tuning ends",
            "pass": bool(
                coarse_end_p is not None and abs(coarse_end_p) <= ev["coarse_max_w"]
            ),
            "measured_w": coarse_end_p,
        },
        {
            "id": "final_power",
            "description": f"final |P_grid| <= {ev['final_max_w']:g} W",
            "pass": bool(final_p is not None and abs(final_p) <= ev["final_max_w"]),
            "measured_w": final_p,
        },
        {
            "id": "step_budget",
            "description": f"tuner done within {ev['max_steps']} steps",
            "pass": bool(done_step is not None and done_step <= ev["max_steps"]),
            "steps": done_step,
        },
    ]
    metrics = {
        "p_grid_initial_w": p_series[0][1] if p_series else None,
        "p_grid_final_w": final_p,
        "coarse_end_w": coarse_end_p,
        "steps_to_done": done_step,
        "transitions": transitions,
        "exchanges": len(result.exchanges),
        "tolerance_band_w": ev["final_max_w"],
    }
    return TestReport(
        case_name=case.name,
        scenario="rlctune",
        config_hash=case.config_hash,
        criteria=criteria,
        metrics=metrics,
        series={
            "p_grid": {
                "columns": ["t", "p_grid_w"],
                "rows": [[float(a), float(b)] for a, b in p_series],
            }
        },
        traces={"trace": trace},
        passed=all(c["pass"] for c in criteria),
        controller_disconnected=result.controller_disconnected,
    )


# ------------------------------------------------------------ demo cases


def demo_case(scenario: str) -> dict:
    """The shipped example case documents (fully explicit)."""
    if scenario == "lvrt":
        raw = {
            "schema": SCHEMA_ID,
            "scenario": "lvrt",
            "name": "lvrt-dip-005-150ms",
            "events": [
                {"t": 0.2, "action": "fault_apply", "residual": [0.05, 0.05, 0.05]},
                {"t": 0.35, "action": "fault_clear"},
            ],
        }
    elif scenario == "cvcu":
        raw = {
            "schema": SCHEMA_ID,
            "scenario": "cvcu",
            "name": "cvcu-synthetic-feeder",
            "plant": {
                "feeder": {
                    "buses": ["mv1", "mv2", "mv3"],
                    "lines": [
                        {"from": "root", "to": "mv1", "r_pu": 0.02, "x_pu": 0.05},
                        {"from": "mv1", "to": "mv2", "r_pu": 0.02, "x_pu": 0.05},
                        {"from": "mv2", "to": "mv3", "r_pu": 0.02, "x_pu": 0.05},
                    ],
                    "loads": {
                        "mv1": [0.3, 0.1],
                        "mv2": [0.2, 0.05],
                        "mv3": [0.3, 0.1],
                    },
                    "dgs": {
                        "mv3": {"p_pu": 0.6, "q_pu": 0.0, "q_min": -0.3, "q_max": 0.3}
                    },
                },
                "load_noise": {"amplitude": 0.005},
            },
            "events": [
                {"t": 30.0, "action": "param_set", "path": "loads.mv1.p", "value": 0.03},
                {"t": 30.0, "action": "param_set", "path": "loads.mv1.q", "value": 0.01},
                {"t": 30.0, "action": "param_set", "path": "loads.mv2.p", "value": 0.02},
                {"t": 30.0, "action": "param_set", "path": "loads.mv2.q", "value": 0.005},
                {"t": 30.0, "action": "param_set", "path": "loads.mv3.p", "value": 0.03},
                {"t": 30.0, "action": "param_set", "path": "loads.mv3.q", "value": 0.01},
            ],
        }
    elif scenario == "rlctune":
        raw = {
            "schema": SCHEMA_ID,
            "scenario": "rlctune",
            "name": "rlctune-5800w",
        }
    else:
        raise ValidationError(f"no demo for scenario {scenario!r}")
    return parse_testcase(raw).normalized
