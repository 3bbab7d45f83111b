"""Report emission: canonical report.json, a human-readable verdict table,
trace and evidence CSVs, and rendered figures.

report.json and the CSVs are byte-deterministic for a given report; the
figures are rendered alongside them as PNG files (they are documentation,
not part of the byte-exactness contract).
"""

from __future__ import annotations

import json
from pathlib import Path

from .testbench import TestReport

DEFAULT_FORMATS = ("json", "csv", "txt", "png")


def emit_report(report: TestReport, formats=DEFAULT_FORMATS, out_dir=".") -> list[Path]:
    """Write the selected artifact formats into out_dir; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    formats = tuple(formats)
    if "csv" in formats:
        for stem in sorted(report.traces):
            path = out / f"{stem}.csv"
            path.write_text(report.traces[stem].to_csv(), encoding="utf-8")
            written.append(path)
        for name in sorted(report.series):
            path = out / f"{name}.csv"
            path.write_text(_series_csv(report.series[name]), encoding="utf-8")
            written.append(path)
    if "json" in formats:
        path = out / "report.json"
        body = json.dumps(report.to_json_dict(), sort_keys=True, separators=(",", ":"))
        path.write_text(body + "\n", encoding="utf-8")
        written.append(path)
    if "txt" in formats:
        path = out / "report.txt"
        path.write_text(render_text(report), encoding="utf-8")
        written.append(path)
    if "png" in formats:
        written.extend(render_figures(report, out))
    return written


def _series_csv(series: dict) -> str:
    lines = [",".join(series["columns"])]
    for row in series["rows"]:
        lines.append(",".join(f"{v:.9g}" for v in row))
    return "\n".join(lines) + "\n"


def render_text(report: TestReport) -> str:
    """Fixed-width verdict table in the spirit of a standard test report."""
    lines = [
        "chil-rig test report",
        "====================",
        f"case:     {report.case_name} ({report.scenario})",
        f"config:   {report.config_hash}",
        f"tool:     chil-rig {report.tool_version}",
        "",
    ]
    if report.error:
        lines += [f"execution error: {report.error}", "", "overall: FAIL", ""]
        return "\n".join(lines)
    width = max((len(c["description"]) for c in report.criteria), default=20)
    lines.append(f"{'criterion':<{width}}  verdict")
    lines.append("-" * width + "  -------")
    for c in report.criteria:
        lines.append(f"{c['description']:<{width}}  {'PASS' if c['pass'] else 'FAIL'}")
    lines.append("")
    lines.append(f"overall: {'PASS' if report.passed else 'FAIL'}")
    if report.controller_disconnected:
        lines.append("note: the external controller disconnected during the run")
    lines.append("")
    lines.append("metrics:")
    for key in sorted(report.metrics):
        lines.append(f"  {key}: {json.dumps(report.metrics[key], sort_keys=True)}")
    lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------- figures


def render_figures(report: TestReport, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    renderer = {
        "lvrt": _lvrt_figures,
        "cvcu": _cvcu_figures,
        "rlctune": _rlctune_figures,
    }.get(report.scenario)
    if renderer is None or report.error:
        return []
    paths = renderer(report, out, plt)
    plt.close("all")
    return paths


def _save(fig, path: Path, plt) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def _lvrt_figures(report: TestReport, out: Path, plt) -> list[Path]:
    trace = report.traces["trace"]
    t = trace.times()
    fault_times = report.metrics.get("fault_times", [])
    t0 = fault_times[0] if fault_times else t[len(t) // 3]
    lo, hi = t0 - 0.1, t0 + 0.1  # the documented context window
    sel = [k for k, x in enumerate(t) if lo <= x <= hi]
    ts = [t[k] for k in sel]
    paths = []

    fig, axes = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    for name, color in (("U_L1", "tab:blue"), ("U_L2", "tab:red"), ("U_L3", "tab:green")):
        col = trace.column(name)
        axes[0].plot(ts, [col[k] for k in sel], color=color, lw=0.8, label=name)
    axes[0].set_ylabel("line-to-neutral voltage (V)")
    axes[0].legend(loc="upper right", fontsize=8)
    axes[0].grid(True, alpha=0.3)
    for name, color in (("I_L1", "tab:blue"), ("I_L2", "tab:red"), ("I_L3", "tab:green")):
        col = trace.column(name)
        axes[1].plot(ts, [col[k] for k in sel], color=color, lw=0.8, label=name)
    axes[1].set_ylabel("line current (A)")
    axes[1].set_xlabel("t (s)")
    axes[1].legend(loc="upper right", fontsize=8)
    axes[1].grid(True, alpha=0.3)
    for ax in axes:
        for ft in fault_times:
            ax.axvline(ft, color="k", ls=":", lw=0.8)
    paths.append(_save(fig, out / "fig_waveforms.png", plt))

    ser = report.series["i_pos_norm"]
    st = [row[0] for row in ser["rows"]]
    sv = [row[1] for row in ser["rows"]]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(st, sv, color="tab:blue", lw=1.0, label="positive-sequence current (p.u.)")
    ax.axhline(report.metrics.get("band_upper_pu", 1.2), color="red", lw=1.2, label="upper limit")
    ax.axhline(report.metrics.get("band_lower_pu", 0.9), color="green", lw=1.2, label="lower limit")
    for ft in fault_times:
        ax.axvline(ft, color="k", ls=":", lw=0.8)
    ax.set_xlabel("t (s)")
    ax.set_ylabel("current (p.u.)")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    paths.append(_save(fig, out / "fig_band.png", plt))

    fig, ax = plt.subplots(figsize=(8, 3.2))
    ax.plot(t, trace.column("V_dcp"), label="DC+", lw=0.9)
    ax.plot(t, trace.column("V_dcn"), label="DC-", lw=0.9)
    ax.plot(t, trace.column("V_dc"), label="rail-to-rail", lw=0.9)
    for ft in fault_times:
        ax.axvline(ft, color="k", ls=":", lw=0.8)
    ax.set_xlabel("t (s)")
    ax.set_ylabel("DC-link voltage (V)")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    paths.append(_save(fig, out / "fig_dclink.png", plt))
    return paths


def _cvcu_figures(report: TestReport, out: Path, plt) -> list[Path]:
    paths = []
    upper = report.metrics.get("band_upper_pu", 1.02)
    lower = report.metrics.get("band_lower_pu", 0.94)
    for name in sorted(report.series):
        ser = report.series[name]
        t = [row[0] for row in ser["rows"]]
        vmax = [row[1] for row in ser["rows"]]
        vmin = [row[2] for row in ser["rows"]]
        fig, ax = plt.subplots(figsize=(8, 4))
        ax.plot(t, vmax, color="tab:blue", lw=0.9, label="highest bus voltage")
        ax.plot(t, vmin, color="tab:cyan", lw=0.9, label="lowest bus voltage")
        ax.axhline(upper, color="red", lw=1.2, label="upper limit")
        ax.axhline(lower, color="green", lw=1.2, label="lower limit")
        label = name.replace("voltage_band_", "")
        for tap in report.metrics.get(f"tap_commands_{label}", []):
            ax.axvline(tap["t"], color="k", ls=":", lw=0.9)
        ax.set_xlabel("t (s)")
        ax.set_ylabel("voltage (p.u.)")
        ax.set_title(f"voltage band, {label}")
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8, loc="lower right")
        paths.append(_save(fig, out / f"fig_{name}.png", plt))
    return paths


def _rlctune_figures(report: TestReport, out: Path, plt) -> list[Path]:
    ser = report.series["p_grid"]
    t = [row[0] for row in ser["rows"]]
    p = [row[1] for row in ser["rows"]]
    tol = report.metrics.get("tolerance_band_w", 174.0)
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.step(t, p, where="post", color="tab:blue", lw=1.2, label="grid power (W)")
    ax.axhspan(-tol, tol, color="green", alpha=0.15, label="tolerance band")
    for tr in report.metrics.get("transitions", []):
        if tr["step"] - 1 < len(t):
            ax.axvline(t[tr["step"] - 1], color="k", ls=":", lw=0.9)
            ax.text(
                t[tr["step"] - 1],
                max(p) * 0.95,
                tr["phase"],
                rotation=90,
                fontsize=8,
                va="top",
            )
    ax.set_xlabel("t (s)")
    ax.set_ylabel("power into the grid (W)")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    return [_save(fig, out / "fig_power.png", plt)]
