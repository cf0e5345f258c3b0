"""Figure rendering for experiment result rows."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 110,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.labelsize": 10,
    "axes.grid": True,
    "grid.alpha": 0.35,
    "grid.linestyle": "--",
    "lines.linewidth": 1.4,
    "lines.markersize": 4.5,
    "legend.fontsize": 8,
}

_AXIS_LABELS = {
    "lambda_b_per_s": "broadcast packet rate per UE (1/s)",
    "lambda_g_per_s": "groupcast packet rate per UE (1/s)",
    "platoon_size": "platoon size",
    "latency_budget_ms": "latency budget (ms)",
    "k_b": "broadcast repetitions",
}


def _mode_label(psfch: bool) -> str:
    return "feedback on" if psfch else "feedback off"


def _save(fig, path: Path) -> None:
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)


def _plr_curve_figure(rows, spec, which: str, outdir: Path) -> Path:
    fig, ax = plt.subplots()
    series = {}
    for r in rows:
        series.setdefault((r["psfch"], r["k_g"]), []).append(
            (r["sweep_value"], r[which], r[f"{which}_lo"], r[f"{which}_hi"]))
    for (psfch, k), pts in sorted(series.items()):
        pts.sort()
        xs = [p[0] for p in pts]
        ys = [max(p[1], 1e-6) for p in pts]
        lo = [max(p[2], 1e-6) for p in pts]
        hi = [max(p[3], 1e-6) for p in pts]
        marker = "o" if psfch else "s"
        line, = ax.plot(xs, ys, marker=marker,
                        label=f"{_mode_label(psfch)}, K={k}")
        ax.fill_between(xs, lo, hi, alpha=0.15, color=line.get_color())
    ax.axhline(spec.base.plr_qos, color="black", linestyle=":", linewidth=1,
               label="QoS target")
    ax.set_yscale("log")
    ax.set_xlabel(_AXIS_LABELS.get(spec.sweep_axis, spec.sweep_axis))
    kind = "groupcast" if which == "plr_g" else "broadcast"
    ax.set_ylabel(f"{kind} packet loss ratio")
    ax.legend()
    path = outdir / f"fig_{which}.png"
    _save(fig, path)
    return path


def _capacity_figure(rows, spec, outdir: Path) -> Path:
    fig, ax = plt.subplots()
    for psfch in (False, True):
        pts = sorted((r["sweep_value"], r["capacity_per_s"], r["k_g"])
                     for r in rows if r["psfch"] == psfch and r["is_best_k"])
        if not pts:
            continue
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        marker = "o" if psfch else "s"
        ax.plot(xs, ys, marker=marker, label=_mode_label(psfch))
        for x, y, k in pts:
            if k:
                ax.annotate(f"K={k}", (x, y), textcoords="offset points",
                            xytext=(0, 5), fontsize=7, ha="center")
    ax.set_xlabel(_AXIS_LABELS.get(spec.sweep_axis, spec.sweep_axis))
    ax.set_ylabel("groupcast capacity (packets/s per platoon UE)")
    ax.set_ylim(bottom=0)
    ax.legend()
    path = outdir / "fig_capacity.png"
    _save(fig, path)
    return path


def render_figures(rows, spec, outdir: Path) -> dict:
    """Render the preset's figures next to the delimited output; returns
    name -> path for everything written."""
    if not rows or spec.preset == "single-run":
        return {}
    plt.rcParams.update(_STYLE)
    out = {}
    if spec.preset == "plr-curves":
        out["fig_plr_g"] = _plr_curve_figure(rows, spec, "plr_g", outdir)
        out["fig_plr_b"] = _plr_curve_figure(rows, spec, "plr_b", outdir)
    else:
        out["fig_capacity"] = _capacity_figure(rows, spec, outdir)
    return out
