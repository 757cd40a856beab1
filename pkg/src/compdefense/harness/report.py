"""Sweep tables and figures."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, fields
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .sweep import SweepResult, SweepRow  # noqa: E402

# byte-stable SVG output: fixed id salt, no timestamp, text kept as text
STYLE = {
    "svg.hashsalt": "compdefense",
    "svg.fonttype": "none",
    "font.size": 10.0,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": "small",
    "figure.figsize": (6.4, 4.0),
}
SVG_METADATA = {"Date": None, "Creator": None}

FIDELITY_FIGURE = "fidelity_vs_trials.svg"
LATENCY_FIGURE = "latency_vs_trials.svg"
TABLE = "sweep.csv"


def _fmt(value):
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6g}"
    return str(value)


def sweep_csv(result: SweepResult) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f.name for f in fields(SweepRow)])
    for row in result.rows:
        w.writerow([_fmt(v) for v in astuple(row)])
    return buf.getvalue().encode()


def _series(result: SweepResult, model: str):
    rows = sorted((r for r in result.rows if r.model == model), key=lambda r: r.trials)
    return [r.trials for r in rows], rows


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)


def plot_fidelity(result: SweepResult, path: Path) -> None:
    """Mean fidelity per model against trials, with the min/max band over seeds."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for model in result.models():
            x, rows = _series(result, model)
            (line,) = ax.plot(x, [r.fidelity_mean for r in rows], marker="o", ms=3, label=model)
            line.set_gid(f"series-{model}")
            band = ax.fill_between(
                x,
                [r.fidelity_min for r in rows],
                [r.fidelity_max for r in rows],
                color=line.get_color(),
                alpha=0.15,
                lw=0,
            )
            band.set_gid(f"band-{model}")
        ax.set_xscale("symlog", linthresh=1)
        ax.set_xlabel("tuning trials per workload")
        ax.set_ylabel("attack fidelity")
        ax.set_ylim(0, 1.05)
        ax.legend(loc="best")
        fig.tight_layout()
        _save(fig, path)


def plot_latency(result: SweepResult, path: Path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for model in result.models():
            x, rows = _series(result, model)
            (line,) = ax.plot(x, [r.latency_mean_ns / 1e3 for r in rows], marker="o", ms=3, label=model)
            line.set_gid(f"series-{model}")
        ax.set_xscale("symlog", linthresh=1)
        ax.set_xlabel("tuning trials per workload")
        ax.set_ylabel("simulated inference latency (us)")
        ax.legend(loc="best")
        fig.tight_layout()
        _save(fig, path)


def report(result: SweepResult, out_dir: str | Path) -> list[Path]:
    if not result.rows:
        raise ValueError("empty sweep result")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / TABLE, out / FIDELITY_FIGURE, out / LATENCY_FIGURE]
    paths[0].write_bytes(sweep_csv(result))
    plot_fidelity(result, paths[1])
    plot_latency(result, paths[2])
    return paths
