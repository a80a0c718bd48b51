"""Optional PNG figures rendered from a finished run directory.

Only the CSV tables are read, so a figure never depends on in-memory state
and can be regenerated from the stored outputs alone.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
    "lines.linewidth": 1.2,
}


def read_table(path):
    """Columns of an RFC-4180 table as float arrays (blank cells become NaN)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {}
    for i, name in enumerate(header):
        vals = []
        for r in body:
            cell = r[i]
            if cell in ("", "nan"):
                vals.append(float("nan"))
            elif cell in ("true", "false"):
                vals.append(1.0 if cell == "true" else 0.0)
            else:
                vals.append(float(cell))
        cols[name] = vals
    return cols


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path.name


def _lyapunov(run):
    t = read_table(run / "lyapunov.csv")
    fig, ax = plt.subplots()
    for name in t:
        if name.startswith("L_"):
            ax.plot(t["E"], t[name], label=name)
    ax.set_xlabel("E")
    ax.set_ylabel("Lyapunov exponent")
    ax.legend(fontsize=8)
    return [_save(fig, run / "lyapunov.png")]


def _ids(run, name="ids"):
    t = read_table(run / "ids.csv")
    fig, ax = plt.subplots()
    ax.plot(t["E"], t["N"], drawstyle="steps-post")
    ax.set_xlabel("E")
    ax.set_ylabel("N(E)")
    return [_save(fig, run / f"{name}.png")]


def _thouless(run):
    t = read_table(run / "thouless.csv")
    fig, ax = plt.subplots()
    ax.plot(t["E"], t["lhs"], "o-", label="exponent side")
    ax.plot(t["E"], t["rhs"], "s--", label="log potential")
    ax.set_xlabel("E")
    ax.legend()
    return [_save(fig, run / "thouless.png")]


def _holder(run):
    out = _ids(run)
    t = read_table(run / "holder.csv")
    fig, ax = plt.subplots()
    ax.plot(t["E"], t["exponent"], "o", label="measured")
    ax.plot(t["E"], t["predicted"], "_", markersize=14, label="level-set prediction")
    ax.set_xlabel("E")
    ax.set_ylabel("local exponent")
    ax.legend()
    return out + [_save(fig, run / "holder.png")]


def _levelset(run):
    t = read_table(run / "levelset.csv")
    fig, ax = plt.subplots()
    ax.step(t["E"], t["card_zero"], where="mid")
    ax.set_xlabel("E")
    ax.set_ylabel("roots on the circle")
    return [_save(fig, run / "levelset.png")]


def _duality(run):
    t = read_table(run / "duality.csv")
    fig, ax = plt.subplots()
    ax.plot(t["E"], t["N_long"], label="long-range")
    ax.plot(t["E"], t["N_finite"], "--", label="finite-range, rescaled")
    ax.set_xlabel("E")
    ax.set_ylabel("N")
    ax.legend()
    return [_save(fig, run / "duality.png")]


def _kam(run):
    t = read_table(run / "kam_phases.csv")
    fig, ax = plt.subplots()
    slots = sorted(set(int(s) for s in t["slot"]))
    for s in slots:
        idx = [i for i, v in enumerate(t["slot"]) if int(v) == s]
        ax.plot([t["j"][i] for i in idx], [t["im_rho"][i] for i in idx], "o-", label=f"slot {s}")
    ax.set_xlabel("KAM step")
    ax.set_ylabel("Im rho")
    ax.legend(fontsize=8)
    return [_save(fig, run / "kam_phases.png")]


_RENDER = {
    "lyapunov": _lyapunov,
    "ids": _ids,
    "thouless": _thouless,
    "holder": _holder,
    "levelset": _levelset,
    "duality": _duality,
    "kam-trace": _kam,
}


def render_figures(command, run_dir):
    """Render the figures for ``command`` into ``run_dir``; returns file names."""
    run = Path(run_dir)
    with plt.rc_context(_STYLE):
        return _RENDER[command](run)
