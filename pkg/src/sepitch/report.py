"""Tables and figures from training step logs and evaluation summaries.

Every figure is written next to a CSV holding the plotted series.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

CASES = (1, 2, 3, 4)
METRIC_COLUMNS = ("n_items", "sdr", "sdr_median", "gnsdr", "rpa", "rca",
                  "rpa_item_mean", "rca_item_mean")


def read_step_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def weight_trajectories(records) -> dict:
    """Per-case mean weights at every step.

    Returns ``{case: {"step", "n", "omega_mss", "omega_pe"}}`` with NaN where
    a case had no sample in that step's batch.
    """
    steps = np.array([r["step"] for r in records], dtype=int)
    out = {}
    for c in CASES:
        n = np.zeros(len(records), dtype=int)
        wm = np.full(len(records), np.nan)
        wp = np.full(len(records), np.nan)
        for i, r in enumerate(records):
            sel = [j for j, cj in enumerate(r["cases"]) if cj == c]
            if sel:
                n[i] = len(sel)
                wm[i] = np.mean([r["omega_mss"][j] for j in sel])
                wp[i] = np.mean([r["omega_pe"][j] for j in sel])
        out[c] = {"step": steps, "n": n, "omega_mss": wm, "omega_pe": wp}
    return out


def write_trajectory_csv(traj: dict, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "case", "n", "omega_mss", "omega_pe"])
        for c in CASES:
            t = traj[c]
            for i in range(len(t["step"])):
                if t["n"][i]:
                    w.writerow([int(t["step"][i]), c, int(t["n"][i]),
                                repr(float(t["omega_mss"][i])), repr(float(t["omega_pe"][i]))])
    return path


def _smooth(y, width):
    # running mean over available points only
    width = min(width, len(y))
    if width <= 1:
        return y
    ok = np.isfinite(y)
    kern = np.ones(width)
    num = np.convolve(np.where(ok, y, 0.0), kern, mode="same")
    den = np.convolve(ok.astype(float), kern, mode="same")
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / den
    out[~ok] = np.nan
    return out


def plot_trajectories(traj: dict, path, smooth: int = 5, title: str | None = None) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6), sharex=True)
    for ax, key, label in zip(axes, ("omega_mss", "omega_pe"), ("$\\omega_{mss}$", "$\\omega_{pe}$")):
        for c in CASES:
            t = traj[c]
            if not np.any(t["n"]):
                continue
            ok = t["n"] > 0
            ax.plot(t["step"][ok], _smooth(t[key], smooth)[ok], label=f"case {c}", lw=1.2)
        ax.axhline(1.0, color="0.6", lw=0.8, ls="--")
        ax.set_xlabel("step")
        ax.set_ylabel(label)
    axes[0].legend(frameon=False, fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def epoch_rows_from_steps(records) -> list[dict]:
    """Mean losses per epoch, recovered from step records."""
    rows = {}
    for r in records:
        rows.setdefault(r["epoch"], []).append(r)
    out = []
    for e in sorted(rows):
        rs = rows[e]
        out.append({"epoch": e, **{k: float(np.mean([x[k] for x in rs]))
                                   for k in ("l_mss", "l_pe", "l_dwhs", "l_total")}})
    return out


def plot_losses(rows, path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    ep = [r["epoch"] for r in rows]
    for ax, key in zip(axes, ("l_mss", "l_pe", "l_dwhs")):
        ax.plot(ep, [r[key] for r in rows], marker=".", lw=1)
        ax.set_xlabel("epoch")
        ax.set_title(key)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def write_rows_csv(rows, path, columns=None) -> Path:
    rows = list(rows)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k)) for k in columns})
    return Path(path)


def _cell(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return v


def metrics_table(summaries: dict) -> list[dict]:
    """One row per named evaluation summary."""
    return [{"run": name, **{k: s.get(k) for k in METRIC_COLUMNS}}
            for name, s in summaries.items()]


def format_table(rows, columns) -> str:
    """Fixed-width plain-text table."""
    def fmt(v):
        if isinstance(v, float):
            return "+inf" if v == math.inf else f"{v:.4f}"
        return str(v)
    cells = [[str(c) for c in columns]] + [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def plot_metrics(rows, path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [r["run"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    x = np.arange(len(rows))
    sdrs = [r["sdr"] if r["sdr"] is not None and np.isfinite(r["sdr"]) else np.nan for r in rows]
    axes[0].bar(x, sdrs)
    axes[0].set_ylabel("SDR (dB)")
    axes[1].bar(x, [r["rpa"] for r in rows])
    axes[1].set_ylabel("RPA")
    axes[1].set_ylim(0, 1)
    for ax in axes:
        ax.set_xticks(x, names, rotation=20, ha="right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
