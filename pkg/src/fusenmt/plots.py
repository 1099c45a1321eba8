"""Figure rendering for training logs and experiment grids (headless)."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

FIGSIZE = (7.0, 4.2)
DPI = 130


def _load_records(metrics_path) -> list[dict]:
    records = []
    with open(metrics_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def plot_training_curves(metrics_path, out_path) -> Path:
    """Loss and learning-rate curves from a JSON-lines metrics log."""
    records = _load_records(metrics_path)
    if not records:
        raise ValueError(f"{metrics_path}: no records to plot")
    steps = [r["step"] for r in records]

    fig, (ax_loss, ax_lr) = plt.subplots(2, 1, figsize=(FIGSIZE[0], 6.0), sharex=True)
    ax_loss.plot(steps, [r["loss"] for r in records], label="combined", lw=1.5)
    ax_loss.plot(steps, [r["loss_nmt"] for r in records], label="translation", lw=1.0)
    if any(r.get("loss_kd") is not None for r in records):
        kd = [(r["step"], r["loss_kd"]) for r in records if r.get("loss_kd") is not None]
        ax_loss.plot(*zip(*kd), label="distillation", lw=1.0)
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)
    ax_loss.grid(alpha=0.3)

    ax_lr.plot(steps, [r["lr_nmt"] for r in records], label="base rate", lw=1.2)
    ax_lr.plot(steps, [r["lr_lm"] for r in records], label="LM-group rate", lw=1.2)
    ax_rho = ax_lr.twinx()
    ax_rho.plot(steps, [r["rho"] for r in records], color="gray", ls="--", lw=0.9, label="rho")
    ax_rho.set_ylabel("rho", color="gray")
    ax_lr.set_xlabel("step")
    ax_lr.set_ylabel("learning rate")
    ax_lr.legend(fontsize=8, loc="upper right")
    ax_lr.grid(alpha=0.3)

    drift = [(r["step"], r["drift"]) for r in records if r.get("drift") is not None]
    if drift:
        ax_d = ax_loss.twinx()
        ax_d.plot(*zip(*drift), color="tab:red", ls=":", lw=1.0, label="teacher drift")
        ax_d.set_ylabel("drift", color="tab:red")

    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=DPI)
    plt.close(fig)
    return out_path


def plot_grid_results(aggregated: list[dict], x_axis: str, out_path,
                      group_axis: str | None = None) -> Path:
    """Mean BLEU (with min-max bars) against one grid axis.

    ``aggregated`` rows carry the cell's axis values plus ``mean_bleu``,
    ``min_bleu``, ``max_bleu``.
    """
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=FIGSIZE)
    groups: dict = {}
    for row in aggregated:
        key = row.get(group_axis) if group_axis else None
        groups.setdefault(key, []).append(row)

    numeric_x = all(isinstance(r.get(x_axis), (int, float)) for r in aggregated)
    for key, rows in sorted(groups.items(), key=lambda kv: str(kv[0])):
        rows = sorted(rows, key=lambda r: (r.get(x_axis) if numeric_x else str(r.get(x_axis))))
        xs = [r[x_axis] for r in rows]
        if not numeric_x:
            xs = [str(x) for x in xs]
        means = [r["mean_bleu"] for r in rows]
        err_lo = [r["mean_bleu"] - r["min_bleu"] for r in rows]
        err_hi = [r["max_bleu"] - r["mean_bleu"] for r in rows]
        label = str(key) if key is not None else "BLEU"
        ax.errorbar(xs, means, yerr=[err_lo, err_hi], marker="o", capsize=3,
                    lw=1.3, label=label)
    if numeric_x and len({r[x_axis] for r in aggregated}) > 2:
        ax.set_xscale("log")
    ax.set_xlabel(x_axis)
    ax.set_ylabel("BLEU")
    ax.grid(alpha=0.3)
    if group_axis:
        ax.legend(title=group_axis, fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=DPI)
    plt.close(fig)
    return out_path
