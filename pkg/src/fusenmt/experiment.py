"""Ablation grid runner: cross products of strategy sets, data sizes,
LM-rate regimes, teacher tap layers, and seeds, with TSV/text/figure output."""

from __future__ import annotations

import copy
import json
import logging
import time
from itertools import product
from pathlib import Path

import numpy as np

from .checkpoint import canonical_json
from .config import ConfigError, ExperimentConfig
from .train import Trainer, prepare_task, pretrain_teacher_for

log = logging.getLogger(__name__)

STRATEGY_SETS = {
    "baseline": set(),
    "ad": {"ad"},
    "ds": {"ds"},
    "sched": {"sched"},
    "all": {"ad", "ds", "sched"},
}


def _strategy_set(name: str) -> set[str]:
    if name in STRATEGY_SETS:
        return set(STRATEGY_SETS[name])
    parts = {p for p in name.replace("+", ",").split(",") if p}
    unknown = parts - {"ad", "ds", "sched"}
    if unknown:
        raise ConfigError(f"unknown strategy {name!r}")
    return parts


def _apply_axis(cfg_dict: dict, axis: str, value) -> dict:
    if axis == "strategy":
        fus = cfg_dict.setdefault("fusion", {})
        chosen = _strategy_set(value)
        fus["use_ad"] = "ad" in chosen
        fus["use_ds"] = "ds" in chosen
        fus["use_schedule"] = "sched" in chosen
    elif axis == "data_size":
        cfg_dict.setdefault("task", {})["n_pairs"] = int(value)
    elif axis == "lm_regime":
        fus = cfg_dict.setdefault("fusion", {})
        fus["lm_regime"] = value
        fus["use_schedule"] = True
    elif axis == "teacher_tap_layer":
        cfg_dict.setdefault("fusion", {})["teacher_tap_layer"] = value
    elif axis == "alpha":
        cfg_dict.setdefault("fusion", {})["alpha"] = float(value)
    elif axis == "ad_side":
        cfg_dict.setdefault("fusion", {})["ad_side"] = value
    else:
        raise ConfigError(f"unknown grid axis {axis!r}")
    return cfg_dict


KNOWN_GRID_KEYS = {"base", "axes", "seeds", "eval"}


def parse_grid(payload: dict) -> tuple[dict, dict, list[int], dict]:
    unknown = sorted(set(payload) - KNOWN_GRID_KEYS)
    if unknown:
        raise ConfigError(f"unknown grid key(s) {unknown}")
    base = payload.get("base", {})
    axes = payload.get("axes", {})
    seeds = payload.get("seeds", [1])
    eval_cfg = {"beam": 1, "length_penalty": 0.6, "limit": None}
    eval_cfg.update(payload.get("eval", {}))
    if not isinstance(axes, dict) or not axes:
        raise ConfigError("grid needs a nonempty 'axes' object")
    for axis, values in axes.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"axis {axis!r} needs a nonempty list of values")
        _apply_axis(json.loads(json.dumps(base)), axis, values[0])  # validate axis name
    ExperimentConfig.from_dict(base)  # validate base eagerly
    return base, axes, list(seeds), eval_cfg


def run_grid(payload: dict, out_dir, save_metrics: bool = True) -> tuple[list[dict], list[dict], int]:
    """Run every cell; returns (per-run rows, aggregated rows, n_failures).

    A failing cell is recorded and the grid continues.
    """
    base, axes, seeds, eval_cfg = parse_grid(payload)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    axis_names = list(axes)
    data_cache: dict[str, object] = {}
    teacher_cache: dict[str, object] = {}
    rows: list[dict] = []
    failures = 0

    for values in product(*(axes[a] for a in axis_names)):
        cell = dict(zip(axis_names, values))
        for seed in seeds:
            started = time.perf_counter()
            row = {**cell, "seed": seed}
            try:
                cfg_dict = json.loads(json.dumps(base))
                for axis, value in cell.items():
                    _apply_axis(cfg_dict, axis, value)
                cfg_dict["seed"] = seed
                cfg = ExperimentConfig.from_dict(cfg_dict)

                data_key = canonical_json({"task": cfg.to_dict()["task"], "seed": seed})
                if data_key not in data_cache:
                    data_cache[data_key] = prepare_task(cfg)
                data = data_cache[data_key]

                teacher = None
                if cfg.needs_teacher:
                    tkey = canonical_json({"task": cfg.to_dict()["task"],
                                           "teacher": cfg.to_dict()["teacher"], "seed": seed})
                    if tkey not in teacher_cache:
                        teacher_cache[tkey] = pretrain_teacher_for(cfg, data)[0]
                    # trainable regimes mutate the teacher, so hand out copies
                    teacher = copy.deepcopy(teacher_cache[tkey])

                trainer = Trainer(cfg, data, teacher=teacher)
                cell_name = "_".join(f"{a}-{cell[a]}" for a in axis_names) + f"_seed-{seed}"
                metrics_path = out_dir / "cells" / f"{cell_name}.jsonl" if save_metrics else None
                trainer.run(metrics_path=metrics_path, quiet=True)
                row["bleu"] = trainer.corpus_bleu(
                    data.test_pairs or data.val_pairs, beam=eval_cfg["beam"],
                    length_penalty=eval_cfg["length_penalty"], limit=eval_cfg["limit"])
                row["drift"] = trainer.current_drift() if teacher is not None else None
                row["seconds"] = round(time.perf_counter() - started, 2)
                row["status"] = "ok"
            except Exception as exc:  # cell failure must not sink the grid
                log.exception("grid cell %s seed %s failed", cell, seed)
                row.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                           bleu=None, drift=None,
                           seconds=round(time.perf_counter() - started, 2))
                failures += 1
            rows.append(row)
            log.info("cell %s seed %s: %s", cell, seed,
                     f"BLEU {row['bleu']:.2f}" if row.get("bleu") is not None else row["status"])

    aggregated = aggregate_rows(rows, axis_names)
    write_outputs(rows, aggregated, axis_names, out_dir)
    return rows, aggregated, failures


def aggregate_rows(rows: list[dict], axis_names: list[str]) -> list[dict]:
    """Mean and range of BLEU over seeds for each cell."""
    cells: dict[tuple, list[dict]] = {}
    for row in rows:
        cells.setdefault(tuple(row[a] for a in axis_names), []).append(row)
    out = []
    for key, cell_rows in cells.items():
        scores = [r["bleu"] for r in cell_rows if r.get("bleu") is not None]
        agg = dict(zip(axis_names, key))
        agg["n_seeds"] = len(scores)
        agg["mean_bleu"] = float(np.mean(scores)) if scores else None
        agg["min_bleu"] = float(np.min(scores)) if scores else None
        agg["max_bleu"] = float(np.max(scores)) if scores else None
        drifts = [r["drift"] for r in cell_rows if r.get("drift") is not None]
        agg["mean_drift"] = float(np.mean(drifts)) if drifts else None
        out.append(agg)
    return out


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.2f}" if abs(value) >= 0.01 or value == 0 else f"{value:.3g}"
    return str(value)


def _write_tsv(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(row.get(c)) for c in columns) + "\n")


def _aligned_table(rows: list[dict], columns: list[str]) -> str:
    str_rows = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(sr[i]) for sr in str_rows)) if str_rows else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    for sr in str_rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(sr, widths)))
    return "\n".join(lines) + "\n"


def write_outputs(rows: list[dict], aggregated: list[dict], axis_names: list[str],
                  out_dir: Path) -> None:
    run_cols = axis_names + ["seed", "bleu", "drift", "seconds", "status"]
    _write_tsv(out_dir / "runs.tsv", rows, run_cols)
    agg_cols = axis_names + ["n_seeds", "mean_bleu", "min_bleu", "max_bleu", "mean_drift"]
    _write_tsv(out_dir / "results.tsv", aggregated, agg_cols)
    (out_dir / "results.txt").write_text(_aligned_table(aggregated, agg_cols), encoding="utf-8")

    # figures: BLEU against each axis, grouped by the other axis when present
    from .plots import plot_grid_results

    fig_dir = out_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    plottable = [r for r in aggregated if r.get("mean_bleu") is not None]
    if not plottable:
        return
    for axis in axis_names:
        if len({r[axis] for r in plottable}) < 2:
            continue
        others = [a for a in axis_names if a != axis and len({r[a] for r in plottable}) > 1]
        group = others[0] if len(others) == 1 else None
        if len(others) > 1:
            continue  # more than two varying axes: no readable 2-D figure
        plot_grid_results(plottable, axis, fig_dir / f"bleu_vs_{axis}.png", group_axis=group)
