"""Post-run reporting: summary tables, IID-vs-non-IID gaps, figures.

Everything here is derived from metrics.csv alone, so reports can be
regenerated (or recomputed independently) long after a run finished.
Figures are rendered to PNG next to the CSV output; pass figures=False
to skip them.
"""

from __future__ import annotations

import csv
import os
from collections import defaultdict

import numpy as np

from .errors import ConfigError
from .federation import read_metrics

DEFAULT_THRESHOLD = 0.80
NO_THRESHOLD = "—"


def _final_dice(rows):
    """(strategy, partition, seed) -> test dice at the last round."""
    finals = {}
    last_round = {}
    for row in rows:
        key = (row["strategy"], row["partition"], row["seed"])
        if key not in last_round or row["round"] > last_round[key]:
            last_round[key] = row["round"]
            finals[key] = row["test_dice"]
    return finals


def rounds_to_threshold(rows, strategy, partition, seed, threshold):
    """First round at which the arm reaches `threshold`, or None."""
    best = None
    for row in rows:
        if (row["strategy"], row["partition"], row["seed"]) != (strategy, partition, seed):
            continue
        if row["test_dice"] >= threshold and (best is None or row["round"] < best):
            best = row["round"]
    return best


def summarize_rows(rows, threshold=DEFAULT_THRESHOLD):
    """Aggregate metrics rows into one record per (strategy, partition).

    Reports the across-seed mean and population sd of the final-round
    dice, plus the mean rounds-to-threshold over the seeds that reached
    it (sentinel when none did).
    """
    finals = _final_dice(rows)
    arms = defaultdict(list)
    for (strategy, partition, seed), dice in finals.items():
        arms[(strategy, partition)].append((seed, dice))
    summary = []
    for (strategy, partition), entries in sorted(arms.items()):
        entries.sort()
        dices = np.array([d for _, d in entries], dtype=np.float64)
        reach = [
            rounds_to_threshold(rows, strategy, partition, seed, threshold)
            for seed, _ in entries
        ]
        reached = [r for r in reach if r is not None]
        summary.append({
            "strategy": strategy,
            "partition": partition,
            "seeds": len(entries),
            "final_dice_mean": float(dices.mean()),
            "final_dice_sd": float(dices.std(ddof=0)),
            "rounds_to_threshold": (
                f"{np.mean(reached):.1f}" if reached else NO_THRESHOLD
            ),
            "reached_seeds": len(reached),
        })
    return summary


def render_summary(summary, threshold):
    head = (
        f"{'strategy':<16} {'partition':<14} {'seeds':>5} "
        f"{'final dice':>12} {'sd':>8} {'rounds to ' + format(threshold, '.2f'):>14}"
    )
    lines = [head, "-" * len(head)]
    for rec in summary:
        lines.append(
            f"{rec['strategy']:<16} {rec['partition']:<14} {rec['seeds']:>5} "
            f"{rec['final_dice_mean']:>12.4f} {rec['final_dice_sd']:>8.4f} "
            f"{rec['rounds_to_threshold']:>14}"
        )
    return "\n".join(lines)


def write_summary_csv(summary, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "strategy", "partition", "seeds", "final_dice_mean",
            "final_dice_sd", "rounds_to_threshold", "reached_seeds",
        ])
        for rec in summary:
            writer.writerow([
                rec["strategy"], rec["partition"], rec["seeds"],
                f"{rec['final_dice_mean']:.6f}", f"{rec['final_dice_sd']:.6f}",
                rec["rounds_to_threshold"], rec["reached_seeds"],
            ])


def gap_rows(rows):
    """Per-strategy, per-seed final-dice gap between IID and each
    non-IID partition present; strategies lacking an IID arm (or the
    non-IID arm) come back in the `incomparable` list."""
    finals = _final_dice(rows)
    strategies = sorted({s for s, _, _ in finals})
    partitions = sorted({p for _, p, _ in finals})
    noniid = [p for p in partitions if p not in ("iid", "pooled")]
    out = []
    incomparable = []
    for strategy in strategies:
        seeds = sorted({sd for s, p, sd in finals if s == strategy})
        for part in noniid:
            pairs = []
            for seed in seeds:
                iid = finals.get((strategy, "iid", seed))
                non = finals.get((strategy, part, seed))
                if iid is None or non is None:
                    continue
                pairs.append((seed, iid, non))
            if not pairs:
                if any((strategy, part, sd) in finals or (strategy, "iid", sd) in finals
                       for sd in seeds):
                    incomparable.append((strategy, part))
                continue
            for seed, iid, non in pairs:
                out.append({
                    "strategy": strategy, "noniid_partition": part,
                    "seed": str(seed), "iid_dice": iid, "noniid_dice": non,
                    "gap": iid - non,
                })
            out.append({
                "strategy": strategy, "noniid_partition": part, "seed": "mean",
                "iid_dice": float(np.mean([p[1] for p in pairs])),
                "noniid_dice": float(np.mean([p[2] for p in pairs])),
                "gap": float(np.mean([p[1] - p[2] for p in pairs])),
            })
    return out, incomparable


def render_gaps(gaps, incomparable):
    head = f"{'strategy':<16} {'vs partition':<16} {'seed':>6} {'iid':>9} {'non-iid':>9} {'gap':>9}"
    lines = [head, "-" * len(head)]
    for rec in gaps:
        lines.append(
            f"{rec['strategy']:<16} {rec['noniid_partition']:<16} {rec['seed']:>6} "
            f"{rec['iid_dice']:>9.4f} {rec['noniid_dice']:>9.4f} {rec['gap']:>9.4f}"
        )
    for strategy, part in incomparable:
        lines.append(f"{strategy:<16} {part:<16} incomparable (missing arm)")
    return "\n".join(lines)


def write_gaps_csv(gaps, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "strategy", "noniid_partition", "seed", "iid_dice", "noniid_dice", "gap",
        ])
        for rec in gaps:
            writer.writerow([
                rec["strategy"], rec["noniid_partition"], rec["seed"],
                f"{rec['iid_dice']:.6f}", f"{rec['noniid_dice']:.6f}",
                f"{rec['gap']:.6f}",
            ])


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def convergence_figure(rows, out_path, partition):
    """Mean test-dice curve per strategy for one partition."""
    plt = _pyplot()
    by_strategy = defaultdict(lambda: defaultdict(list))
    for row in rows:
        if row["partition"] == partition:
            by_strategy[row["strategy"]][row["round"]].append(row["test_dice"])
    if not by_strategy:
        return False
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for strategy in sorted(by_strategy):
        per_round = by_strategy[strategy]
        xs = sorted(per_round)
        ys = [float(np.mean(per_round[r])) for r in xs]
        ax.plot(xs, ys, label=strategy, linewidth=1.6)
    ax.set_xlabel("communication round")
    ax.set_ylabel("test dice (mean over seeds)")
    ax.set_title(f"Convergence, {partition} partition")
    ax.set_ylim(0.0, 1.0)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return True


def gaps_figure(gaps, out_path):
    """Bar chart of the mean IID-minus-non-IID gap per strategy."""
    plt = _pyplot()
    means = [g for g in gaps if g["seed"] == "mean"]
    if not means:
        return False
    parts = sorted({g["noniid_partition"] for g in means})
    strategies = sorted({g["strategy"] for g in means})
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    width = 0.8 / max(len(parts), 1)
    xs = np.arange(len(strategies), dtype=np.float64)
    for i, part in enumerate(parts):
        vals = []
        for s in strategies:
            rec = next(
                (g for g in means if g["strategy"] == s and g["noniid_partition"] == part),
                None,
            )
            vals.append(rec["gap"] if rec else np.nan)
        ax.bar(xs + i * width, vals, width=width, label=f"iid − {part}")
    ax.set_xticks(xs + width * (len(parts) - 1) / 2)
    ax.set_xticklabels(strategies, rotation=15, fontsize=8)
    ax.set_ylabel("final dice gap")
    ax.set_title("Performance drop from non-IID partitioning")
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return True


def summarize_file(metrics_path, threshold=DEFAULT_THRESHOLD, out_dir=None,
                   figures=True, echo=print):
    """The `summarize` entry point: table to stdout, summary.csv and
    convergence figures next to the metrics file (or in out_dir)."""
    rows = read_metrics(metrics_path)
    if not rows:
        raise ConfigError(f"{metrics_path}: no data rows")
    out_dir = out_dir or os.path.dirname(os.path.abspath(metrics_path))
    os.makedirs(out_dir, exist_ok=True)
    summary = summarize_rows(rows, threshold)
    echo(render_summary(summary, threshold))
    sidecar = os.path.join(os.path.dirname(os.path.abspath(metrics_path)),
                           "standalone_clients.csv")
    if os.path.exists(sidecar):
        echo(_render_standalone_sidecar(sidecar))
    write_summary_csv(summary, os.path.join(out_dir, "summary.csv"))
    written = [os.path.join(out_dir, "summary.csv")]
    if figures:
        for partition in sorted({r["partition"] for r in rows}):
            path = os.path.join(out_dir, f"convergence_{partition}.png")
            if convergence_figure(rows, path, partition):
                written.append(path)
    return written


def _render_standalone_sidecar(path):
    """Both aggregations of per-client standalone results, labeled."""
    best = defaultdict(lambda: -1.0)
    mean_acc = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["partition"], int(row["seed"]))
            dice = float(row["final_dice"])
            best[key] = max(best[key], dice)
            mean_acc[key].append(dice)
    lines = ["", "standalone per-client detail (from standalone_clients.csv):"]
    for key in sorted(best):
        partition, seed = key
        lines.append(
            f"  {partition:<14} seed {seed}: mean of clients "
            f"{np.mean(mean_acc[key]):.4f}, best client {best[key]:.4f}"
        )
    return "\n".join(lines)


def gaps_file(metrics_path, out_dir=None, figures=True, echo=print):
    """The `gaps` entry point: per-strategy IID-vs-non-IID table,
    gaps.csv, and a bar-chart figure."""
    rows = read_metrics(metrics_path)
    if not rows:
        raise ConfigError(f"{metrics_path}: no data rows")
    out_dir = out_dir or os.path.dirname(os.path.abspath(metrics_path))
    os.makedirs(out_dir, exist_ok=True)
    gaps, incomparable = gap_rows(rows)
    echo(render_gaps(gaps, incomparable))
    write_gaps_csv(gaps, os.path.join(out_dir, "gaps.csv"))
    written = [os.path.join(out_dir, "gaps.csv")]
    if figures:
        path = os.path.join(out_dir, "gaps.png")
        if gaps_figure(gaps, path):
            written.append(path)
    return written
