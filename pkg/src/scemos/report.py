"""Figure and table export for a run directory.

Renders training loss curves, the codebook usage histogram, top-down
trajectory plots over scene footprints, and a metric summary table. All
outputs land in <run>/report and regenerating is idempotent.
"""

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ScemosError


def _plot_loss_curves(run_dir, out_dir):
    logs = {}
    for name in ("tokenizer", "planner", "refiner"):
        path = run_dir / f"{name}_log.json"
        if path.exists():
            logs[name] = json.loads(path.read_text())
    if not logs:
        return None
    fig, axes = plt.subplots(1, len(logs), figsize=(4 * len(logs), 3), squeeze=False)
    for ax, (name, log) in zip(axes[0], logs.items()):
        steps = [row["step"] for row in log]
        ax.plot(steps, [row["loss"] for row in log], label="total")
        for key in ("rec", "commit"):
            if log and key in log[0]:
                ax.plot(steps, [row[key] for row in log], label=key, alpha=0.7)
        ax.set_title(f"{name} loss")
        ax.set_xlabel("step")
        ax.legend(fontsize=7)
    fig.tight_layout()
    path = out_dir / "loss_curves.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def _plot_codebook_usage(run_dir, out_dir):
    ckpt = run_dir / "tokenizer.pt"
    if not ckpt.exists():
        return None
    import torch

    data = torch.load(ckpt, weights_only=False)
    counts = np.asarray(data.get("usage_counts"))
    if counts is None:
        return None
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(np.arange(len(counts)), counts, width=1.0)
    used = int((counts > 0).sum())
    ax.set_title(f"codebook usage on train set ({used}/{len(counts)} codes used)")
    ax.set_xlabel("code index")
    ax.set_ylabel("assignments")
    fig.tight_layout()
    path = out_dir / "codebook_usage.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def _plot_trajectories(out_dir, rows, max_panels=9):
    if not rows:
        return None
    rows = rows[:max_panels]
    cols = min(3, len(rows))
    nrows = (len(rows) + cols - 1) // cols
    fig, axes = plt.subplots(nrows, cols, figsize=(3.2 * cols, 3.2 * nrows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, row in zip(axes.ravel(), rows):
        ax.axis("on")
        for box in row["boxes"]:
            lo, hi = box["min"], box["max"]
            color = "tab:green" if box["target"] else "tab:gray"
            ax.add_patch(
                plt.Rectangle(lo, hi[0] - lo[0], hi[1] - lo[1], color=color, alpha=0.5)
            )
        path = np.asarray(row["path"])
        ax.plot(path[:, 0], path[:, 1], "b-", lw=1)
        ax.plot(*path[0], "bo", ms=4)
        ax.plot(*path[-1], "b^", ms=5)
        ax.plot(*row["target"], "g*", ms=9)
        ax.set_title(f"{row['scene_id']}: {row['prompt']}", fontsize=8)
        ax.set_aspect("equal")
        ax.set_xlim(-4.2, 4.2)
        ax.set_ylim(-4.2, 4.2)
    fig.tight_layout()
    path = out_dir / "trajectories.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def _write_summary(out_dir, metrics):
    path = out_dir / "summary.csv"
    with open(path, "w") as fh:
        fh.write("metric,value\n")
        for key, value in sorted(metrics.items()):
            fh.write(f"{key},{value:.10g}\n")
    return path


def export_report(run_dir):
    """Render all available artifacts for a run; returns written paths."""
    run_dir = Path(run_dir)
    has_logs = any((run_dir / f"{n}_log.json").exists() for n in ("tokenizer", "planner", "refiner"))
    metrics_path = run_dir / "report" / "metrics.json"
    if not has_logs and not metrics_path.exists():
        raise ScemosError(f"{run_dir} holds no training logs or evaluation output")

    out_dir = run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    path = _plot_loss_curves(run_dir, out_dir)
    if path:
        written.append(path)
    path = _plot_codebook_usage(run_dir, out_dir)
    if path:
        written.append(path)

    if metrics_path.exists():
        metrics = json.loads(metrics_path.read_text())
        written.append(_write_summary(out_dir, metrics))
        traj_path = run_dir / "report" / "trajectories.json"
        if traj_path.exists():
            path = _plot_trajectories(out_dir, json.loads(traj_path.read_text()))
            if path:
                written.append(path)
    return written
