"""Static figures from run directories: training curves and the bound report."""

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ReportError

MAX_POINTS = 1000

_LOSS_KEYS = ("model_loss", "actor_loss", "critic_loss", "u_mean")


def _downsample(x, y):
    if len(x) > MAX_POINTS:
        idx = np.unique(np.linspace(0, len(x) - 1, MAX_POINTS).astype(int))
        return np.asarray(x)[idx], np.asarray(y)[idx]
    return np.asarray(x), np.asarray(y)


def read_metrics(run_dir: str) -> list[dict]:
    path = os.path.join(run_dir, "metrics.jsonl")
    if not os.path.exists(path):
        raise ReportError(f"{run_dir}: no metrics.jsonl")
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def plot_runs(run_dirs: list[str], out_dir: str) -> list[str]:
    """Success-rate and loss curves for one or more runs; returns file paths."""
    if not run_dirs:
        raise ReportError("no run directories given")
    os.makedirs(out_dir, exist_ok=True)
    written = []

    fig, axis = plt.subplots(figsize=(6, 4))
    for run_dir in run_dirs:
        records = [r for r in read_metrics(run_dir) if r.get("phase") in ("eval", "final")]
        if not records:
            continue
        x = [r.get("env_steps", r["step"]) for r in records]
        y = [r["success_rate"] for r in records]
        x, y = _downsample(x, y)
        axis.plot(x, y, marker="o", label=os.path.basename(os.path.normpath(run_dir)))
    axis.set_xlabel("environment steps")
    axis.set_ylabel("eval success rate")
    axis.set_ylim(-0.05, 1.05)
    if axis.get_legend_handles_labels()[0]:
        axis.legend(fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, "success_rate.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    for key, axis in zip(_LOSS_KEYS, axes.flat):
        for run_dir in run_dirs:
            records = [r for r in read_metrics(run_dir) if key in r]
            if not records:
                continue
            x = [r["step"] for r in records]
            y = [r[key] for r in records]
            x, y = _downsample(x, y)
            axis.plot(x, y, label=os.path.basename(os.path.normpath(run_dir)), lw=0.8)
        axis.set_title(key, fontsize=9)
        axis.set_xlabel("gradient step")
    if axes.flat[0].get_legend_handles_labels()[0]:
        axes.flat[0].legend(fontsize=7)
    fig.tight_layout()
    path = os.path.join(out_dir, "losses.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written


def plot_bound(run_dir: str, out_dir: str) -> str:
    """Gap versus scaled uncertainty estimate across checkpoints."""
    path = os.path.join(run_dir, "report", "bound_report.json")
    if not os.path.exists(path):
        raise ReportError(f"{run_dir}: no bound report; run bound-report first")
    with open(path) as f:
        report = json.load(f)
    records = report["records"]
    epochs = [r["epoch"] for r in records]
    gaps = [r["gap"] for r in records]
    scaled = [r["eps_scaled"] for r in records]
    fig, axis = plt.subplots(figsize=(6, 4))
    axis.plot(epochs, gaps, marker="o", label="performance gap")
    axis.plot(epochs, scaled, marker="s", label="fitted 2*alpha*eps")
    axis.set_xlabel("checkpoint step")
    axis.legend(fontsize=8)
    fig.tight_layout()
    os.makedirs(out_dir, exist_ok=True)
    out = os.path.join(out_dir, "bound.png")
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
