"""Figures rendered from the evaluation and training CSVs."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .bench import read_csv  # noqa: E402
from .numerics import ContractError  # noqa: E402


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_drift(rows: list[dict], path: Path, metric: str = "ssim") -> Path:
    """Seed-averaged per-clip metric for every label."""
    acc: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r["metric"] == metric:
            acc[r["label"]][int(r["clip"])].append(float(r["value"]))
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for label, per_clip in acc.items():
        xs = sorted(per_clip)
        ax.plot(xs, [np.mean(per_clip[x]) for x in xs], marker="o", label=label)
    ax.set_xlabel("clip index")
    ax.set_ylabel(f"mean {metric.upper()} vs ground truth")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_seams(rows: list[dict], path: Path) -> Path:
    acc: dict[str, list[float]] = defaultdict(list)
    for r in rows:
        acc[r["label"]].append(float(r["score"]))
    labels = list(acc)
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.bar(labels, [np.mean(acc[k]) for k in labels],
           yerr=[np.std(acc[k]) / max(1.0, np.sqrt(len(acc[k]))) for k in labels], capsize=3)
    ax.set_ylabel("mean seam discontinuity")
    ax.tick_params(axis="x", labelrotation=30, labelsize=7)
    return _save(fig, path)


def plot_training(logs: list[Path], path: Path, window: int = 25) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    offset = 0
    for log_path in logs:
        rows = read_csv(log_path)
        if not rows:
            continue
        loss = np.array([float(r["loss_eps"]) for r in rows])
        k = min(window, len(loss))
        smooth = np.convolve(loss, np.ones(k) / k, mode="valid")
        ax.plot(np.arange(len(smooth)) + offset + k - 1, smooth, label=f"stage {rows[0]['stage']}")
        offset += len(loss)
    ax.set_xlabel("iteration (stages concatenated)")
    ax.set_ylabel("noise-prediction loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    return _save(fig, path)


def render_report(in_dir, out_dir=None, train_dir=None) -> list[Path]:
    """Render every figure whose source CSV exists; returns written paths."""
    in_dir = Path(in_dir)
    out_dir = Path(out_dir) if out_dir is not None else in_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if (in_dir / "report.csv").exists():
        rows = read_csv(in_dir / "report.csv")
        written.append(plot_drift(rows, out_dir / "drift_ssim.png", "ssim"))
        written.append(plot_drift(rows, out_dir / "drift_psnr.png", "psnr"))
    if (in_dir / "seams.csv").exists():
        written.append(plot_seams(read_csv(in_dir / "seams.csv"), out_dir / "seams.png"))
    logs = sorted(Path(train_dir).glob("stage*_log.csv")) if train_dir is not None else []
    if logs:
        written.append(plot_training(logs, out_dir / "training_loss.png"))
    if not written:
        raise ContractError(f"nothing to report: no report.csv, seams.csv or training logs under {in_dir}")
    return written
