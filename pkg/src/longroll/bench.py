"""Evaluation metrics and the ablation harness."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .numerics import ContractError

PSNR_CAP = 99.0
SSIM_WINDOW = 7
C1, C2 = 0.01**2, 0.03**2


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """SSIM of the channel-mean luminance with a 7x7 uniform window (valid
    positions only), unit dynamic range."""
    _check_pair(a, b)
    x = a.double().reshape(-1, *a.shape[-2:]).mean(0)[None, None] if a.dim() > 2 else a.double()[None, None]
    y = b.double().reshape(-1, *b.shape[-2:]).mean(0)[None, None] if b.dim() > 2 else b.double()[None, None]
    pool = lambda t: F.avg_pool2d(t, SSIM_WINDOW, stride=1)
    mx, my = pool(x), pool(y)
    vx = pool(x * x) - mx * mx
    vy = pool(y * y) - my * my
    cov = pool(x * y) - mx * my
    num = (2 * mx * my + C1) * (2 * cov + C2)
    den = (mx * mx + my * my + C1) * (vx + vy + C2)
    return float((num / den).mean())


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    _check_pair(a, b)
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def capped(v: float) -> float:
    return min(v, PSNR_CAP)


def frame_diff(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a.double() - b.double()).abs().mean())


def seam_indices(plan) -> list[int]:
    """Index of the first newly generated frame of every clip after the first."""
    return [s + plan.overlap for s, _ in plan.windows[1:]]


def seam_discontinuity(video: Sequence[torch.Tensor], plan) -> list[float]:
    """Mean |f_s - f_(s-1)| at each seam minus the median within-clip
    adjacent-frame difference."""
    if len(video) != plan.total_frames:
        raise ContractError(f"video has {len(video)} frames, plan covers {plan.total_frames}")
    seams = seam_indices(plan)
    if not seams:
        return []
    seam_set = set(seams)
    inner = [frame_diff(video[j], video[j - 1]) for j in range(1, len(video)) if j not in seam_set]
    base = float(np.median(inner)) if inner else 0.0
    return [frame_diff(video[s], video[s - 1]) - base for s in seams]


def clip_ssims(video: Sequence[torch.Tensor], truth: Sequence[torch.Tensor], plan) -> list[float]:
    """Per-window mean SSIM against ground truth, over the frames that window generated."""
    out = []
    for i, (s, e) in enumerate(plan.windows):
        lo = s if i == 0 else s + plan.overlap
        out.append(float(np.mean([ssim(video[j], truth[j]) for j in range(lo, e)])))
    return out


def clip_psnrs(video, truth, plan) -> list[float]:
    out = []
    for i, (s, e) in enumerate(plan.windows):
        lo = s if i == 0 else s + plan.overlap
        out.append(float(np.mean([capped(psnr(video[j], truth[j])) for j in range(lo, e)])))
    return out


def drift_slope(values: Sequence[float]) -> float:
    """Least-squares slope of a metric against clip index."""
    if len(values) < 2:
        return 0.0
    x = np.arange(len(values), dtype=np.float64)
    return float(np.polyfit(x, np.asarray(values, dtype=np.float64), 1)[0])


@dataclass
class MetricsReport:
    label: str
    seed: int
    config_hash: str
    ssim: list[float]
    psnr: list[float]
    seams: list[float]
    drift: float = 0.0

    def __post_init__(self):
        self.drift = drift_slope(self.ssim)
        vals = [*self.ssim, *self.psnr, *self.seams]
        if not all(np.isfinite(vals)):
            raise ContractError(f"non-finite metric in report {self.label}")

    @property
    def mean_seam(self) -> float:
        return float(np.mean(self.seams)) if self.seams else 0.0

    def to_dict(self) -> dict:
        return {"label": self.label, "seed": self.seed, "config_hash": self.config_hash, "ssim": self.ssim,
                "psnr": self.psnr, "seams": self.seams, "drift": self.drift, "mean_seam": self.mean_seam}


def evaluate(video, truth, plan, label: str, seed: int, config_hash: str) -> MetricsReport:
    return MetricsReport(label, seed, config_hash, clip_ssims(video, truth, plan), clip_psnrs(video, truth, plan),
                         seam_discontinuity(video, plan))


REPORT_FIELDS = ["config_hash", "label", "seed", "clip", "metric", "value"]
SEAM_FIELDS = ["config_hash", "label", "seed", "seam", "frame", "score"]
SUMMARY_FIELDS = ["config_hash", "label", "seeds", "mean_ssim", "drift_slope", "mean_psnr", "mean_seam"]


def write_reports(reports: Sequence[MetricsReport], plan, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seams = seam_indices(plan)
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in reports:
            for i, (s, p) in enumerate(zip(r.ssim, r.psnr)):
                w.writerow([r.config_hash, r.label, r.seed, i, "ssim", f"{s:.6f}"])
                w.writerow([r.config_hash, r.label, r.seed, i, "psnr", f"{capped(p):.6f}"])
    with open(out_dir / "seams.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SEAM_FIELDS)
        for r in reports:
            for i, (frame, score) in enumerate(zip(seams, r.seams)):
                w.writerow([r.config_hash, r.label, r.seed, i, frame, f"{score:.6f}"])


def summarize(reports: Sequence[MetricsReport]) -> list[dict]:
    rows = []
    for label in dict.fromkeys(r.label for r in reports):
        rs = [r for r in reports if r.label == label]
        rows.append({
            "config_hash": rs[0].config_hash,
            "label": label,
            "seeds": len(rs),
            "mean_ssim": float(np.mean([np.mean(r.ssim) for r in rs])),
            "drift_slope": float(np.mean([r.drift for r in rs])),
            "mean_psnr": float(np.mean([np.mean(r.psnr) for r in rs])),
            "mean_seam": float(np.mean([r.mean_seam for r in rs])),
        })
    return rows


def write_summary(rows: Sequence[dict], out_dir) -> None:
    with open(Path(out_dir) / "ablation_summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


# label -> (checkpoint stage, global normalization, unified noise)
ABLATIONS: dict[str, tuple[int, bool, bool]] = {
    "full": (3, True, True),
    "no_global_norm": (3, False, True),
    "no_unified_noise": (3, True, False),
    "no_both": (3, False, False),
    "stage1_only": (1, True, True),
    "stage2_only": (2, True, True),
}


def eval_seeds(cfg: dict, seeds: Sequence[int] | None = None) -> list[int]:
    return list(seeds) if seeds is not None else list(cfg["bench"]["seeds"])


def run_ablation(cfg: dict, run_dir, out_dir=None, suite: Sequence[str] | None = None,
                 seeds: Sequence[int] | None = None, windows: int | None = None,
                 progress=None) -> list[MetricsReport]:
    """Evaluate every configuration in ``suite`` on the same long scenes and
    noise seeds; writes report/seams/summary CSVs when ``out_dir`` is given."""
    from . import config as config_mod
    from .pipeline import MissingPrerequisite, ae_path, load_ae, load_stage, rollout_scene
    from .rollout import plan_clips, total_for
    from .scenegen import long_spec

    suite = list(suite) if suite is not None else list(ABLATIONS)
    unknown = [s for s in suite if s not in ABLATIONS]
    if unknown:
        raise ContractError(f"unknown ablation(s) {unknown}")
    windows = windows or cfg["bench"]["windows"]
    seeds = eval_seeds(cfg, seeds)
    if not ae_path(run_dir).exists():
        raise MissingPrerequisite(f"missing prerequisite: autoencoder checkpoint {ae_path(run_dir)}")
    ae = load_ae(ae_path(run_dir))
    models = {st: load_stage(run_dir, st) for st in sorted({ABLATIONS[s][0] for s in suite})}
    ro = cfg["rollout"]
    total = total_for(windows, ro["clip_frames"], ro["overlap"])
    chash = config_mod.config_hash(cfg)
    reports = []
    for label in suite:
        stage, gnorm, unified = ABLATIONS[label]
        model, meta = models[stage]
        for seed in seeds:
            spec = long_spec(seed, total, cfg["data"]["size"], cfg["data"]["size"])
            out = rollout_scene(cfg, model, ae, spec, windows, noise_seed=seed, n_hist_max=meta.get("n_hist_max", 0),
                                global_norm=gnorm, unified_noise=unified)
            reports.append(evaluate(out.result.frames, list(out.truth), out.plan, label, seed, chash))
            if progress is not None:
                progress(label, seed, reports[-1])
    if out_dir is not None:
        plan = plan_clips(total, ro["clip_frames"], ro["overlap"])
        write_reports(reports, plan, out_dir)
        write_summary(summarize(reports), out_dir)
    return reports


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
