"""Staged training and checkpoints.

Stage 0 pretrains the base denoiser (the stand-in for a pretrained video
model). Stage 1 learns the control branches on a frozen base, stage 2 adds
first-frame degradation, stage 3 adds history context and unfreezes the base
self-attention.
"""
from __future__ import annotations

import csv
import math
import io
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import config as config_mod
from .autoencoder import FrameAutoencoder
from .control import apply_data_degradation, feature_degrade
from .degrade import DegradationChoice, DegradationConfig, apply_choice, sample_degradation
from .diffusion import BackboneConfig, NoiseSchedule, add_noise, eps_loss, predict_x0
from .history import ConditionPack, frame_weight_vector, sample_n_hist, temporal_losses
from .model import SELF_ATTENTION, VideoDenoiser
from .numerics import ContractError, NumericError, Rng, read_tensor, write_tensor
from .rollout import global_normalize
from .scenegen import SceneClip, render_frame, render_pointmap

log = logging.getLogger(__name__)

CKPT_MAGIC = b"LVCK"
CKPT_VERSION = 1
LOG_FIELDS = ["stage", "iter", "loss", "loss_eps", "L_cons", "L_deg", "L_gt", "L_temp", "degradation_kind"]


class MissingPrerequisite(ContractError):
    pass


class TrainingAborted(NumericError):
    def __init__(self, msg: str, last_good: Optional[Path] = None):
        super().__init__(msg)
        self.last_good = last_good


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    """Atomic write of a named tensor table plus JSON metadata."""
    path = Path(path)
    body = io.BytesIO()
    entries = []
    for name in sorted(tensors):
        offset = body.tell()
        n = write_tensor(body, tensors[name])
        entries.append({"name": name, "offset": offset, "nbytes": n})
    index = json.dumps({"version": CKPT_VERSION, "meta": meta, "tensors": entries}, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(index)))
        fh.write(index)
        fh.write(body.getvalue())
        fh.flush()
        os.fsync(fh.fileno())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisite(f"missing prerequisite checkpoint {path}")
    raw = path.read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ContractError(f"{path} is not a checkpoint (bad magic)")
    version, n = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise ContractError(f"checkpoint version {version} != {CKPT_VERSION}")
    try:
        index = json.loads(raw[12:12 + n])
    except json.JSONDecodeError as exc:
        raise ContractError(f"corrupt checkpoint index in {path}") from exc
    body = io.BytesIO(raw[12 + n:])
    tensors = {}
    for e in index["tensors"]:
        body.seek(e["offset"])
        tensors[e["name"]] = read_tensor(body)
    return tensors, index["meta"]


def save_ae(ae: FrameAutoencoder, path, meta: Optional[dict] = None) -> None:
    meta = dict(meta or {})
    meta.update(kind="autoencoder", hidden=ae.enc[0].out_channels, latent_channels=ae.latent_channels)
    save_checkpoint(path, {k: v.detach() for k, v in ae.state_dict().items()}, meta)


def load_ae(path) -> FrameAutoencoder:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "autoencoder":
        raise ContractError(f"{path} is not an autoencoder checkpoint")
    ae = FrameAutoencoder(meta["latent_channels"], meta["hidden"])
    ae.load_state_dict(tensors)
    ae.requires_grad_(False)
    return ae


def backbone_config(cfg: dict) -> BackboneConfig:
    d = cfg["diffusion"]
    return BackboneConfig(latent_channels=cfg["autoencoder"]["latent_channels"], latent_size=cfg["data"]["size"] // 4,
                          patch=d["patch"], dim=d["dim"], heads=d["heads"], depth=d["depth"],
                          controlled=d["controlled"], max_frames=cfg["rollout"]["clip_frames"],
                          max_history=cfg["history"]["n_hist_max"], t_steps=d["t_steps"])


def save_model(path, model: VideoDenoiser, meta: dict, optimizer: Optional[torch.optim.Optimizer] = None,
               names: Optional[list[str]] = None) -> None:
    tensors = {f"model/{k}": v.detach() for k, v in model.state_dict().items()}
    if optimizer is not None:
        for name, p in zip(names, optimizer.param_groups[0]["params"]):
            st = optimizer.state.get(p, {})
            for key in ("exp_avg", "exp_avg_sq", "step"):
                if key in st:
                    tensors[f"opt/{name}/{key}"] = torch.as_tensor(st[key], dtype=torch.float32).detach().reshape(
                        st[key].shape if torch.is_tensor(st[key]) else ())
    meta = {**meta, "has_control": model.control is not None, "backbone": asdict(model.cfg)}
    save_checkpoint(path, tensors, meta)


def load_model(path) -> tuple[VideoDenoiser, dict, dict]:
    """Returns (model, meta, optimizer tensors keyed by parameter name)."""
    tensors, meta = load_checkpoint(path)
    if "backbone" not in meta:
        raise ContractError(f"{path} is not a denoiser checkpoint")
    model = VideoDenoiser(BackboneConfig(**meta["backbone"]))
    if meta.get("has_control"):
        model.attach_control()
    model.load_state_dict({k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")})
    opt = {}
    for k, v in tensors.items():
        if k.startswith("opt/"):
            name, key = k[4:].rsplit("/", 1)
            opt.setdefault(name, {})[key] = v
    return model, meta, opt


# ---------------------------------------------------------------------------
# stage configuration

GROUPS = {0: ("base", SELF_ATTENTION), 1: ("control",), 2: ("control",), 3: ("control", SELF_ATTENTION)}


@dataclass
class StageConfig:
    stage: int
    iterations: int
    lr: float
    trainable: tuple[str, ...]
    frame_degradation: bool = False
    alpha: float = 0.0
    beta: float = 0.0
    warmup: int = 0
    history: bool = False
    boundary: bool = False
    temporal: bool = False
    batch: int = 8
    weight_decay: float = 0.01
    cond_drop: float = 0.0
    seed: int = 0
    ckpt_every: int = 50
    n_hist_override: Optional[int] = None
    lr_decay: bool = False
    v_weighting: bool = False

    def lr_at(self, it: int) -> float:
        """Learning rate at iteration ``it``: constant, or a short linear
        warmup into cosine decay down to 1% when ``lr_decay`` is set."""
        if not self.lr_decay or self.iterations <= 1:
            return self.lr
        warm = max(1, self.iterations // 20)
        if it < warm:
            return self.lr * (it + 1) / warm
        frac = (it - warm) / max(1, self.iterations - warm - 1)
        return self.lr * (0.01 + 0.99 * 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac))))

    def validate(self) -> None:
        if self.stage not in GROUPS:
            raise ContractError(f"unknown stage {self.stage}")
        if self.iterations > 0 and not 0 <= self.warmup < self.iterations:
            raise ContractError("warmup must be shorter than the stage")
        if self.stage in (1, 2) and set(self.trainable) & {"base", SELF_ATTENTION}:
            raise ContractError("stages 1-2 keep the base frozen")

    def ramp(self, it: int) -> float:
        """Degradation strength multiplier: 0 during warmup, then linear up to 1."""
        if it < self.warmup:
            return 0.0
        if self.warmup == 0:
            return 1.0
        return min(1.0, (it - self.warmup + 1) / (self.iterations - self.warmup))


def stage_config(cfg: dict, stage: int) -> StageConfig:
    tr, ctl = cfg["train"], cfg["control"]
    iters = int(tr["iters"][stage])
    sc = StageConfig(stage, iters, float(tr["lr"][stage]), GROUPS[stage], batch=int(tr["batch"][stage]),
                     weight_decay=tr["weight_decay"], seed=tr["seed"], ckpt_every=tr["ckpt_every"],
                     lr_decay=bool(tr["lr_decay"][stage]))
    if stage == 0:
        sc.cond_drop = tr["cond_drop"]
        sc.v_weighting = tr["base_loss"] == "v"
    if stage >= 1:
        sc.alpha, sc.beta = ctl["alpha"], ctl["beta"]
    if stage >= 2:
        sc.frame_degradation = True
    if stage == 2:
        sc.warmup = int(round(iters * tr["warmup_fraction"]))
    if stage == 3:
        sc.history = sc.boundary = sc.temporal = True
    sc.validate()
    return sc


def degradation_config(cfg: dict) -> DegradationConfig:
    d = cfg["degradation"]
    dc = DegradationConfig(d["p_apply"], d["p_encoding"], d["k_min"], d["k_max"], tuple(d["t_set"]), d["severity_ratio"])
    dc.validate()
    return dc


# ---------------------------------------------------------------------------
# data

def encode_controls(ae: FrameAutoencoder, depth: torch.Tensor, pointmap: torch.Tensor):
    """Dense: normalized depth tiled to three channels; sparse: pointmaps."""
    with torch.no_grad():
        return ae.encode(depth.expand(*depth.shape[:-3], 3, *depth.shape[-2:]).contiguous()), ae.encode(pointmap)


def render_frames(spec, start: int, n: int) -> torch.Tensor:
    return torch.from_numpy(np.stack([render_frame(spec, start + k)[0] for k in range(n)]).astype(np.float32))


@dataclass
class TrainData:
    rgb: torch.Tensor  # N x F x 3 x H x W
    z0: torch.Tensor  # N x F x C x h x w
    depth: torch.Tensor  # N x F x 1 x H x W, per-clip normalized
    pointmap: torch.Tensor  # N x F x 3 x H x W, coloured by normalized depth
    c_D: torch.Tensor
    c_P: torch.Tensor
    history: torch.Tensor  # N x n_hist_max x 3 x H x W (frames before the clip)

    def __len__(self):
        return self.rgb.shape[0]


def prepare_data(clips: list[SceneClip], ae: FrameAutoencoder, n_hist_max: int, num_points: int = 49) -> TrainData:
    rgb, z0, depth, pm, cd, cp, hist = [], [], [], [], [], [], []
    for i, clip in enumerate(clips):
        d = global_normalize(clip.depth)
        p = render_pointmap(clip, num_points, Rng(clip.spec.seed), depth=d)
        c_D, c_P = encode_controls(ae, d, p)
        with torch.no_grad():
            z0.append(ae.encode(clip.rgb))
        rgb.append(clip.rgb)
        depth.append(d)
        pm.append(p)
        cd.append(c_D)
        cp.append(c_P)
        spec = clip.spec
        hist.append(render_frames(spec, spec.start_frame - n_hist_max, n_hist_max) if n_hist_max
                    else torch.zeros(0, *clip.rgb.shape[1:]))
    return TrainData(torch.stack(rgb), torch.stack(z0), torch.stack(depth), torch.stack(pm), torch.stack(cd),
                     torch.stack(cp), torch.stack(hist))


# ---------------------------------------------------------------------------
# batches and objective

@dataclass
class Batch:
    z0: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    pack: ConditionPack
    n_hist: int
    kinds: list[str] = field(default_factory=list)


class Trainer:
    """Holds everything a stage needs besides the trainee itself."""

    def __init__(self, cfg: dict, data: TrainData, ae: FrameAutoencoder, snapshot: Optional[VideoDenoiser] = None):
        self.cfg = cfg
        self.data = data
        self.ae = ae
        self.snapshot = snapshot
        self.sched = NoiseSchedule.linear(cfg["diffusion"]["t_steps"])
        self.deg = degradation_config(cfg)
        h = cfg["history"]
        self.n_hist_max = h["n_hist_max"]
        self.loss_weights = (h["lambda_deg"], h["lambda_gt"], h["lambda_cons"])
        self.fusion_n = cfg["control"]["fusion_n"]

    def _degrade_frames(self, frames: torch.Tensor, choice: DegradationChoice, g: np.random.Generator) -> torch.Tensor:
        if choice.kind == "none":
            return frames
        eps = None
        if choice.kind == "generation":
            eps = torch.from_numpy(g.standard_normal((frames.shape[0], self.ae.latent_channels,
                                                      *self.data.z0.shape[-2:]), dtype=np.float32))
        return apply_choice(choice, self.ae, frames, self.snapshot, self.sched, eps,
                            lambda n: ConditionPack(frames=1))

    def build_batch(self, sc: StageConfig, it: int) -> Batch:
        rng = Rng(sc.seed + 1000 * sc.stage)
        g = rng.stream("batch", it)
        gd = rng.stream("degradation", it)
        n = len(self.data)
        idx = g.choice(n, min(sc.batch, n), replace=False)
        b = len(idx)
        t = torch.from_numpy(g.integers(0, len(self.sched), b))
        eps = rng.normal("noise", (b, *self.data.z0.shape[1:]), counter=it)
        scale = sc.ramp(it)
        kinds = []

        lam = torch.ones(b)
        c_D = self.data.c_D[idx].clone()
        for j, i in enumerate(idx):
            _, lam_j = feature_degrade(None, sc.alpha * scale, gd)
            lam[j] = lam_j
            if lam_j != 1.0:
                kinds.append("feature")
            d, ops = apply_data_degradation(self.data.depth[i], sc.beta * scale, gd, self.fusion_n)
            if ops:
                kinds.append("data")
                c_D[j] = encode_controls(self.ae, d, self.data.pointmap[i])[0]

        n_hist = 0
        if sc.history:
            n_hist = sc.n_hist_override if sc.n_hist_override is not None else sample_n_hist(g, self.n_hist_max)

        first = self.data.rgb[idx, 0].clone()
        hist_frames = self.data.history[idx] if n_hist else None
        hist_in = hist_frames.clone() if n_hist else None
        for j in range(b):
            if sc.frame_degradation:
                ch = sample_degradation(self.deg, gd, scale)
                if ch.kind != "none":
                    kinds.append(ch.kind)
                    first[j:j + 1] = self._degrade_frames(first[j:j + 1], ch, gd)
                if n_hist:
                    ch = sample_degradation(self.deg, gd, scale)
                    if ch.kind != "none":
                        kinds.append(ch.kind)
                        hist_in[j, -n_hist:] = self._degrade_frames(hist_in[j, -n_hist:], ch, gd)
        with torch.no_grad():
            z_I = self.ae.encode(first)
            if sc.cond_drop:
                drop = torch.from_numpy(g.random(b) < sc.cond_drop)
                z_I = torch.where(drop[:, None, None, None], torch.zeros_like(z_I), z_I)
        pack = ConditionPack(z_I=z_I, frames=self.data.z0.shape[1], lam=lam)
        if sc.stage >= 1:
            pack.c_D, pack.c_P = c_D, self.data.c_P[idx]
        if n_hist:
            with torch.no_grad():
                shp = (b, n_hist, *self.data.z0.shape[2:])
                pack.z_hist = self.ae.encode(hist_frames[:, -n_hist:].reshape(-1, *first.shape[1:])).reshape(shp)
                pack.z_hist_in = self.ae.encode(hist_in[:, -n_hist:].reshape(-1, *first.shape[1:])).reshape(shp)
        return Batch(self.data.z0[idx], t, eps, pack, n_hist, kinds)

    def objective(self, model: VideoDenoiser, sc: StageConfig, batch: Batch) -> dict[str, torch.Tensor]:
        weights = frame_weight_vector(batch.z0.shape[1], True) if sc.boundary else None
        l_eps, eps_hat = eps_loss(model, batch.pack, batch.z0, batch.t, batch.eps, self.sched, weights, return_pred=True)
        zero = torch.zeros((), dtype=torch.float64)
        out = {"loss_eps": l_eps, "L_cons": zero, "L_deg": zero, "L_gt": zero, "L_temp": zero}
        if sc.temporal and batch.n_hist > 0:
            z_t = add_noise(self.sched, batch.z0, batch.t, batch.eps)
            z_hat0 = predict_x0(self.sched, z_t, batch.t, eps_hat)[:, 0]
            # x0 estimates blow up as abar -> 0; weight each item by abar_t
            w = self.sched.abar(batch.t).to(torch.float64)
            terms = temporal_losses(z_hat0, batch.pack.z_hist[:, -1], batch.pack.z_I, batch.z0[:, 0], self.loss_weights)
            for key, val in zip(("L_cons", "L_deg", "L_gt", "L_temp"), terms):
                out[key] = (w * val).mean()
        main = out["loss_eps"]
        if sc.v_weighting:
            # 1/abar per item turns the noise error into the v-prediction error
            per_item = ((batch.eps.double() - eps_hat.double()) ** 2).flatten(1).mean(1)
            main = (per_item / self.sched.abar(batch.t).to(torch.float64)).mean()
        out["loss"] = main + out["L_temp"]
        if not torch.isfinite(out["loss"]):
            raise NumericError("training loss is not finite")
        return out


def trainable_names(model: VideoDenoiser, groups) -> list[str]:
    return [n for n, _ in model.named_parameters() if model.group_of(n) in groups]


def set_trainable(model: VideoDenoiser, groups) -> list[str]:
    names = trainable_names(model, groups)
    keep = set(names)
    for n, p in model.named_parameters():
        p.requires_grad_(n in keep)
    return names


def make_optimizer(model: VideoDenoiser, names: list[str], sc: StageConfig, state: Optional[dict] = None):
    params = dict(model.named_parameters())
    opt = torch.optim.AdamW([params[n] for n in names], lr=sc.lr, weight_decay=sc.weight_decay, foreach=False)
    if state:
        for n in names:
            if n in state:
                st = state[n]
                opt.state[params[n]] = {"step": st["step"].reshape(()).clone(), "exp_avg": st["exp_avg"].clone(),
                                        "exp_avg_sq": st["exp_avg_sq"].clone()}
    return opt


def _fmt(v) -> str:
    return f"{float(v.detach() if torch.is_tensor(v) else v):.8g}"


def train_stage(sc: StageConfig, trainer: Trainer, model: VideoDenoiser, out_dir=None, start_iteration: int = 0,
                opt_state: Optional[dict] = None, stop_at: Optional[int] = None, meta: Optional[dict] = None):
    """Run iterations ``[start_iteration, stop_at or sc.iterations)``.

    Returns (model, optimizer, rows); rows are training-log dicts. With
    ``out_dir`` the log is appended to ``stage{k}_log.csv`` and partial
    checkpoints are written every ``ckpt_every`` iterations.
    """
    sc.validate()
    if sc.stage >= 1 and model.control is None:
        model.attach_control()
    names = set_trainable(model, sc.trainable)
    opt = make_optimizer(model, names, sc, opt_state)
    end = sc.iterations if stop_at is None else stop_at
    rows = []
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / f"stage{sc.stage}_log.csv"
        kept = []
        if start_iteration > 0 and log_path.exists():
            # rows logged after the checkpoint being resumed are replayed, not duplicated
            with open(log_path, newline="") as fh:
                kept = [r for r in csv.DictReader(fh) if int(r["iter"]) < start_iteration]
        log_fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(log_fh, LOG_FIELDS)
        writer.writeheader()
        writer.writerows(kept)
    last_good = None
    model.train()
    try:
        for it in range(start_iteration, end):
            batch = trainer.build_batch(sc, it)
            for group in opt.param_groups:
                group["lr"] = sc.lr_at(it)
            try:
                losses = trainer.objective(model, sc, batch)
            except NumericError as exc:
                raise TrainingAborted(f"stage {sc.stage} iteration {it}: {exc}", last_good) from exc
            opt.zero_grad(set_to_none=True)
            losses["loss"].backward()
            opt.step()
            row = {"stage": sc.stage, "iter": it, **{k: _fmt(losses[k]) for k in LOG_FIELDS[2:8]},
                   "degradation_kind": ";".join(sorted(set(batch.kinds))) or "none"}
            rows.append(row)
            if log_fh is not None:
                writer.writerow(row)
            if (it + 1) % 25 == 0 or it + 1 == end:
                log.info("event=train stage=%d iter=%d loss_eps=%s loss=%s", sc.stage, it + 1, row["loss_eps"],
                         _fmt(losses["loss"]))
            if out_dir is not None and sc.ckpt_every and (it + 1) % sc.ckpt_every == 0 and it + 1 < end:
                last_good = out_dir / f"stage{sc.stage}.partial.ckpt"
                save_model(last_good, model, {**(meta or {}), "stage": sc.stage, "iteration": it + 1,
                                              "complete": False, "rng": Rng(sc.seed).state()}, opt, names)
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return model, opt, names, rows


def smoothed(values, window: int = 30) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    k = min(window, len(v))
    return np.convolve(v, np.ones(k) / k, mode="valid")


# ---------------------------------------------------------------------------
# run-directory orchestration

def ae_path(run_dir) -> Path:
    return Path(run_dir) / "ae.ckpt"


def stage_path(run_dir, stage: int) -> Path:
    return Path(run_dir) / f"stage{stage}.ckpt"


def fresh_model(cfg: dict) -> VideoDenoiser:
    with torch.random.fork_rng():
        torch.manual_seed(int(Rng(cfg["train"]["seed"]).stream("init").integers(2**31)))
        return VideoDenoiser(backbone_config(cfg))


def load_stage(run_dir, stage: int) -> tuple[VideoDenoiser, dict]:
    path = stage_path(run_dir, stage)
    if not path.exists():
        raise MissingPrerequisite(f"missing prerequisite: stage {stage} checkpoint {path}")
    model, meta, _ = load_model(path)
    if not meta.get("complete"):
        raise MissingPrerequisite(f"missing prerequisite: stage {stage} checkpoint is incomplete")
    model.requires_grad_(False)
    model.eval()
    return model, meta


def run_stage(cfg: dict, data_dir, run_dir, stage: int, resume: bool = False, data: Optional[TrainData] = None,
              ae: Optional[FrameAutoencoder] = None) -> tuple[Path, list[dict]]:
    from .scenegen import load_corpus

    run_dir = Path(run_dir)
    if ae is None:
        if not ae_path(run_dir).exists():
            raise MissingPrerequisite(f"missing prerequisite: autoencoder checkpoint {ae_path(run_dir)}")
        ae = load_ae(ae_path(run_dir))
    sc = stage_config(cfg, stage)
    start, opt_state = 0, None
    partial = run_dir / f"stage{stage}.partial.ckpt"
    if resume and partial.exists():
        model, meta, opt_state = load_model(partial)
        start = int(meta["iteration"])
    elif stage == 0:
        model = fresh_model(cfg)
    else:
        model, _ = load_stage(run_dir, stage - 1)
    snapshot = load_stage(run_dir, 1)[0] if sc.frame_degradation else None
    if data is None:
        data = prepare_data([c for c, _ in load_corpus(data_dir)], ae, cfg["history"]["n_hist_max"], cfg["data"]["num_points"])
    trainer = Trainer(cfg, data, ae, snapshot)
    meta = {"config_hash": config_mod.config_hash(cfg), "data_dir": str(data_dir)}
    model, opt, names, rows = train_stage(sc, trainer, model, run_dir, start, opt_state, meta=meta)
    path = stage_path(run_dir, stage)
    save_model(path, model, {**meta, "stage": stage, "iteration": sc.iterations, "complete": True,
                             "rng": Rng(sc.seed).state(), "n_hist_max": trainer.n_hist_max if sc.history else 0},
               opt, names)
    if partial.exists():
        partial.unlink()
    return path, rows


@dataclass
class SceneRollout:
    result: "object"
    truth: torch.Tensor  # total x 3 x H x W
    plan: "object"


def rollout_scene(cfg: dict, model: VideoDenoiser, ae: FrameAutoencoder, spec, windows: int, noise_seed: int, *,
                  n_hist_max: int = 0, global_norm: bool = True, unified_noise: bool = True,
                  keep_frames: bool = True, sink=None) -> SceneRollout:
    """Roll out ``windows`` clips over a long synthetic scene, driven by its
    rendered depth and re-seeded point tracks, starting from its true first frame."""
    from .rollout import autoregressive_rollout, plan_clips, prepare_controls, total_for

    ro = cfg["rollout"]
    total = total_for(windows, ro["clip_frames"], ro["overlap"])
    if spec.num_frames < total:
        raise ContractError(f"scene has {spec.num_frames} frames, rollout needs {total}")
    plan = plan_clips(total, ro["clip_frames"], ro["overlap"], noise_seed)
    depth = torch.from_numpy(np.stack([render_frame(spec, k)[1] for k in range(total)]).astype(np.float32))[:, None]
    streams = prepare_controls(spec, plan, depth, global_norm=global_norm)
    truth = render_frames(spec, 0, total) if keep_frames else render_frames(spec, 0, 1)
    sched = NoiseSchedule.linear(cfg["diffusion"]["t_steps"])
    res = autoregressive_rollout(model, ae, lambda d, p: encode_controls(ae, d, p), truth[0], streams, plan, sched,
                                 n_hist_max=n_hist_max, steps=cfg["diffusion"]["sample_steps"],
                                 unified_noise=unified_noise, boundary_blend=cfg["history"]["boundary_mode"] == "blend",
                                 sink=sink, keep_frames=keep_frames)
    return SceneRollout(res, truth, plan)


def run_train_ae(cfg: dict, data_dir, run_dir) -> tuple[FrameAutoencoder, list[float]]:
    from .autoencoder import train_ae
    from .scenegen import load_corpus

    a = cfg["autoencoder"]
    clips = [c for c, _ in load_corpus(data_dir)]
    frames = torch.cat([c.rgb for c in clips])
    ae, hist = train_ae(frames, a["epochs"], Rng(cfg["train"]["seed"]), batch=a["batch"], lr=a["lr"], hidden=a["hidden"])
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    save_ae(ae, ae_path(run_dir), {"config_hash": config_mod.config_hash(cfg), "loss": hist})
    return ae, hist
