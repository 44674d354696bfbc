"""Autoregressive clip-by-clip generation with shared initial noise and
globally normalized controls."""
from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .diffusion import NoiseSchedule, denoise
from .history import ConditionPack, blend_boundary
from .numerics import ContractError, NumericError, Rng
from .scenegen import SceneSpec, gen_scene, rasterize_tracks, track_points


def nearest_rank(sorted_vals: np.ndarray, p: int) -> float:
    n = len(sorted_vals)
    idx = max(1, -(-p * n // 100))  # ceil(p/100 * n), 1-based
    return float(sorted_vals[idx - 1])


def global_normalize(depth: torch.Tensor, lo_pct: int = 5, hi_pct: int = 95) -> torch.Tensor:
    """Clip to the nearest-rank 5th/95th percentiles of all values, then map
    linearly to [0, 1]. A degenerate range maps everything to 0.5."""
    if depth.numel() == 0:
        raise ContractError("cannot normalize an empty sequence")
    vals = np.sort(depth.detach().reshape(-1).numpy().astype(np.float64))
    lo, hi = nearest_rank(vals, lo_pct), nearest_rank(vals, hi_pct)
    if hi == lo:
        return torch.full_like(depth, 0.5)
    out = (depth.double().clamp(lo, hi) - lo) / (hi - lo)
    return out.float()


@dataclass(frozen=True)
class RolloutPlan:
    windows: tuple[tuple[int, int], ...]
    overlap: int
    total_frames: int
    noise_seed: int = 0

    def to_dict(self) -> dict:
        return {"windows": [list(w) for w in self.windows], "overlap": self.overlap,
                "total_frames": self.total_frames, "noise_seed": self.noise_seed}


def plan_clips(total_frames: int, clip_frames: int, overlap: int = 1, noise_seed: int = 0) -> RolloutPlan:
    if not clip_frames > overlap >= 0:
        raise ContractError("need clip_frames > overlap >= 0")
    stride = clip_frames - overlap
    if total_frames < clip_frames or (total_frames - clip_frames) % stride:
        raise ContractError(f"{total_frames} frames are not reachable with clips of {clip_frames} overlapping by {overlap}")
    n = (total_frames - clip_frames) // stride + 1
    return RolloutPlan(tuple((i * stride, i * stride + clip_frames) for i in range(n)), overlap, total_frames, noise_seed)


def total_for(windows: int, clip_frames: int, overlap: int = 1) -> int:
    return clip_frames + (windows - 1) * (clip_frames - overlap)


def recompute_sparse_per_clip(spec: SceneSpec, window: tuple[int, int], normalized_depth: torch.Tensor) -> torch.Tensor:
    """Seed a fresh point grid at the window start and colour it with the
    (already normalized) depth of that window."""
    start, end = window
    if normalized_depth.shape[0] != end - start:
        raise ContractError("normalized depth does not match the window length")
    tracks = track_points(spec, start, end - start)
    return rasterize_tracks(tracks, end - start, spec.height, spec.width, normalized_depth)


@dataclass
class ControlStreams:
    dense: list[torch.Tensor]  # per window, F x 1 x H x W normalized depth
    sparse: list[torch.Tensor]  # per window, F x 3 x H x W pointmaps


def prepare_controls(spec: SceneSpec, plan: RolloutPlan, depth: torch.Tensor, global_norm: bool = True) -> ControlStreams:
    """depth: the raw depth of the whole sequence (total x 1 x H x W)."""
    dense, sparse = [], []
    normed = global_normalize(depth) if global_norm else None
    for s, e in plan.windows:
        d = normed[s:e] if global_norm else global_normalize(depth[s:e])
        dense.append(d)
        sparse.append(recompute_sparse_per_clip(spec, (s, e), d))
    return ControlStreams(dense, sparse)


def digest(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().contiguous().numpy().tobytes()).hexdigest()[:16]


@dataclass
class RolloutResult:
    frames: list[torch.Tensor] = field(default_factory=list)
    noise_digests: list[str] = field(default_factory=list)
    cond_digests: list[str] = field(default_factory=list)
    prev_last_digests: list[str] = field(default_factory=list)
    peak_state_frames: int = 0
    clips: int = 0


def autoregressive_rollout(model: Callable, ae, encode_controls: Callable, first_frame: torch.Tensor,
                           streams: ControlStreams, plan: RolloutPlan, sched: NoiseSchedule, *,
                           n_hist_max: int = 0, steps: int = 25, unified_noise: bool = True,
                           boundary_blend: bool = False, sink: Optional[Callable[[torch.Tensor], None]] = None,
                           keep_frames: bool = True) -> RolloutResult:
    """Generate ``plan.total_frames`` frames clip by clip.

    Clip i+1 takes the last decoded frame of clip i as its first frame and the
    up-to ``n_hist_max`` frames before that as history. New frames go to
    ``sink`` (and to the result when ``keep_frames``).
    """
    rng = Rng(plan.noise_seed)
    res = RolloutResult()
    buffer: deque[torch.Tensor] = deque(maxlen=n_hist_max + 1)
    c, s = ae.latent_channels, model.cfg.latent_size

    def emit(frames):
        for fr in frames:
            buffer.append(fr)
            if sink is not None:
                sink(fr)
            if keep_frames:
                res.frames.append(fr)

    for i, (start, end) in enumerate(plan.windows):
        f = end - start
        cond_frame = first_frame if i == 0 else buffer[-1]
        history = list(buffer)[:-1] if i > 0 else []
        history = history[len(history) - min(n_hist_max, len(history)):] if n_hist_max else []
        with torch.no_grad():
            c_D, c_P = encode_controls(streams.dense[i], streams.sparse[i])
            z_I = ae.encode(cond_frame[None])
            pack = ConditionPack(z_I=z_I, c_D=c_D[None], c_P=c_P[None], frames=f)
            if history:
                z_h = ae.encode(torch.stack(history))[None]
                pack.z_hist, pack.z_hist_in = z_h, z_h
            noise = rng.normal("rollout-noise", (1, f, c, s, s), counter=0 if unified_noise else i + 1)
            hook = (lambda x0: blend_boundary(x0, z_I)) if boundary_blend else None
            try:
                z0 = denoise(model, noise, len(sched) - 1, steps, pack, sched, x0_hook=hook)
            except NumericError as exc:
                raise NumericError(f"clip {i}: {exc}") from exc
            frames = ae.decode(z0[0])
        if not torch.isfinite(frames).all():
            raise NumericError(f"non-finite frames in clip {i}")
        res.noise_digests.append(digest(noise))
        res.cond_digests.append(digest(cond_frame))
        emit(frames if i == 0 else frames[plan.overlap:])
        res.prev_last_digests.append(digest(buffer[-1]))
        res.peak_state_frames = max(res.peak_state_frames, len(buffer))
        res.clips += 1
    return res
