"""Noise schedule, forward noising, epsilon loss, deterministic sampler and
the patch-token transformer backbone."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
from torch import nn

from .numerics import ContractError, NumericError


class NoiseSchedule:
    def __init__(self, betas):
        betas = torch.as_tensor(betas, dtype=torch.float64)
        if not ((betas > 0) & (betas < 1)).all():
            raise ContractError("betas must lie in (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bar = torch.cumprod(self.alphas, 0)

    @classmethod
    def linear(cls, steps: int = 50, beta_start: float | None = None, beta_end: float | None = None) -> "NoiseSchedule":
        # DDPM's 1e-4..0.02 over 1000 steps, rescaled to keep the same total noise
        beta_start = beta_start if beta_start is not None else 0.1 / steps
        beta_end = beta_end if beta_end is not None else 20.0 / steps
        return cls(torch.linspace(beta_start, beta_end, steps, dtype=torch.float64))

    def __len__(self) -> int:
        return len(self.betas)

    def abar(self, t) -> torch.Tensor:
        return self.alpha_bar[torch.as_tensor(t)]

    def check_t(self, t) -> None:
        tt = torch.as_tensor(t)
        if bool((tt < 0).any()) or bool((tt >= len(self)).any()):
            raise ContractError(f"timestep {t} outside [0, {len(self)})")


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return v.to(like.dtype).reshape(-1, *([1] * (like.dim() - 1))) if v.dim() else v.to(like.dtype)


def add_noise(sched: NoiseSchedule, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; ``t`` is an int or a per-batch tensor."""
    sched.check_t(t)
    if eps.shape != z0.shape:
        raise ContractError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    ab = sched.abar(t)
    return _bcast(ab.sqrt(), z0) * z0 + _bcast((1 - ab).sqrt(), z0) * eps


def predict_x0(sched: NoiseSchedule, z_t: torch.Tensor, t, eps_hat: torch.Tensor) -> torch.Tensor:
    ab = sched.abar(t)
    return (z_t - _bcast((1 - ab).sqrt(), z_t) * eps_hat) / _bcast(ab.sqrt(), z_t)


def eps_loss(model: Callable, pack, z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule,
             frame_weights: Optional[torch.Tensor] = None, return_pred: bool = False):
    """Mean squared noise-prediction error (accumulated in float64).

    ``frame_weights`` (length F) rescales each frame's contribution before
    averaging; latents are B x F x C x h x w.
    """
    z_t = add_noise(sched, z0, t, eps)
    eps_hat = model(z_t, torch.as_tensor(t), pack)
    err = (eps.double() - eps_hat.double()) ** 2
    if frame_weights is not None:
        err = err * frame_weights.double().reshape(1, -1, 1, 1, 1)
    loss = err.mean()
    if not torch.isfinite(loss):
        raise NumericError("epsilon loss is not finite")
    return (loss, eps_hat) if return_pred else loss


def timestep_sequence(t_start: int, steps: int) -> list[int]:
    seq = torch.linspace(t_start, 0, steps).round().long().tolist()
    out = []
    for t in seq:
        if not out or t < out[-1]:
            out.append(t)
    return out


@torch.no_grad()
def denoise(model: Callable, z_start: torch.Tensor, t_start: int, steps: int, pack, sched: NoiseSchedule,
            x0_hook: Optional[Callable[[torch.Tensor], torch.Tensor]] = None) -> torch.Tensor:
    """Deterministic DDIM (eta = 0) from ``t_start`` to a clean latent."""
    if steps < 1:
        raise ContractError("denoise needs at least one step")
    sched.check_t(t_start)
    if t_start == 0:
        return z_start.clone()
    z = z_start
    ts = timestep_sequence(t_start, steps)
    b = z.shape[0]
    x0 = z
    for i, t in enumerate(ts):
        eps_hat = model(z, torch.full((b,), t, dtype=torch.long), pack)
        x0 = predict_x0(sched, z, t, eps_hat)
        if x0_hook is not None:
            x0 = x0_hook(x0)
            # keep the update consistent with the edited clean estimate
            ab_t = sched.abar(t)
            eps_hat = (z - ab_t.sqrt().to(z.dtype) * x0) / (1 - ab_t).sqrt().to(z.dtype)
        if not torch.isfinite(x0).all():
            raise NumericError(f"non-finite latent at timestep {t}")
        if i + 1 < len(ts):
            ab = sched.abar(ts[i + 1])
            z = ab.sqrt().to(z.dtype) * x0 + (1 - ab).sqrt().to(z.dtype) * eps_hat
    return x0


# ---------------------------------------------------------------------------
# backbone

def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // self.heads), dim=-1)
        return self.proj((att @ v).transpose(1, 2).reshape(b, n, d))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU(approximate="tanh")
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """adaLN transformer block; ``cond_dim`` is the timestep-embedding width."""

    def __init__(self, dim: int, heads: int, cond_dim: int, mlp_ratio: int = 4):
        super().__init__()
        self.dim = dim
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(dim, mlp_ratio * dim)
        self.ada = nn.Linear(cond_dim, 6 * dim)

    def forward(self, x, c):
        s1, g1, a1, s2, g2, a2 = self.ada(c).chunk(6, dim=-1)
        x = x + a1[:, None] * self.attn(modulate(self.norm1(x), s1, g1))
        x = x + a2[:, None] * self.mlp(modulate(self.norm2(x), s2, g2))
        return x


@dataclass
class BackboneConfig:
    latent_channels: int = 4
    latent_size: int = 8
    patch: int = 2
    dim: int = 64
    heads: int = 4
    depth: int = 4
    controlled: int = 2
    max_frames: int = 9
    max_history: int = 4
    t_steps: int = 50


class Backbone(nn.Module):
    """Patch-token video transformer.

    Every latent frame contributes (latent_size/patch)^2 tokens built from the
    noisy latent, a condition latent and a binary mask channel. The head
    predicts v = sqrt(abar) eps - sqrt(1 - abar) z0; ``eps_from_v`` turns it
    into the noise estimate the sampler and losses use.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c, p = cfg.latent_channels, cfg.patch
        self.tokens_per_frame = (cfg.latent_size // p) ** 2
        self.embed = nn.Linear((2 * c + 1) * p * p, cfg.dim)
        self.pos_space = nn.Parameter(torch.randn(self.tokens_per_frame, cfg.dim) * 0.02)
        self.pos_time = nn.Parameter(torch.randn(cfg.max_history + cfg.max_frames, cfg.dim) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.dim, cfg.dim), nn.SiLU(), nn.Linear(cfg.dim, cfg.dim))
        self.blocks = nn.ModuleList([Block(cfg.dim, cfg.heads, cfg.dim) for _ in range(cfg.depth)])
        self.norm_out = nn.LayerNorm(cfg.dim, elementwise_affine=False, eps=1e-6)
        self.ada_out = nn.Linear(cfg.dim, 2 * cfg.dim)
        self.head = nn.Linear(cfg.dim, c * p * p)
        self.register_buffer("abar", NoiseSchedule.linear(cfg.t_steps).alpha_bar.float(), persistent=False)
        for blk in self.blocks:
            nn.init.zeros_(blk.ada.weight)
            nn.init.zeros_(blk.ada.bias)
        nn.init.zeros_(self.ada_out.weight)
        nn.init.zeros_(self.ada_out.bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        """B x F x C x h x w -> B x (F * T) x (C p p)."""
        b, f, c, h, w = x.shape
        p = self.cfg.patch
        x = x.reshape(b, f, c, h // p, p, w // p, p).permute(0, 1, 3, 5, 2, 4, 6)
        return x.reshape(b, f * (h // p) * (w // p), c * p * p)

    def unpatchify(self, tok: torch.Tensor, frames: int) -> torch.Tensor:
        b = tok.shape[0]
        p, c, s = self.cfg.patch, self.cfg.latent_channels, self.cfg.latent_size
        g = s // p
        x = tok.reshape(b, frames, g, g, c, p, p).permute(0, 1, 4, 2, 5, 3, 6)
        return x.reshape(b, frames, c, s, s)

    def time_cond(self, t: torch.Tensor, batch: int) -> torch.Tensor:
        t = t.reshape(-1).expand(batch) if t.numel() == 1 else t.reshape(-1)
        return self.time_mlp(timestep_embedding(t, self.cfg.dim).to(self.pos_space.dtype))

    def positions(self, n_hist: int, n_frames: int) -> torch.Tensor:
        base = self.cfg.max_history
        pt = self.pos_time[base - n_hist: base + n_frames]
        return (pt[:, None, :] + self.pos_space[None]).reshape(-1, self.cfg.dim)

    def eps_from_v(self, v: torch.Tensor, z_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        t = t.reshape(-1).long()
        ab = self.abar.to(z_t.dtype)[t].reshape(-1, *([1] * (z_t.dim() - 1)))
        return ab.sqrt() * v + (1 - ab).sqrt() * z_t

    def final(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.ada_out(c).chunk(2, dim=-1)
        return self.head(modulate(self.norm_out(x), shift, scale))
