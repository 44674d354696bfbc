"""Per-frame lossy autoencoder that defines the latent space."""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .numerics import ContractError, NumericError, Rng

log = logging.getLogger(__name__)


class FrameAutoencoder(nn.Module):
    """Two stride-2 patch maps with pointwise mixing (3x32x32 -> 4x8x8), mirrored decoder.

    ``shift``/``scale`` are per-channel latent statistics fitted after
    training so that latents are roughly zero-mean and unit-variance.
    """

    def __init__(self, latent_channels: int = 4, hidden: int = 64):
        super().__init__()
        self.enc = nn.Sequential(
            nn.Conv2d(3, hidden, 2, 2), nn.GELU(),
            nn.Conv2d(hidden, hidden, 1), nn.GELU(),
            nn.Conv2d(hidden, hidden, 2, 2), nn.GELU(),
            nn.Conv2d(hidden, latent_channels, 1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(latent_channels, hidden, 1), nn.GELU(),
            nn.ConvTranspose2d(hidden, hidden, 2, 2), nn.GELU(),
            nn.Conv2d(hidden, hidden, 1), nn.GELU(),
            nn.ConvTranspose2d(hidden, 3, 2, 2),
        )
        self.register_buffer("shift", torch.zeros(latent_channels))
        self.register_buffer("scale", torch.ones(latent_channels))
        self.register_buffer("trained", torch.zeros(()))
        self.latent_channels = latent_channels

    def _check(self):
        if not bool(self.trained):
            raise ContractError("autoencoder parameters are untrained")

    def raw_encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.enc(x)

    def raw_decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.dec(z)

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        self._check()
        lead = frames.shape[:-3]
        z = self.enc(frames.reshape(-1, *frames.shape[-3:]))
        z = (z - self.shift[:, None, None]) / self.scale[:, None, None]
        return z.reshape(*lead, *z.shape[1:])

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        self._check()
        lead = z.shape[:-3]
        z = z.reshape(-1, *z.shape[-3:]) * self.scale[:, None, None] + self.shift[:, None, None]
        x = self.dec(z).clamp(0.0, 1.0)
        return x.reshape(*lead, *x.shape[1:])

    def roundtrip(self, frames: torch.Tensor, k: int = 1) -> torch.Tensor:
        for _ in range(k):
            frames = self.decode(self.encode(frames))
        return frames


def train_ae(frames: torch.Tensor, epochs: int, rng: Rng, batch: int = 64, lr: float = 2e-3,
             model: FrameAutoencoder | None = None, hidden: int = 64) -> tuple[FrameAutoencoder, list[float]]:
    """Fit the autoencoder on ``frames`` (N x 3 x H x W).

    Returns the model and the per-epoch mean reconstruction loss, with entry 0
    holding the loss at initialization.
    """
    if frames.shape[0] == 0:
        raise ContractError("autoencoder corpus is empty")
    torch.manual_seed(rng.stream("ae-init").integers(2**31))
    ae = model if model is not None else FrameAutoencoder(hidden=hidden)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, epochs), eta_min=lr * 0.05)

    def full_loss() -> float:
        with torch.no_grad():
            return float(torch.mean((ae.raw_decode(ae.raw_encode(frames)) - frames).double() ** 2))

    history = [full_loss()]
    n = frames.shape[0]
    for epoch in range(epochs):
        order = rng.stream("ae-order", epoch).permutation(n)
        for start in range(0, n, batch):
            idx = torch.from_numpy(order[start:start + batch])
            x = frames[idx]
            loss = torch.mean((ae.raw_decode(ae.raw_encode(x)) - x) ** 2)
            if not torch.isfinite(loss):
                raise NumericError(f"autoencoder loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
        history.append(full_loss())
        log.info("event=train_ae epoch=%d loss=%.6f", epoch + 1, history[-1])
    fit_latent_stats(ae, frames)
    ae.trained.fill_(1.0)
    return ae, history


@torch.no_grad()
def fit_latent_stats(ae: FrameAutoencoder, frames: torch.Tensor) -> None:
    z = ae.raw_encode(frames).double()
    ae.shift.copy_(z.mean(dim=(0, 2, 3)).float())
    ae.scale.copy_(z.std(dim=(0, 2, 3)).clamp_min(1e-3).float())


def roundtrip_psnr_curve(ae: FrameAutoencoder, frames: torch.Tensor, ks: Sequence[int]) -> list[float]:
    from .bench import psnr

    out = []
    with torch.no_grad():
        cur, done = frames, 0
        for k in sorted(ks):
            cur = ae.roundtrip(cur, k - done)
            done = k
            out.append(float(np.mean([psnr(a, b) for a, b in zip(frames, cur)])))
    return out
