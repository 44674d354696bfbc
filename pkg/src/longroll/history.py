"""History-context conditioning and boundary-frame regularization."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .numerics import ContractError, box_blur

BOUNDARY_WEIGHTS = (0.05, 0.325, 0.757)
LAMBDA_DEG, LAMBDA_GT, LAMBDA_CONS = 0.2, 0.15, 0.5


@dataclass
class ConditionPack:
    """Everything one denoising call is conditioned on (batched, B leading).

    ``z_hist`` is the clean history, ``z_hist_in`` what the model actually
    sees (degraded during training, clean at inference).
    """

    z_I: Optional[torch.Tensor] = None  # B x C x h x w
    z_hist: Optional[torch.Tensor] = None  # B x N_H x C x h x w
    z_hist_in: Optional[torch.Tensor] = None
    c_D: Optional[torch.Tensor] = None  # B x F x C x h x w
    c_P: Optional[torch.Tensor] = None
    lam: Optional[torch.Tensor] = None  # B, dense-feature scale
    frames: int = 0

    @property
    def n_hist(self) -> int:
        return 0 if self.z_hist_in is None else int(self.z_hist_in.shape[1])

    def history_mask(self) -> torch.Tensor:
        """Ones over history positions, zeros over the clip's frames."""
        return torch.cat([torch.ones(self.n_hist), torch.zeros(self.frames)])

    def validate(self, n_hist_max: int) -> None:
        if not 0 <= self.n_hist <= n_hist_max:
            raise ContractError(f"N_H={self.n_hist} outside [0, {n_hist_max}]")
        if (self.z_hist is None) != (self.z_hist_in is None):
            raise ContractError("clean and model-input history must be given together")

    def select(self, idx) -> "ConditionPack":
        pick = lambda t: None if t is None else t[idx]
        return ConditionPack(pick(self.z_I), pick(self.z_hist), pick(self.z_hist_in), pick(self.c_D),
                             pick(self.c_P), pick(self.lam), self.frames)


def assemble_condition(encode: Callable, first_frame: torch.Tensor, history_frames: Optional[torch.Tensor],
                       controls: tuple, n_hist: int, degrade: Callable = lambda x: x, frames: int = 9,
                       lam: Optional[torch.Tensor] = None) -> ConditionPack:
    """Build a batched pack.

    first_frame: B x 3 x H x W; history_frames: B x N x 3 x H x W with N >= n_hist
    (the last ``n_hist`` are used); ``degrade`` is applied to frames before
    encoding (the identity at inference).
    """
    if encode is None:
        raise ContractError("assembling a condition needs the autoencoder")
    c_D, c_P = controls
    z_I = encode(degrade(first_frame))
    if n_hist == 0:
        return ConditionPack(z_I=z_I, c_D=c_D, c_P=c_P, lam=lam, frames=frames)
    if history_frames is None or history_frames.shape[1] < n_hist:
        raise ContractError(f"need {n_hist} history frames")
    vh = history_frames[:, history_frames.shape[1] - n_hist:]
    b = vh.shape[0]
    flat = vh.reshape(-1, *vh.shape[2:])
    z_h = encode(flat).reshape(b, n_hist, *z_I.shape[1:])
    z_h_in = encode(degrade(flat)).reshape(b, n_hist, *z_I.shape[1:])
    return ConditionPack(z_I, z_h, z_h_in, c_D, c_P, lam, frames)


def sample_n_hist(g: np.random.Generator, n_max: int) -> int:
    return int(g.integers(0, n_max + 1))


def freq_split(z: torch.Tensor, k: int = 3) -> tuple[torch.Tensor, torch.Tensor]:
    """Spatial low-pass (box blur) and its residual; lp + hp == z."""
    lp = box_blur(z, k)
    return lp, z - lp


def _sqnorm(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # mean over elements, per batch item when batched (B x ...)
    d = (a.double() - b.double()) ** 2
    return d.reshape(d.shape[0], -1).mean(dim=1) if d.dim() > 3 else d.mean()


def temporal_losses(z_hat0: torch.Tensor, z_hist_last: torch.Tensor, z_deg0: torch.Tensor, z_gt0: torch.Tensor,
                    weights: tuple[float, float, float] = (LAMBDA_DEG, LAMBDA_GT, LAMBDA_CONS)):
    """(L_cons, L_deg, L_gt, L_temp) for the first predicted latent.

    Norms are mean squared errors over latent elements. Inputs with a batch
    axis (B x C x h x w) give per-item losses.
    """
    shapes = {tuple(x.shape) for x in (z_hat0, z_hist_last, z_deg0, z_gt0)}
    if len(shapes) != 1:
        raise ContractError(f"temporal loss inputs disagree in shape: {shapes}")
    lam_deg, lam_gt, lam_cons = weights
    l_cons = _sqnorm(z_hist_last, z_hat0)
    l_deg = _sqnorm(freq_split(z_deg0)[0], freq_split(z_hat0)[0])
    l_gt = _sqnorm(freq_split(z_gt0)[1], freq_split(z_hat0)[1])
    l_temp = lam_deg * l_deg + lam_gt * l_gt + lam_cons * l_cons
    return l_cons, l_deg, l_gt, l_temp


def boundary_weights(per_frame, weights=BOUNDARY_WEIGHTS):
    """Scale the first three per-frame entries; later frames keep weight 1."""
    out = list(per_frame)
    for i, w in enumerate(weights[: len(out)]):
        out[i] = out[i] * w
    return out


def frame_weight_vector(frames: int, enabled: bool = True) -> torch.Tensor:
    return torch.tensor(boundary_weights([1.0] * frames) if enabled else [1.0] * frames, dtype=torch.float32)


def blend_boundary(x0: torch.Tensor, anchor: torch.Tensor, weights=BOUNDARY_WEIGHTS) -> torch.Tensor:
    """Alternative reading of the boundary weights: pull the first generated
    latents toward the anchor latent, x <- w x + (1 - w) anchor."""
    out = x0.clone()
    for i, w in enumerate(weights[: x0.shape[1]]):
        out[:, i] = w * x0[:, i] + (1 - w) * anchor
    return out
