"""Input-frame degradation: repeated autoencoder round trips or
noise-then-denoise through a frozen diffusion snapshot."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .diffusion import NoiseSchedule, add_noise, denoise
from .numerics import ContractError

T_LIMIT = 15


@dataclass(frozen=True)
class DegradationConfig:
    p_apply: float = 0.2
    p_encoding: float = 0.2
    k_min: int = 0
    k_max: int = 10
    t_set: tuple[int, ...] = (1, 5, 8, 10, 12)
    severity_ratio: float = 0.7

    def validate(self) -> None:
        for name in ("p_apply", "p_encoding"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must be a probability, got {v}")
        if self.k_min < 0 or self.k_max < self.k_min:
            raise ContractError("K range must be nonnegative and ordered")
        if not self.t_set or any(t >= T_LIMIT or t < 0 for t in self.t_set):
            raise ContractError(f"generation timesteps must lie in [0, {T_LIMIT})")
        if not 0.0 < self.severity_ratio <= 1.0:
            raise ContractError("severity ratio must lie in (0, 1]")

    def k_distribution(self) -> tuple[np.ndarray, np.ndarray]:
        ks = np.arange(self.k_min, self.k_max + 1)
        w = self.severity_ratio ** (ks - self.k_min)
        return ks, w / w.sum()

    def t_distribution(self) -> tuple[np.ndarray, np.ndarray]:
        ts = np.array(sorted(self.t_set))
        w = self.severity_ratio ** np.arange(len(ts))
        return ts, w / w.sum()

    def published(self) -> dict:
        ks, pk = self.k_distribution()
        ts, pt = self.t_distribution()
        return {**asdict(self), "k_probs": dict(zip(ks.tolist(), pk.round(6).tolist())),
                "t_probs": dict(zip(ts.tolist(), pt.round(6).tolist()))}


@dataclass(frozen=True)
class DegradationChoice:
    kind: str = "none"  # none | encoding | generation
    k: Optional[int] = None
    t: Optional[int] = None


def sample_degradation(cfg: DegradationConfig, g: np.random.Generator, scale: float = 1.0) -> DegradationChoice:
    """``scale`` multiplies ``p_apply`` (used for warmup ramps)."""
    if g.random() >= cfg.p_apply * scale:
        return DegradationChoice()
    if g.random() < cfg.p_encoding:
        ks, pk = cfg.k_distribution()
        return DegradationChoice("encoding", k=int(g.choice(ks, p=pk)))
    ts, pt = cfg.t_distribution()
    return DegradationChoice("generation", t=int(g.choice(ts, p=pt)))


def encode_degrade(ae, frames: torch.Tensor, k: int) -> torch.Tensor:
    if k < 0:
        raise ContractError(f"K must be nonnegative, got {k}")
    with torch.no_grad():
        return ae.roundtrip(frames, k) if k else frames.clone()


def gen_degrade(ae, frames: torch.Tensor, t: int, model: Callable, sched: NoiseSchedule, eps: torch.Tensor,
                pack_fn: Callable[[int], object] = lambda n: None, steps: Optional[int] = None) -> torch.Tensor:
    """Decode(denoise(add_noise(encode(frames), t, eps))).

    Each frame is denoised as a one-frame clip; ``pack_fn(n)`` builds the
    conditioning for a batch of ``n`` such clips.
    """
    if t >= T_LIMIT:
        raise ContractError(f"generation degradation needs t < {T_LIMIT}, got {t}")
    with torch.no_grad():
        z = ae.encode(frames)
        z_t = add_noise(sched, z, t, eps.reshape(z.shape))
        n = z.shape[0]
        z0 = denoise(model, z_t.unsqueeze(1), t, steps or max(t, 1), pack_fn(n), sched)
        return ae.decode(z0.squeeze(1))


def apply_choice(choice: DegradationChoice, ae, frames: torch.Tensor, model=None, sched=None, eps=None, pack_fn=None) -> torch.Tensor:
    if choice.kind == "none":
        return frames
    if choice.kind == "encoding":
        return encode_degrade(ae, frames, choice.k)
    if model is None:
        raise ContractError("generation degradation needs a frozen denoiser")
    return gen_degrade(ae, frames, choice.t, model, sched, eps, pack_fn or (lambda n: None))
