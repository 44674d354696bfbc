"""The full conditional denoiser: backbone, optional control branches and
history tokens."""
from __future__ import annotations

from typing import Optional

import torch
from torch import nn

from .control import ControlBranches, fuse_block, half_copy_init
from .diffusion import Backbone, BackboneConfig
from .history import ConditionPack

# parameter groups by name prefix
SELF_ATTENTION = "self_attention"


class VideoDenoiser(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.base = Backbone(cfg)
        self.control: Optional[ControlBranches] = None

    def attach_control(self) -> ControlBranches:
        self.control = half_copy_init(self.base)
        return self.control

    def group_of(self, name: str) -> str:
        if name.startswith("control."):
            return "control"
        if ".attn." in name:
            return SELF_ATTENTION
        return "base"

    def _frame_tokens(self, z_t: torch.Tensor, pack: ConditionPack) -> torch.Tensor:
        b, f = z_t.shape[:2]
        cond = torch.zeros_like(z_t)
        mask = torch.zeros(b, f, 1, *z_t.shape[-2:], dtype=z_t.dtype)
        if pack is not None and pack.z_I is not None:
            cond[:, 0] = pack.z_I
            mask[:, 0] = 1.0
        return self.base.patchify(torch.cat([z_t, cond, mask], dim=2))

    def _history_tokens(self, z_hist: torch.Tensor) -> torch.Tensor:
        b, n = z_hist.shape[:2]
        ones = torch.ones(b, n, 1, *z_hist.shape[-2:], dtype=z_hist.dtype)
        return self.base.patchify(torch.cat([torch.zeros_like(z_hist), z_hist, ones], dim=2))

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, pack: Optional[ConditionPack] = None,
                use_control: bool = True) -> torch.Tensor:
        base = self.base
        b, f = z_t.shape[:2]
        tokens = self._frame_tokens(z_t, pack)
        n_hist = 0
        if pack is not None and pack.n_hist:
            n_hist = pack.n_hist
            tokens = torch.cat([self._history_tokens(pack.z_hist_in), tokens], dim=1)
        x = base.embed(tokens) + base.positions(n_hist, f)
        c = base.time_cond(torch.as_tensor(t), b)
        prefix = n_hist * base.tokens_per_frame
        controlled = (use_control and self.control is not None and pack is not None and pack.c_D is not None)
        if controlled:
            cd, cp = self.control.tokenize(base.patchify(pack.c_D), base.patchify(pack.c_P))
        for l, blk in enumerate(base.blocks):
            if controlled and l < self.control.controlled:
                x, cd, cp = fuse_block(blk, self.control, l, x, cd, cp, c, pack.lam, prefix)
            else:
                x = blk(x, c)
        out = base.final(x, c)[:, prefix:]
        return base.eps_from_v(base.unpatchify(out, f), z_t, torch.as_tensor(t))
