"""Dense/sparse control branches with zero-initialized fusion, plus the
feature-level and data-level control degradations."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .diffusion import Backbone, Block
from .numerics import ContractError, box_blur, resample

DENSE, SPARSE = 0, 1
LAMBDA_RANGE = (0.05, 1.0)
BLUR_KERNELS = (3, 5, 7)


def parity_index(n: int, parity: int) -> torch.Tensor:
    return torch.arange(parity, n, 2)


def _chunked_index(n_chunks: int, width: int, parity: int) -> torch.Tensor:
    idx = parity_index(width, parity)
    return torch.cat([idx + k * width for k in range(n_chunks)])


@torch.no_grad()
def _copy_block_half(src: Block, dst: Block, parity: int) -> None:
    d = src.dim
    half = parity_index(d, parity)
    hid = parity_index(src.mlp.fc1.out_features, parity)
    qkv = _chunked_index(3, d, parity)
    ada = _chunked_index(6, d, parity)
    dst.attn.qkv.weight.copy_(src.attn.qkv.weight[qkv][:, half])
    dst.attn.qkv.bias.copy_(src.attn.qkv.bias[qkv])
    dst.attn.proj.weight.copy_(src.attn.proj.weight[half][:, half])
    dst.attn.proj.bias.copy_(src.attn.proj.bias[half])
    dst.mlp.fc1.weight.copy_(src.mlp.fc1.weight[hid][:, half])
    dst.mlp.fc1.bias.copy_(src.mlp.fc1.bias[hid])
    dst.mlp.fc2.weight.copy_(src.mlp.fc2.weight[half][:, hid])
    dst.mlp.fc2.bias.copy_(src.mlp.fc2.bias[half])
    dst.ada.weight.copy_(src.ada.weight[ada])
    dst.ada.bias.copy_(src.ada.bias[ada])


class ControlBranches(nn.Module):
    """Two half-width copies of the first ``M`` base blocks and one bias-free
    zero-initialized fusion map per controlled block."""

    def __init__(self, dim: int, heads: int, cond_dim: int, controlled: int, patch_dim: int, tokens: int, frames: int):
        super().__init__()
        if dim % 2:
            raise ContractError(f"base width {dim} is odd; half-copy needs an even width")
        half = dim // 2
        self.controlled = controlled
        self.dense = nn.ModuleList([Block(half, heads, cond_dim) for _ in range(controlled)])
        self.sparse = nn.ModuleList([Block(half, heads, cond_dim) for _ in range(controlled)])
        self.fusion = nn.ModuleList([nn.Linear(half, dim, bias=False) for _ in range(controlled)])
        self.tok_dense = nn.Linear(patch_dim, half)
        self.tok_sparse = nn.Linear(patch_dim, half)
        self.pos_dense = nn.Parameter(torch.zeros(frames * tokens, half))
        self.pos_sparse = nn.Parameter(torch.zeros(frames * tokens, half))
        for f in self.fusion:
            nn.init.zeros_(f.weight)

    def tokenize(self, patches_d: torch.Tensor, patches_p: torch.Tensor):
        n = patches_d.shape[1]
        return self.tok_dense(patches_d) + self.pos_dense[:n], self.tok_sparse(patches_p) + self.pos_sparse[:n]


@torch.no_grad()
def half_copy_init(base: Backbone) -> ControlBranches:
    """Even channel indices seed the dense branch, odd ones the sparse branch."""
    cfg = base.cfg
    if cfg.dim % 2:
        raise ContractError(f"base width {cfg.dim} is odd; half-copy needs an even width")
    patch_dim = cfg.latent_channels * cfg.patch**2
    br = ControlBranches(cfg.dim, cfg.heads, cfg.dim, cfg.controlled, patch_dim, base.tokens_per_frame, cfg.max_frames)
    for parity, blocks, tok, pos in ((DENSE, br.dense, br.tok_dense, br.pos_dense), (SPARSE, br.sparse, br.tok_sparse, br.pos_sparse)):
        for l in range(cfg.controlled):
            _copy_block_half(base.blocks[l], blocks[l], parity)
        half = parity_index(cfg.dim, parity)
        # the control latent enters through the columns that read the noisy latent
        tok.weight.copy_(base.embed.weight[half][:, :patch_dim])
        tok.bias.copy_(base.embed.bias[half])
        pos.copy_(base.positions(0, cfg.max_frames)[:, half])
    return br


def fuse_block(base_block: Block, branches: ControlBranches, l: int, z_prev, c_dense_prev, c_sparse_prev,
               cond: torch.Tensor, lam=None, n_prefix: int = 0):
    """One controlled block. Returns ``(z_l, c_dense_l, c_sparse_l)``.

    ``n_prefix`` leading tokens of ``z_prev`` (history context) receive no
    control; ``lam`` scales the dense path per sample.
    """
    if l >= branches.controlled:
        raise ContractError(f"block {l} is not a controlled block")
    if c_dense_prev.shape != c_sparse_prev.shape or z_prev.shape[1] - n_prefix != c_dense_prev.shape[1]:
        raise ContractError("control tokens do not line up with the latent tokens")
    z = base_block(z_prev, cond)
    d = branches.dense[l](c_dense_prev, cond)
    p = branches.sparse[l](c_sparse_prev, cond)
    dd = d if lam is None else d * torch.as_tensor(lam, dtype=d.dtype).reshape(-1, 1, 1)
    inj = branches.fusion[l](dd + p)
    if n_prefix:
        z = torch.cat([z[:, :n_prefix], z[:, n_prefix:] + inj], dim=1)
    else:
        z = z + inj
    return z, d, p


# ---------------------------------------------------------------------------
# degradations

def feature_degrade(features: torch.Tensor | None, alpha: float, g: np.random.Generator):
    """With probability ``alpha`` scale by lambda ~ U[0.05, 1]; returns (features, lambda)."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be a probability, got {alpha}")
    lam = 1.0
    if g.random() < alpha:
        lam = float(g.uniform(*LAMBDA_RANGE))
    if features is None:
        return None, lam
    return (features if lam == 1.0 else features * lam), lam


def scale_weights(n: int, g: np.random.Generator) -> tuple[list[int], np.ndarray]:
    """Exponents kept after dropping one of {0..n} and their normalized weights."""
    excluded = int(g.integers(0, n + 1))
    kept = [j for j in range(n + 1) if j != excluded]
    w = g.random(len(kept)) + 1e-6
    return kept, w / w.sum()


def blend_scales(d: torch.Tensor, exponents, weights) -> torch.Tensor:
    out = torch.zeros_like(d)
    for j, w in zip(exponents, weights):
        out = out + float(w) * resample(resample(d, 0.5**j), 2.0**j)
    return out


def random_scale_fusion(d: torch.Tensor, n: int, g: np.random.Generator) -> torch.Tensor:
    if n < 1:
        raise ContractError("fusion count must be at least 1")
    h, w = d.shape[-2:]
    if h % 2**n or w % 2**n:
        raise ContractError(f"{h}x{w} map does not support {n} halvings")
    kept, weights = scale_weights(n, g)
    return blend_scales(d, kept, weights)


def adaptive_blur(d: torch.Tensor, g: np.random.Generator) -> tuple[torch.Tensor, int]:
    k = int(g.choice(BLUR_KERNELS))
    return box_blur(d, k), k


def apply_data_degradation(d: torch.Tensor, beta: float, g: np.random.Generator, n: int = 5):
    """Returns (degraded map, list of applied op names)."""
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta must be a probability, got {beta}")
    if g.random() >= beta:
        return d, []
    use_fusion = bool(g.random() < 0.5)
    use_blur = bool(g.random() < 0.5)
    if not (use_fusion or use_blur):
        use_fusion, use_blur = (True, False) if g.random() < 0.5 else (False, True)
    ops = []
    if use_fusion:
        d = random_scale_fusion(d, n, g)
        ops.append("scale_fusion")
    if use_blur:
        d, _ = adaptive_blur(d, g)
        ops.append("blur")
    return d, ops
