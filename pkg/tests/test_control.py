import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from longroll.control import (LAMBDA_RANGE, adaptive_blur, apply_data_degradation, blend_scales, feature_degrade,
                              fuse_block, half_copy_init, parity_index, random_scale_fusion, scale_weights)
from longroll.diffusion import BackboneConfig
from longroll.model import VideoDenoiser
from longroll.numerics import ContractError, resample

from helpers import TINY, tiny_model, tiny_pack


def test_parity_partition():
    even, odd = parity_index(16, 0), parity_index(16, 1)
    assert set(even.tolist()).isdisjoint(odd.tolist())
    assert sorted(even.tolist() + odd.tolist()) == list(range(16))


def test_half_copy_widths_and_slices():
    m = tiny_model(1, control=False)
    br = half_copy_init(m.base)
    d = TINY.dim
    for parity, blocks in ((0, br.dense), (1, br.sparse)):
        idx = list(range(parity, d, 2))
        for l, blk in enumerate(blocks):
            src = m.base.blocks[l]
            assert blk.dim == d // 2
            assert torch.equal(blk.mlp.fc1.weight, src.mlp.fc1.weight[parity::2][:, idx])
            assert torch.equal(blk.attn.proj.weight, src.attn.proj.weight[idx][:, idx])
            q_rows = [c * d + i for c in range(3) for i in idx]
            assert torch.equal(blk.attn.qkv.weight, src.attn.qkv.weight[q_rows][:, idx])
            assert torch.equal(blk.ada.weight, src.ada.weight[[c * d + i for c in range(6) for i in idx]])


def test_half_copy_rejects_odd_width():
    cfg = BackboneConfig(dim=15, heads=3, latent_size=4, max_frames=2, max_history=0)
    with pytest.raises(ContractError):
        half_copy_init(VideoDenoiser(cfg).base)


def _block_inputs(m, seed=0, n=12):
    g = torch.Generator().manual_seed(seed)
    half = TINY.dim // 2
    z = torch.randn(2, n, TINY.dim, generator=g, dtype=torch.float64)
    cd = torch.randn(2, n, half, generator=g, dtype=torch.float64)
    cp = torch.randn(2, n, half, generator=g, dtype=torch.float64)
    cond = torch.randn(2, TINY.dim, generator=g, dtype=torch.float64)
    return z, cd, cp, cond


def test_fresh_fusion_is_exactly_base():
    m = tiny_model(2)
    z, cd, cp, cond = _block_inputs(m)
    out, _, _ = fuse_block(m.base.blocks[0], m.control, 0, z, cd, cp, cond)
    assert torch.equal(out, m.base.blocks[0](z, cond))


def test_nonzero_fusion_decomposes():
    m = tiny_model(3)
    with torch.no_grad():
        for f in m.control.fusion:
            f.weight.normal_()
    z, cd, cp, cond = _block_inputs(m, 1)
    lam = torch.tensor([0.3, 1.0], dtype=torch.float64)
    out, d, p = fuse_block(m.base.blocks[1], m.control, 1, z, cd, cp, cond, lam)
    blk_d, blk_p, phi = m.control.dense[1], m.control.sparse[1], m.control.fusion[1]
    manual = (m.base.blocks[1](z, cond) + (blk_d(cd, cond) * lam[:, None, None]) @ phi.weight.T
              + blk_p(cp, cond) @ phi.weight.T)
    assert torch.allclose(out, manual, atol=1e-12)
    assert torch.equal(m.control.fusion[1](torch.zeros_like(d)), torch.zeros_like(z))


def test_prefix_tokens_untouched():
    m = tiny_model(4)
    with torch.no_grad():
        m.control.fusion[0].weight.normal_()
    z, cd, cp, cond = _block_inputs(m, 2, n=12)
    z_full = torch.cat([torch.randn(2, 4, TINY.dim, dtype=torch.float64), z], 1)
    out, _, _ = fuse_block(m.base.blocks[0], m.control, 0, z_full, cd, cp, cond, n_prefix=4)
    assert torch.equal(out[:, :4], m.base.blocks[0](z_full, cond)[:, :4])
    with pytest.raises(ContractError):
        fuse_block(m.base.blocks[0], m.control, 0, z_full, cd, cp, cond, n_prefix=0)
    with pytest.raises(ContractError):
        fuse_block(m.base.blocks[2], m.control, 2, z, cd, cp, cond)


def test_lambda_one_is_bit_identical():
    m = tiny_model(5)
    with torch.no_grad():
        for f in m.control.fusion:
            f.weight.normal_()
    pack = tiny_pack(2)
    z = torch.randn(2, 3, 4, 4, 4, dtype=torch.float64)
    t = torch.tensor([3, 7])
    a = m(z, t, pack)
    pack.lam = torch.ones(2, dtype=torch.float64)
    assert torch.equal(m(z, t, pack), a)


def test_feature_degrade():
    g = np.random.default_rng(0)
    x = torch.randn(10)
    for _ in range(50):
        out, lam = feature_degrade(x, 0.0, g)
        assert lam == 1.0 and out is x
    lams = [feature_degrade(None, 1.0, g)[1] for _ in range(2000)]
    assert min(lams) >= LAMBDA_RANGE[0] and max(lams) <= LAMBDA_RANGE[1]
    with pytest.raises(ContractError):
        feature_degrade(x, 1.5, g)


def test_feature_scale_norm_ratio():
    x = torch.randn(50, dtype=torch.float64)
    assert abs(float((x * 0.05).norm() / x.norm()) - 0.05) < 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), v=st.floats(-3, 3, allow_nan=False))
def test_scale_fusion_constant_and_weights(seed, v):
    g = np.random.default_rng(seed)
    kept, w = scale_weights(5, g)
    assert len(kept) == 5 and abs(w.sum() - 1) < 1e-6
    c = torch.full((2, 32, 32), v, dtype=torch.float64)
    assert torch.allclose(random_scale_fusion(c, 5, np.random.default_rng(seed)), c, atol=1e-12)


def test_scale_fusion_two_scale_hand_oracle():
    ramp = torch.arange(16, dtype=torch.float64).reshape(4, 4)
    half = torch.tensor([[2.5, 4.5], [10.5, 12.5]], dtype=torch.float64)
    up = half.repeat_interleave(2, 0).repeat_interleave(2, 1)
    assert torch.allclose(blend_scales(ramp, [0, 1], [0.25, 0.75]), 0.25 * ramp + 0.75 * up)


def test_scale_fusion_rejects_indivisible():
    with pytest.raises(ContractError):
        random_scale_fusion(torch.zeros(24, 24), 5, np.random.default_rng(0))


def test_adaptive_blur():
    g = np.random.default_rng(3)
    ks = set()
    for _ in range(60):
        m = torch.zeros(11, 11, dtype=torch.float64)
        m[5, 5] = 1.0
        out, k = adaptive_blur(m, g)
        ks.add(k)
        assert k % 2 == 1
        r = k // 2
        plateau = torch.zeros_like(m)
        plateau[5 - r:6 + r, 5 - r:6 + r] = 1.0 / k**2
        assert torch.allclose(out, plateau)
    assert ks == {3, 5, 7}


def test_data_degradation_frequency_and_shape():
    g = np.random.default_rng(0)
    d = torch.rand(1, 32, 32)
    assert apply_data_degradation(d, 0.0, g)[1] == []
    n = 100_000
    hits = sum(bool(apply_data_degradation(d, 0.1, g)[1]) for _ in range(n))
    assert abs(hits / n - 0.1) < 0.01
    g = np.random.default_rng(2)
    seen = set()
    for _ in range(300):
        out, ops = apply_data_degradation(d, 0.5, g)
        assert out.shape == d.shape
        seen.add(tuple(ops))
    assert seen == {(), ("scale_fusion",), ("blur",), ("scale_fusion", "blur")}
