import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from longroll.history import (BOUNDARY_WEIGHTS, ConditionPack, assemble_condition, blend_boundary,
                              boundary_weights, frame_weight_vector, freq_split, sample_n_hist, temporal_losses)
from longroll.numerics import ContractError, finite_diff_check


def test_freq_split_constant_and_exact():
    c = torch.full((4, 6, 6), 0.7)
    lp, hp = freq_split(c)
    assert torch.allclose(lp, c) and torch.allclose(hp, torch.zeros_like(c), atol=1e-7)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_freq_split_additive_identity_bitwise(seed):
    z = torch.randn(2, 4, 8, 8, generator=torch.Generator().manual_seed(seed))
    lp, hp = freq_split(z)
    assert torch.equal(lp + hp, lp + (z - lp))
    assert float((lp + hp - z).abs().max()) <= 1e-6


def test_checkerboard_energy_is_high_frequency():
    i, j = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    cb = torch.tensor(((i + j) % 2) * 2.0 - 1.0, dtype=torch.float64)
    _, hp = freq_split(cb)
    assert float((hp**2).sum() / (cb**2).sum()) >= 0.9


def _box3_replicate(m):
    """Independent 3x3 replicate-padded mean, written with explicit loops."""
    h, w = m.shape
    out = np.zeros_like(m)
    for y in range(h):
        for x in range(w):
            vals = [m[min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)]
                    for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
            out[y, x] = sum(vals) / 9.0
    return out


def test_hand_latents_exact_losses():
    zh = np.array([[1.0, 2.0], [3.0, 4.0]])
    zl = np.array([[0.5, 2.5], [2.0, 5.0]])
    zd = np.array([[0.0, 1.0], [1.0, 0.0]])
    zg = np.array([[2.0, 0.0], [0.0, 2.0]])
    l_cons = np.mean((zl - zh) ** 2)
    l_deg = np.mean((_box3_replicate(zd) - _box3_replicate(zh)) ** 2)
    hp = lambda m: m - _box3_replicate(m)
    l_gt = np.mean((hp(zg) - hp(zh)) ** 2)
    t = lambda a: torch.tensor(a)[None]
    got = temporal_losses(t(zh), t(zl), t(zd), t(zg))
    for g, e in zip(got, (l_cons, l_deg, l_gt, 0.2 * l_deg + 0.15 * l_gt + 0.5 * l_cons)):
        assert abs(float(g) - e) < 1e-6


def test_loss_zero_cases_and_shape_check():
    z = torch.randn(4, 4, 4)
    assert float(temporal_losses(z, z, torch.randn(4, 4, 4), torch.randn(4, 4, 4))[0]) == 0.0
    assert float(temporal_losses(z, z, z, z)[3]) == 0.0
    with pytest.raises(ContractError):
        temporal_losses(z, z, z, torch.zeros(4, 4, 5))


def test_batched_losses_are_per_item():
    g = torch.Generator().manual_seed(0)
    zs = [torch.randn(3, 4, 4, 4, generator=g) for _ in range(4)]
    batched = temporal_losses(*zs)
    for i in range(3):
        single = temporal_losses(*[z[i] for z in zs])
        for a, b in zip(batched, single):
            assert abs(float(a[i]) - float(b)) < 1e-9


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("which", [0, 1, 2, 3])
def test_temporal_loss_gradients(seed, which):
    g = torch.Generator().manual_seed(seed)
    zs = [torch.randn(2, 3, 3, generator=g, dtype=torch.float64) for _ in range(4)]
    err = finite_diff_check(lambda x: temporal_losses(x, *zs[1:])[which], zs[0], 1e-4)
    assert err < 1e-3
    assert float(temporal_losses(*zs)[which]) >= 0


def test_boundary_weights():
    assert boundary_weights([1, 1, 1, 1]) == [0.05, 0.325, 0.757, 1]
    assert BOUNDARY_WEIGHTS == (0.05, 0.325, 0.757)
    assert boundary_weights([2.0, 2.0]) == [0.1, 0.65]
    assert frame_weight_vector(5, False).tolist() == [1.0] * 5
    v = frame_weight_vector(5)
    assert v[3] == 1 and v[4] == 1


def test_blend_boundary_interpolates_first_frames():
    x0 = torch.zeros(1, 5, 2, 2, 2)
    anchor = torch.ones(1, 2, 2, 2)
    out = blend_boundary(x0, anchor)
    assert [round(float(out[0, i].mean()), 6) for i in range(5)] == [0.95, 0.675, 0.243, 0.0, 0.0]


def _encode(x):
    return x[..., ::8, ::8].mean(-3, keepdim=True).expand(*x.shape[:-3], 4, 4, 4) * 1.0


def test_assemble_without_history():
    first = torch.rand(2, 3, 32, 32)
    controls = (torch.zeros(2, 9, 4, 4, 4), torch.zeros(2, 9, 4, 4, 4))
    pack = assemble_condition(_encode, first, torch.rand(2, 4, 3, 32, 32), controls, 0)
    assert pack.n_hist == 0 and pack.z_hist is None and pack.z_hist_in is None
    assert pack.history_mask().tolist() == [0.0] * 9
    with pytest.raises(ContractError):
        assemble_condition(None, first, None, controls, 0)


def test_assemble_with_history_mask_and_degrade():
    first = torch.rand(2, 3, 32, 32)
    hist = torch.rand(2, 4, 3, 32, 32)
    controls = (torch.zeros(2, 9, 4, 4, 4), torch.zeros(2, 9, 4, 4, 4))
    pack = assemble_condition(_encode, first, hist, controls, 3, degrade=lambda x: x * 0.5)
    assert pack.n_hist == 3 and pack.history_mask()[:3].tolist() == [1.0, 1.0, 1.0]
    assert len(pack.history_mask()) == 3 + 9
    assert torch.allclose(pack.z_hist, _encode(hist[:, 1:].reshape(-1, 3, 32, 32)).reshape(2, 3, 4, 4, 4))
    assert torch.allclose(pack.z_hist_in, 0.5 * pack.z_hist)
    assert torch.allclose(pack.z_I, _encode(first * 0.5))
    pack.validate(4)
    with pytest.raises(ContractError):
        pack.validate(2)
    with pytest.raises(ContractError):
        assemble_condition(_encode, first, hist, controls, 5)


def test_sample_n_hist_range():
    g = np.random.default_rng(0)
    draws = {sample_n_hist(g, 4) for _ in range(500)}
    assert draws == {0, 1, 2, 3, 4}
    assert {sample_n_hist(g, 16) for _ in range(3000)} == set(range(17))
