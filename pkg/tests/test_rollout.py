import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from longroll.autoencoder import FrameAutoencoder
from longroll.diffusion import BackboneConfig, NoiseSchedule
from longroll.model import VideoDenoiser
from longroll.numerics import ContractError, NumericError
from longroll.rollout import (autoregressive_rollout, digest, global_normalize, plan_clips, prepare_controls,
                              recompute_sparse_per_clip, total_for)
from longroll.scenegen import Shape, SceneSpec, depth_colormap, gen_scene, long_spec, render_frame, track_points


def brute_force_normalize(values: np.ndarray) -> np.ndarray:
    s = sorted(values.ravel().tolist())
    n = len(s)
    lo = s[max(1, math.ceil(5 * n / 100)) - 1]
    hi = s[max(1, math.ceil(95 * n / 100)) - 1]
    if hi == lo:
        return np.full(values.shape, 0.5)
    return (np.clip(values, lo, hi) - lo) / (hi - lo)


@pytest.mark.parametrize("seed", range(100))
def test_normalize_matches_sort_and_index_oracle(seed):
    g = np.random.default_rng(seed)
    n = int(g.integers(1, 6))
    x = (g.standard_normal((n, 1, 5, 7)) * g.uniform(0.1, 5)).astype(np.float32)
    if seed % 10 == 0:
        x = np.round(x)  # ties
    got = global_normalize(torch.from_numpy(x)).numpy()
    assert np.allclose(got, brute_force_normalize(x.astype(np.float64)), atol=1e-6)
    assert got.min() >= 0 and got.max() <= 1


def test_normalize_examples():
    v = torch.arange(1, 21, dtype=torch.float32).reshape(20, 1, 1, 1)
    out = global_normalize(v)
    assert abs(float(out[9]) - 9 / 18) < 1e-6
    assert float(out[0]) == 0.0 and float(out[19]) == 1.0 and float(out[18]) == 1.0
    assert torch.equal(global_normalize(torch.full((3, 1, 4, 4), 0.3)), torch.full((3, 1, 4, 4), 0.5))
    with pytest.raises(ContractError):
        global_normalize(torch.zeros(0, 1, 4, 4))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 50))
def test_normalize_idempotent(seed, n):
    x = torch.randn(n, 1, 3, 3, generator=torch.Generator().manual_seed(seed))
    once = global_normalize(x)
    assert torch.equal(global_normalize(once), once)


def test_plan_examples():
    assert plan_clips(17, 9, 1).windows == ((0, 9), (8, 17))
    assert plan_clips(9, 9, 1).windows == ((0, 9),)
    full_scale = plan_clips(total_for(4, 81, 1), 81, 1)
    assert full_scale.windows == ((0, 81), (80, 161), (160, 241), (240, 321))
    toy = plan_clips(total_for(40, 9, 1), 9, 1)
    assert toy.windows[:3] == ((0, 9), (8, 17), (16, 25)) and len(toy.windows) == 40
    with pytest.raises(ContractError):
        plan_clips(18, 9, 1)
    with pytest.raises(ContractError):
        plan_clips(9, 9, 9)


@settings(max_examples=60, deadline=None)
@given(clip=st.integers(2, 20), overlap=st.integers(0, 5), windows=st.integers(1, 12))
def test_plan_cover_and_overlap(clip, overlap, windows):
    if overlap >= clip:
        return
    total = total_for(windows, clip, overlap)
    plan = plan_clips(total, clip, overlap)
    assert plan.windows[0][0] == 0 and plan.windows[-1][1] == total
    for (s0, e0), (s1, e1) in zip(plan.windows, plan.windows[1:]):
        assert e0 - s1 == overlap and e1 - s1 == clip
    assert json.loads(json.dumps(plan.to_dict()))["windows"][0] == [0, clip]


def test_static_scene_windows_have_identical_pointmaps():
    spec = SceneSpec(0, 17, 32, 32, (Shape("rect", 0.4, (0.0, 0.0), 5.0, (1, 0, 0), (16.0, 16.0)),))
    depth = torch.from_numpy(np.stack([render_frame(spec, k)[1] for k in range(17)]).astype(np.float32))[:, None]
    plan = plan_clips(17, 9, 1)
    streams = prepare_controls(spec, plan, depth)
    assert torch.equal(streams.sparse[0], streams.sparse[1])


def test_sparse_colour_reads_global_normalization():
    spec = long_spec(1, 25)
    depth = torch.from_numpy(np.stack([render_frame(spec, k)[1] for k in range(25)]).astype(np.float32))[:, None]
    plan = plan_clips(25, 9, 1)
    streams = prepare_controls(spec, plan, depth)
    normed = global_normalize(depth)
    for i, (s, e) in enumerate(plan.windows):
        assert torch.equal(streams.dense[i], normed[s:e])
        pm = streams.sparse[i]
        for tr in track_points(spec, s, e - s):
            for k, (_, x, y, _, vis) in enumerate(tr.frames):
                if vis:
                    px, py = int(x), int(y)
                    want = torch.from_numpy(depth_colormap(float(normed[s + k, 0, py, px])).astype(np.float32))
                    assert torch.equal(pm[k, :, py, px], want)
    with pytest.raises(ContractError):
        recompute_sparse_per_clip(spec, (0, 9), normed[:5])


def test_per_clip_normalization_differs_from_global():
    spec = long_spec(4, 49)
    depth = torch.from_numpy(np.stack([render_frame(spec, k)[1] for k in range(49)]).astype(np.float32))[:, None]
    plan = plan_clips(49, 9, 1)
    glob = prepare_controls(spec, plan, depth, True)
    local = prepare_controls(spec, plan, depth, False)
    assert any(not torch.equal(a, b) for a, b in zip(glob.dense, local.dense))


class _Identity(FrameAutoencoder):
    def __init__(self):
        super().__init__(4, 8)
        self.trained.fill_(1.0)


def _tiny_rollout_model(seed=0):
    torch.manual_seed(seed)
    cfg = BackboneConfig(latent_size=8, dim=16, heads=2, depth=2, controlled=1, max_frames=9, max_history=2)
    m = VideoDenoiser(cfg)
    m.attach_control()
    with torch.no_grad():
        for p in m.parameters():
            if p.abs().sum() == 0:
                p.normal_(0, 0.02)
    return m.eval()


def _rollout(windows, unified=True, n_hist=2, sink=None, keep=True, model=None):
    ae = _Identity()
    model = model or _tiny_rollout_model()
    spec = long_spec(0, total_for(windows, 9, 1))
    plan = plan_clips(spec.num_frames, 9, 1, noise_seed=5)
    depth = torch.from_numpy(np.stack([render_frame(spec, k)[1] for k in range(spec.num_frames)]).astype(np.float32))[:, None]
    streams = prepare_controls(spec, plan, depth)
    first = torch.from_numpy(render_frame(spec, 0)[0].astype(np.float32))
    enc = lambda d, p: (ae.encode(d.expand(-1, 3, -1, -1).contiguous()), ae.encode(p))
    return autoregressive_rollout(model, ae, enc, first, streams, plan, NoiseSchedule.linear(50), n_hist_max=n_hist,
                                  steps=2, unified_noise=unified, sink=sink, keep_frames=keep), plan, first


def test_rollout_wiring_and_unified_noise():
    res, plan, first = _rollout(4)
    assert res.clips == len(plan.windows) == 4
    assert len(res.frames) == plan.total_frames
    assert len(set(res.noise_digests)) == 1
    assert res.cond_digests[0] == digest(first)
    # z_I of clip i+1 is the last decoded frame of clip i
    assert res.cond_digests[1:] == res.prev_last_digests[:-1]
    assert torch.equal(res.frames[0], res.frames[0]) and all(torch.isfinite(f).all() for f in res.frames)


def test_rollout_independent_noise_and_determinism():
    res, _, _ = _rollout(3, unified=False)
    assert len(set(res.noise_digests)) == 3
    again, _, _ = _rollout(3, unified=False)
    assert all(torch.equal(a, b) for a, b in zip(res.frames, again.frames))


def test_rollout_memory_bounded_and_streams():
    seen = []
    short, _, _ = _rollout(3, sink=seen.append, keep=False)
    long_, plan, _ = _rollout(12, keep=False)
    assert short.frames == [] and len(seen) == total_for(3, 9, 1)
    assert short.peak_state_frames == long_.peak_state_frames <= 2 + 1


def test_rollout_aborts_on_non_finite():
    model = _tiny_rollout_model()
    with torch.no_grad():
        model.base.head.bias.fill_(float("nan"))
    with pytest.raises(NumericError, match="clip 0"):
        _rollout(2, model=model)
