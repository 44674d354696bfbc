import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from longroll import bench
from longroll.numerics import ContractError
from longroll.rollout import plan_clips


def test_ssim_identity_and_symmetry():
    g = torch.Generator().manual_seed(0)
    a, b = torch.rand(3, 16, 16, generator=g), torch.rand(3, 16, 16, generator=g)
    assert abs(bench.ssim(a, a) - 1) < 1e-12
    assert abs(bench.ssim(a, b) - bench.ssim(b, a)) < 1e-7
    with pytest.raises(ContractError):
        bench.ssim(a, torch.rand(3, 16, 15))


def test_ssim_two_level_inverse_is_negative():
    i, j = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
    x = torch.tensor(((i // 3 + j // 2) % 2).astype(np.float32))[None].expand(3, 16, 16)
    assert bench.ssim(x, 1 - x) < 0


def test_ssim_closed_form_two_level_window():
    # one 7x7 window, values in {0,1} with p ones; inverse image: mu_y = 1 - mu_x, cov = -var
    x = torch.zeros(7, 7, dtype=torch.float64)
    x.view(-1)[:20] = 1.0
    p = 20 / 49
    mx, my, var = p, 1 - p, p * (1 - p)
    c1, c2 = 0.01**2, 0.03**2
    expected = (2 * mx * my + c1) * (-2 * var + c2) / ((mx**2 + my**2 + c1) * (2 * var + c2))
    assert abs(bench.ssim(x, 1 - x) - expected) < 1e-9


def test_psnr_examples():
    a = torch.rand(3, 8, 8)
    assert bench.psnr(a, a) == math.inf and bench.capped(bench.psnr(a, a)) == 99.0
    b = a + 0.1
    assert abs(bench.psnr(a, b) - 20.0) < 1e-4
    with pytest.raises(ContractError):
        bench.psnr(a, a[:2])


def test_psnr_decreases_with_noise_variance():
    g = torch.Generator().manual_seed(1)
    x = torch.rand(3, 32, 32, generator=g)
    vals = [np.mean([bench.psnr(x, x + s * torch.randn(3, 32, 32, generator=g)) for _ in range(20)])
            for s in (0.01, 0.03, 0.1, 0.3)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_seams_single_clip_static_and_jump():
    plan1 = plan_clips(9, 9, 1)
    video = [torch.full((3, 8, 8), 0.2)] * 9
    assert bench.seam_discontinuity(video, plan1) == []
    plan = plan_clips(25, 9, 1)
    static = [torch.full((3, 8, 8), 0.2)] * 25
    assert bench.seam_discontinuity(static, plan) == [0.0, 0.0]
    jumped = [torch.full((3, 8, 8), 0.2 + (0.5 if k >= 9 else 0.0)) for k in range(25)]
    scores = bench.seam_discontinuity(jumped, plan)
    assert abs(scores[0] - 0.5) < 1e-6 and abs(scores[1]) < 1e-6
    assert bench.seam_indices(plan) == [9, 17]
    with pytest.raises(ContractError):
        bench.seam_discontinuity(jumped[:-1], plan)


def test_seam_baseline_is_median_motion():
    plan = plan_clips(17, 9, 1)
    video = [torch.full((1, 4, 4), 0.01 * k) for k in range(17)]
    video = video[:9] + [v + 0.3 for v in video[9:]]
    (score,) = bench.seam_discontinuity(video, plan)
    assert abs(score - 0.3) < 1e-6


def test_drift_slope():
    assert abs(bench.drift_slope([1.0, 0.9, 0.8, 0.7]) + 0.1) < 1e-12
    assert bench.drift_slope([0.5]) == 0.0


def _report(label="full", seed=0, ssim=(0.9, 0.8, 0.7), seams=(0.01, 0.02)):
    return bench.MetricsReport(label, seed, "abc", list(ssim), [30.0, 28.0, 99.0], list(seams))


def test_report_invariants():
    r = _report()
    assert abs(r.drift + 0.1) < 1e-9 and abs(r.mean_seam - 0.015) < 1e-12
    with pytest.raises(ContractError):
        _report(seams=(float("nan"), 0.0))


def test_csv_schema_and_determinism(tmp_path):
    plan = plan_clips(25, 9, 1)
    reports = [_report(), _report(seed=1), _report("no_both", 0, seams=(0.1, 0.2))]
    for d in ("a", "b"):
        bench.write_reports(reports, plan, tmp_path / d)
        bench.write_summary(bench.summarize(reports), tmp_path / d)
    for name in ("report.csv", "seams.csv", "ablation_summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = bench.read_csv(tmp_path / "a" / "report.csv")
    assert list(rows[0]) == bench.REPORT_FIELDS and len(rows) == 3 * 3 * 2
    seams = bench.read_csv(tmp_path / "a" / "seams.csv")
    assert list(seams[0]) == bench.SEAM_FIELDS and [r["frame"] for r in seams[:2]] == ["9", "17"]
    summary = bench.read_csv(tmp_path / "a" / "ablation_summary.csv")
    assert [r["label"] for r in summary] == ["full", "no_both"] and summary[0]["config_hash"] == "abc"


def test_evaluate_counts_match_plan():
    plan = plan_clips(25, 9, 1)
    g = torch.Generator().manual_seed(2)
    truth = [torch.rand(3, 16, 16, generator=g) for _ in range(25)]
    video = [t + 0.05 * torch.randn(3, 16, 16, generator=g) for t in truth]
    r = bench.evaluate(video, truth, plan, "x", 0, "h")
    assert len(r.ssim) == len(r.psnr) == 3 and len(r.seams) == 2
    assert r.to_dict()["mean_seam"] == r.mean_seam


def test_unknown_ablation_rejected(tmp_path):
    from longroll import config
    with pytest.raises(ContractError):
        bench.run_ablation(config.defaults(), tmp_path, suite=["nope"])
    with pytest.raises(ContractError, match="missing prerequisite"):
        bench.run_ablation(config.defaults(), tmp_path, suite=["full"])
