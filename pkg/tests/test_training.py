import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from snapspec.cassi import OperatorRep, apply_forward
from snapspec.config import ModelConfig, load_config, save_config
from snapspec.hsi_data import HSICube, generate_synthetic_scene, random_mask
from snapspec.metrics import PSNR_CAP, gaussian_window, pearson, psnr, spectral_correlation, ssim
from snapspec.training import (
    EvalReport,
    SceneScore,
    TrainConfig,
    TrainingDiverged,
    build_model,
    charbonnier_loss,
    cube_to_tensor,
    evaluate,
    load_checkpoint,
    lr_schedule,
    reconstruct,
    save_checkpoint,
    train,
)

TINY = ModelConfig(bands=6, step=1, channels=4, levels=2, blocks=(1, 1), heads=(1, 1),
                   dlcb_channels=4, dlcb_blocks=1, stages=3)


def test_charbonnier_literal():
    pred = torch.tensor([0.0, 1.0, 3.0])
    target = torch.tensor([0.0, 0.0, 0.0])
    eps = 1e-3
    expected = (eps + math.sqrt(1 + eps ** 2) + math.sqrt(9 + eps ** 2)) / 3
    assert float(charbonnier_loss(pred, target, eps)) == pytest.approx(expected, rel=1e-6)


def test_charbonnier_examples():
    z = torch.zeros(5, dtype=torch.float64)
    assert float(charbonnier_loss(z, z, 1e-3)) == pytest.approx(1e-3, rel=1e-12)
    assert float(charbonnier_loss(torch.ones(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))) == \
        pytest.approx(math.sqrt(1 + 1e-6), rel=1e-15)
    assert float(charbonnier_loss(torch.tensor([0.0, 3.0]), torch.zeros(2), 0.0)) == 1.5


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(-10, 10)), arrays(np.float64, 12, elements=st.floats(-10, 10)),
       st.permutations(range(12)))
def test_charbonnier_symmetric_and_permutation_invariant(a, b, perm):
    a, b = torch.from_numpy(a), torch.from_numpy(b)
    ref = float(charbonnier_loss(a, b))
    assert float(charbonnier_loss(b, a)) == pytest.approx(ref, rel=1e-12)
    assert float(charbonnier_loss(a[list(perm)], b[list(perm)])) == pytest.approx(ref, rel=1e-12)


def test_lr_schedule_examples():
    cfg = TrainConfig(peak_lr=1e-3, warmup_steps=10, steps_per_epoch=110)
    total = cfg.total_steps
    assert lr_schedule(0, total, cfg) == 0
    assert lr_schedule(5, total, cfg) == pytest.approx(5e-4)
    assert lr_schedule(10, total, cfg) == pytest.approx(1e-3)
    assert lr_schedule(60, total, cfg) == pytest.approx(5e-4)
    assert lr_schedule(110, total, cfg) == pytest.approx(0, abs=1e-15)


def test_lr_schedule_continuous_and_decaying():
    cfg = TrainConfig(peak_lr=2e-4, warmup_steps=50, steps_per_epoch=500)
    lrs = [lr_schedule(s, 500, cfg) for s in range(501)]
    assert max(abs(a - b) for a, b in zip(lrs, lrs[1:])) <= 2e-4 / 50 + 1e-12
    assert all(b <= a for a, b in zip(lrs[50:], lrs[51:]))
    assert max(lrs) == pytest.approx(2e-4)


@pytest.mark.parametrize("warm,total", [(1, 2), (10, 110), (1000, 5000), (7, 300)])
def test_lr_schedule_junction(warm, total):
    cfg = TrainConfig(peak_lr=3e-4, warmup_steps=warm, steps_per_epoch=total)
    assert lr_schedule(warm, total, cfg) == 3e-4
    # left limit of the linear ramp against the value the cosine branch produces at the junction
    left = 3e-4 * math.fsum([1.0] * warm) / warm
    assert abs(left - lr_schedule(warm, total, cfg)) < 1e-12 * 3e-4
    assert abs(lr_schedule(warm - 1, total, cfg) - 3e-4 * (warm - 1) / warm) < 1e-12 * 3e-4
    assert lr_schedule(total, total, cfg) == pytest.approx(0, abs=1e-12 * 3e-4)


def test_psnr_literal_and_cap():
    a = np.zeros((4, 4, 2))
    assert psnr(a + 0.1, a) == pytest.approx(20.0)
    assert psnr(a, a) == PSNR_CAP
    with pytest.raises(ValueError):
        psnr(a, np.zeros((4, 4, 3)))


def ssim_loop_oracle(a, b, c1=1e-4, c2=9e-4):
    """SSIM with an explicit loop over every valid 11x11 window."""
    w = gaussian_window()
    vals = []
    for i in range(a.shape[0] - 10):
        for j in range(a.shape[1] - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return np.mean(vals)


def test_ssim_matches_window_loop():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(15, 14, 2))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    expected = np.mean([ssim_loop_oracle(a[..., c], b[..., c]) for c in range(2)])
    assert ssim(a, b) == pytest.approx(expected, abs=1e-10)


def test_psnr_matches_direct_formula():
    rng = np.random.default_rng(11)
    for _ in range(20):
        a, b = rng.uniform(size=(2, 9, 7, 5))
        mse = sum((x - y) ** 2 for x, y in zip(a.ravel().tolist(), b.ravel().tolist())) / a.size
        assert psnr(a, b) == pytest.approx(10 * math.log10(1 / mse), abs=1e-9)


def test_ssim_of_inverted_image_is_negative():
    rng = np.random.default_rng(3)
    target = rng.uniform(size=(24, 24, 3))
    assert ssim(1 - target, target) < 0


def test_ssim_identity_and_size_check():
    a = np.random.default_rng(1).uniform(size=(12, 12, 3))
    assert ssim(a, a) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8, 1)), np.zeros((8, 8, 1)))


def test_spectral_correlation():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(6, 6, 10))
    assert spectral_correlation(2 * a + 1, a) == pytest.approx(1.0)
    assert spectral_correlation(1 - a, a) == pytest.approx(-1.0)
    b = rng.uniform(size=(6, 6, 10))
    roi = (1, 4, 2, 5)
    ref = np.corrcoef(a[1:4, 2:5].mean(axis=(0, 1)), b[1:4, 2:5].mean(axis=(0, 1)))[0, 1]
    assert spectral_correlation(a, b, roi) == pytest.approx(ref)
    with pytest.raises(ValueError):
        pearson(np.ones(4), np.arange(4))


def test_pearson_matches_covariance_formula():
    rng = np.random.default_rng(12)
    for _ in range(20):
        a, b = rng.standard_normal((2, 28)).tolist()
        ma, mb = sum(a) / 28, sum(b) / 28
        cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
        ref = cov / math.sqrt(sum((x - ma) ** 2 for x in a) * sum((y - mb) ** 2 for y in b))
        assert pearson(a, b) == pytest.approx(ref, abs=1e-9)


def test_eval_report_text():
    report = EvalReport([SceneScore("a", 30.0, 0.9), SceneScore("b", 32.0, 0.8)])
    lines = report.to_text().splitlines()
    assert lines[0] == "scene,psnr_db,ssim"
    assert lines[-1] == "Avg,31.0000,0.850000"
    cube = generate_synthetic_scene(16, 16, 4, seed=0)
    rep = evaluate([cube], [cube], ["s"], roi=(0, 8, 0, 8))
    assert rep.scenes[0].psnr == PSNR_CAP and rep.scenes[0].correlation == pytest.approx(1.0)
    assert rep.to_text().splitlines()[0] == "scene,psnr_db,ssim,spectral_corr"


def test_config_yaml_round_trip(tmp_path):
    save_config(TINY, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == TINY
    (tmp_path / "bad.yaml").write_text("bands: 4\nwidth: 3\n")
    with pytest.raises(ValueError):
        load_config(tmp_path / "bad.yaml")


def test_default_step_size_scales_with_bands():
    assert ModelConfig(bands=28).initial_rho == pytest.approx(2 / 28)
    assert ModelConfig(rho_init=0.5).initial_rho == 0.5


def _tiny_run(steps=4, seed=0, **kw):
    scenes = [generate_synthetic_scene(16, 16, 6, seed=s) for s in range(2)]
    mask = random_mask(12, 12, seed=0)
    cfg = TrainConfig(steps_per_epoch=steps, warmup_steps=2, peak_lr=1e-3, patch_size=12, seed=seed, **kw)
    model = build_model(TINY, seed=0)
    return train(model, scenes, mask, cfg), mask


def test_training_is_deterministic():
    a, _ = _tiny_run()
    b, _ = _tiny_run()
    assert a.log == b.log
    for (ka, va), (kb, vb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    c, _ = _tiny_run(seed=1)
    assert c.losses != a.losses


def test_training_log_text():
    result, _ = _tiny_run(steps=3)
    lines = result.log_text().splitlines()
    assert len(lines) == 3
    step, lr, loss = lines[1].split(",")
    assert int(step) == 1 and float(lr) == pytest.approx(5e-4) and float(loss) > 0


def test_sharing_survives_training():
    scenes = [generate_synthetic_scene(16, 16, 6, seed=0)]
    model = build_model(TINY.replace(stages=5), seed=0)
    train(model, scenes, random_mask(12, 12, seed=0), TrainConfig(steps_per_epoch=2, warmup_steps=1, patch_size=12))
    assert model.stage(1) is model.stage(3)
    assert model.stage(1).rho is model.stage(2).rho


def test_checkpoint_round_trip(tmp_path):
    result, mask = _tiny_run(steps=2)
    path = tmp_path / "m.pt"
    save_checkpoint(result.model, path, note="x")
    loaded = load_checkpoint(path)
    assert loaded.config == TINY
    cube = generate_synthetic_scene(12, 12, 6, seed=7)
    op = OperatorRep.from_mask(mask, 6, 1)
    y = apply_forward(cube_to_tensor(cube), op).numpy()
    np.testing.assert_array_equal(reconstruct(loaded, y, mask).data, reconstruct(result.model, y, mask).data)
    torch.save({"format": "other"}, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.pt")


def test_epoch_checkpoints(tmp_path):
    scenes = [generate_synthetic_scene(16, 16, 6, seed=0)]
    cfg = TrainConfig(epochs=2, steps_per_epoch=1, warmup_steps=0, patch_size=12)
    train(build_model(TINY), scenes, random_mask(12, 12, seed=0), cfg, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_0001.pt", "epoch_0002.pt"]


def test_divergence_is_reported():
    model = build_model(TINY)
    with torch.no_grad():
        model.stages[0].rho.fill_(float("nan"))
    scenes = [generate_synthetic_scene(16, 16, 6, seed=0)]
    with pytest.raises(TrainingDiverged, match="stage 1: non-finite input"):
        train(model, scenes, random_mask(12, 12, seed=0), TrainConfig(steps_per_epoch=1, patch_size=12))


def test_mask_must_match_patch():
    scenes = [generate_synthetic_scene(16, 16, 6, seed=0)]
    with pytest.raises(ValueError):
        train(build_model(TINY), scenes, random_mask(10, 10, seed=0), TrainConfig(steps_per_epoch=1, patch_size=12))


def test_reconstruct_output_is_a_valid_cube():
    cube = generate_synthetic_scene(12, 12, 6, seed=1)
    mask = random_mask(12, 12, seed=1)
    y = apply_forward(cube_to_tensor(cube), OperatorRep.from_mask(mask, 6, 1)).numpy()
    out = reconstruct(build_model(TINY), y, mask)
    assert isinstance(out, HSICube) and out.shape == (12, 12, 6)
