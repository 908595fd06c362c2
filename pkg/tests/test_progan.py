import itertools
import math
import shutil

import numpy as np
import pytest
import torch

from cipher.checkpoint import CheckpointError, load_checkpoint
from cipher.dataio import infinite_batches
from cipher.progan import (
    Discriminator,
    GanTrainConfig,
    Generator,
    MinibatchStd,
    ProgressiveStage,
    WSConv2d,
    WSConvSpec,
    downsample,
    fade_alpha_at,
    fade_in,
    load_discriminator,
    minibatch_std,
    mse_adv_losses,
    save_discriminator,
    train_progressive,
    upsample,
    ws_conv_forward,
)


def numpy_conv2d(x, w, b, padding):
    """Direct sliding-window cross-correlation, used as an independent oracle."""
    x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, _, h, wd = x.shape
    o, _, kh, kw = w.shape
    out = np.zeros((n, o, h - kh + 1, wd - kw + 1))
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            patch = x[:, :, i:i + kh, j:j + kw]
            out[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w)
    return out + b[None, :, None, None]


# --- equalized-lr convolution ---------------------------------------------


def test_runtime_scale_for_3x3_64_channels():
    spec = WSConvSpec(64, 32, 3)
    assert spec.fan_in == 576
    assert spec.runtime_scale == pytest.approx(math.sqrt(2 / 576))
    assert round(spec.runtime_scale, 5) == 0.05893


def test_zero_weights_give_bias():
    spec = WSConvSpec(4, 3, 3)
    bias = torch.tensor([0.5, -1.0, 2.0])
    out = ws_conv_forward(torch.randn(2, 4, 6, 6), spec, torch.zeros(3, 4, 3, 3), bias)
    assert torch.equal(out, bias.view(1, 3, 1, 1).expand_as(out))


def test_ws_conv_matches_reference_conv_on_prescaled_weights():
    torch.manual_seed(0)
    layer = WSConv2d(5, 7, 3)
    layer.bias.data.normal_()
    x = torch.randn(3, 5, 8, 8)
    expected = numpy_conv2d(x.double().numpy(), (layer.weight.detach().double() * layer.spec.runtime_scale).numpy(),
                            layer.bias.detach().double().numpy(), padding=1)
    got = layer(x).detach().double().numpy()
    assert np.abs(got - expected).max() < 1e-5
    # the same check in double precision hits the stricter tolerance
    got64 = ws_conv_forward(x.double(), layer.spec, layer.weight.detach().double(), layer.bias.detach().double())
    assert np.abs(got64.numpy() - expected).max() < 1e-6


def test_ws_conv_channel_mismatch():
    layer = WSConv2d(4, 4)
    with pytest.raises(ValueError, match="channel mismatch"):
        layer(torch.randn(1, 3, 4, 4))


# --- minibatch stddev --------------------------------------------------------


def test_mbstd_identical_batch_gives_zero_channel():
    x = torch.randn(1, 4, 4, 4).repeat(6, 1, 1, 1)
    out = minibatch_std(x)
    assert torch.equal(out[:, -1], torch.zeros(6, 4, 4))


def test_mbstd_constant_pair_gives_one():
    x = torch.cat([torch.zeros(1, 3, 4, 4), torch.full((1, 3, 4, 4), 2.0)])
    out = minibatch_std(x)
    assert torch.equal(out[:, -1], torch.ones(2, 4, 4))


def test_mbstd_shape_and_brute_force_value():
    x = torch.randn(5, 3, 4, 4, dtype=torch.float64)
    out = minibatch_std(x)
    assert out.shape == (5, 4, 4, 4)
    assert torch.equal(out[:, :3], x)
    arr = x.numpy()
    mean = arr.mean(axis=0)
    expected = np.sqrt(((arr - mean) ** 2).mean(axis=0)).mean()
    assert float(out[0, -1, 0, 0]) == pytest.approx(expected, rel=1e-12)


def test_mbstd_gradient_finite_on_duplicates():
    x = torch.ones(4, 2, 4, 4, requires_grad=True)
    minibatch_std(x).sum().backward()
    assert torch.isfinite(x.grad).all()


def test_mbstd_reference_used_in_eval_mode():
    layer = MinibatchStd()
    layer.reference = 0.25
    x = torch.randn(3, 2, 4, 4)
    layer.eval()
    assert torch.all(layer(x)[:, -1] == 0.25)
    layer.train()
    assert not torch.all(layer(x)[:, -1] == 0.25)


# --- fade-in ------------------------------------------------------------------


def test_fade_in_boundaries_are_exact():
    old, new = torch.randn(2, 3, 8, 8), torch.randn(2, 3, 8, 8)
    assert fade_in(old, new, 0.0) is old
    assert fade_in(old, new, 1.0) is new
    assert torch.equal(fade_in(torch.zeros(4), torch.full((4,), 2.0), 0.5), torch.ones(4))


def test_fade_in_rejects_bad_alpha():
    with pytest.raises(ValueError):
        fade_in(torch.zeros(1), torch.zeros(1), 1.5)


def test_stage_validation():
    with pytest.raises(ValueError):
        ProgressiveStage(0, 0.5, "fading")
    with pytest.raises(ValueError):
        ProgressiveStage(2, 0.5, "stable")
    assert ProgressiveStage(4).resolution == 64


# --- networks -----------------------------------------------------------------


def test_discriminator_outputs_are_probabilities():
    torch.manual_seed(1)
    disc = Discriminator([8, 8, 8])
    for k in range(3):
        for alpha, phase in ((1.0, "stable"), (0.3, "fading")):
            if k == 0 and phase == "fading":
                continue
            stage = ProgressiveStage(k, alpha, phase)
            out = disc(torch.randn(5, 3, stage.resolution, stage.resolution) * 3, stage)
            assert out.shape == (5,)
            assert out.min() >= 0 and out.max() <= 1


def test_discriminator_fade_zero_equals_previous_stage():
    torch.manual_seed(2)
    disc = Discriminator([8, 6, 4])
    x = torch.rand(4, 3, 16, 16) * 2 - 1
    faded = disc(x, ProgressiveStage(2, 0.0, "fading"))
    previous = disc(downsample(x), ProgressiveStage(1))
    assert torch.equal(faded, previous)


def test_discriminator_full_depth_shape():
    disc = Discriminator([16, 16, 16, 8, 4])
    out = disc(torch.randn(7, 3, 64, 64), ProgressiveStage(4))
    assert out.shape == (7,)


def test_discriminator_rejects_wrong_resolution():
    disc = Discriminator([8, 8])
    with pytest.raises(ValueError):
        disc(torch.randn(2, 3, 16, 16))


def test_generator_base_stage_shape():
    gen = Generator([8, 8], latent_dim=16)
    out = gen(torch.randn(3, 16), ProgressiveStage(0))
    assert out.shape == (3, 3, 4, 4)
    assert out.abs().max() <= 1


def test_generator_fade_zero_equals_upsampled_previous():
    torch.manual_seed(3)
    gen = Generator([8, 8, 8], latent_dim=16)
    z = torch.randn(4, 16)
    faded = gen(z, ProgressiveStage(2, 0.0, "fading"))
    assert torch.equal(faded, upsample(gen(z, ProgressiveStage(1))))


def test_generator_determinism():
    def build():
        torch.manual_seed(11)
        return Generator([8, 8], latent_dim=16)

    z = torch.randn(2, 16, generator=torch.Generator().manual_seed(5))
    assert torch.equal(build()(z), build()(z))


# --- losses ---------------------------------------------------------------------


def test_loss_examples():
    loss_d, _ = mse_adv_losses(torch.ones(3), torch.zeros(3))
    assert loss_d.item() == 0
    _, loss_g = mse_adv_losses(torch.ones(3), torch.ones(3))
    assert loss_g.item() == 0
    loss_d, loss_g = mse_adv_losses(torch.tensor([0.5]), torch.tensor([0.5]))
    assert loss_d.item() == 0.5 and loss_g.item() == 0.25


def central_difference_check(params, loss_fn, eps=1e-6):
    """Max relative error between autograd and central differences over all parameters."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    analytic, numeric = [], []
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * eps))
            analytic.append(g.reshape(-1))
    a = torch.cat(analytic).numpy()
    n = np.array(numeric)
    return np.abs(a - n).max() / max(np.abs(n).max(), 1e-12), a.size


def tiny_gan(seed=0):
    torch.manual_seed(seed)
    disc = Discriminator([4, 4]).double()
    gen = Generator([4], latent_dim=6).double()
    return disc, gen


def test_discriminator_loss_gradient_matches_finite_differences():
    disc, gen = tiny_gan()
    real = torch.rand(4, 3, 8, 8, dtype=torch.float64) * 2 - 1
    fake = torch.rand(4, 3, 8, 8, dtype=torch.float64) * 2 - 1
    # a fading stage routes through every parameter, including the coarse fromRGB
    stage = ProgressiveStage(1, 0.4, "fading")
    params = list(disc.parameters())
    err, count = central_difference_check(
        params, lambda: mse_adv_losses(disc(real, stage), disc(fake, stage))[0])
    assert count <= 1000
    assert err < 1e-3


def test_generator_loss_gradient_matches_finite_differences():
    disc, gen = tiny_gan(1)
    z = torch.randn(4, 6, dtype=torch.float64)
    stage = ProgressiveStage(0)
    params = list(gen.parameters())
    err, count = central_difference_check(
        params, lambda: mse_adv_losses(torch.ones(1), disc(gen(z, stage), stage))[1])
    assert count <= 1000
    assert err < 1e-3


# --- training schedule --------------------------------------------------------------


def test_fade_alpha_schedule_values():
    assert fade_alpha_at(1, 5000, 10000) == 0.5
    assert fade_alpha_at(1, 10000, 10000) == 1.0
    assert fade_alpha_at(0, 0, 10000) == 1.0


def _toy_data(res=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    images = torch.rand(32, 3, res, res, generator=g) * 2 - 1
    return infinite_batches(images, 4, seed)


def test_step_ratio_and_fade_trace(tmp_path):
    cfg = GanTrainConfig(channels=[4, 4], latent_dim=8, batch_size=4, iters_per_stage=50, fade_iters=20)
    rows = []
    result = train_progressive(cfg, _toy_data(), progress=rows.append, log_every=1)
    assert result.d_steps == 100 and result.g_steps == 200
    stage1 = [r["fade_alpha"] for r in rows if r["stage"] == 1]
    assert all(b >= a for a, b in zip(stage1, stage1[1:]))
    assert stage1[0] == 0.0 and stage1[-1] == 1.0
    assert all(r["fade_alpha"] == 1.0 for r in rows if r["stage"] == 0)
    lrs = [r["lr"] for r in rows]
    assert lrs[0] == cfg.lr and all(b < a for a, b in zip(lrs, lrs[1:]))


def test_single_stage_has_no_fade():
    cfg = GanTrainConfig(channels=[4], latent_dim=8, batch_size=4, iters_per_stage=10, fade_iters=5)
    rows = []
    result = train_progressive(cfg, _toy_data(4), progress=rows.append, log_every=1)
    assert all(r["fade_alpha"] == 1.0 for r in rows)
    assert result.generator(torch.randn(2, 8)).shape == (2, 3, 4, 4)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = GanTrainConfig(channels=[4, 4], latent_dim=8, batch_size=4, iters_per_stage=6, fade_iters=3,
                         checkpoint_every=7)
    full = train_progressive(cfg, _toy_data(), out_dir=tmp_path / "full")
    # replay from the state written after iteration 7 (inside the fading stage), feeding the same remaining batches
    resumed_dir = tmp_path / "resumed"
    resumed_dir.mkdir()
    shutil.copy(tmp_path / "full" / "train_state.pt", resumed_dir / "train_state.pt")
    data = _toy_data()
    for _ in itertools.islice(data, 7):
        pass
    resumed = train_progressive(cfg, data, out_dir=resumed_dir, resume=True)
    for a, b in zip(full.generator.state_dict().values(), resumed.generator.state_dict().values()):
        assert torch.equal(a, b)
    assert resumed.d_steps == full.d_steps


def test_resume_rejects_other_architecture(tmp_path):
    cfg = GanTrainConfig(channels=[4, 4], latent_dim=8, iters_per_stage=4, fade_iters=2, checkpoint_every=3)
    train_progressive(cfg, _toy_data(), out_dir=tmp_path)
    other = GanTrainConfig(channels=[4, 6], latent_dim=8, iters_per_stage=4, fade_iters=2)
    with pytest.raises(CheckpointError):
        train_progressive(other, _toy_data(), out_dir=tmp_path, resume=True)


def test_training_writes_artifacts(tmp_path):
    cfg = GanTrainConfig(channels=[4, 4], latent_dim=8, iters_per_stage=4, fade_iters=2)
    train_progressive(cfg, _toy_data(), out_dir=tmp_path)
    for name in ("discriminator.safetensors", "generator.safetensors", "train_log.csv"):
        assert (tmp_path / name).is_file()
    disc, ckpt = load_discriminator(tmp_path / "discriminator.safetensors")
    assert disc.channels == [4, 4]
    assert ckpt.meta["d_steps"] == 8


# --- checkpoints ------------------------------------------------------------------


def test_discriminator_checkpoint_round_trip_is_byte_identical(tmp_path):
    torch.manual_seed(4)
    disc = Discriminator([8, 4])
    a = save_discriminator(tmp_path / "a.safetensors", disc, {"note": "x"})
    loaded, ckpt = load_discriminator(a)
    b = save_discriminator(tmp_path / "b.safetensors", loaded, ckpt.meta)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_architecture_mismatch(tmp_path):
    path = save_discriminator(tmp_path / "d.safetensors", Discriminator([8, 4]))
    with pytest.raises(CheckpointError, match="architecture"):
        load_discriminator(path, channels=[8, 8])
    with pytest.raises(CheckpointError):
        load_checkpoint(path, kind="progan-generator")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.safetensors")
