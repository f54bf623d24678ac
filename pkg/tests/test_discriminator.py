import numpy as np
import pytest
import torch
import torch.nn as nn

from bokehgan.discriminator import (
    DiscriminatorConfig,
    DiscriminatorConfigError,
    PatchCritic,
    adversarial_losses,
    build_critic,
    critic_forward,
    critic_loss,
    generator_adversarial_loss,
    gradient_penalty,
    score_grid_size,
)
from bokehgan.imaging import DimensionError, ShapeMismatchError


class UnitLinear(nn.Module):
    """Per-sample mean score with gradient norm exactly 1 w.r.t. the input."""

    def __init__(self, shape, seed=0):
        super().__init__()
        v = torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        # score map is constant-size 1x1, so the mean score is <v, x>
        self.v = v / v.norm()

    def forward(self, x):
        return (x * self.v).flatten(1).sum(1).view(-1, 1, 1, 1)


class Constant(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value
        self.depth = 1

    def forward(self, x):
        return torch.full((x.shape[0], 1, 2, 2), self.value, dtype=x.dtype) + 0 * x[:, :1, ::16, ::16].sum()


def small_critic(seed=0):
    return build_critic(DiscriminatorConfig(base_channels=4), seed).double()


def images(n=2, size=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g, dtype=torch.float64)


def test_defaults():
    cfg = DiscriminatorConfig()
    assert cfg.depths == (3, 5) and cfg.base_channels == 64 and cfg.gp_lambda == 1.0


@pytest.mark.parametrize("kwargs", [{"depths": ()}, {"depths": (0, 3)}, {"base_channels": 0},
                                    {"gp_lambda": -1.0}, {"gp_lambda": float("nan")}])
def test_config_errors(kwargs):
    with pytest.raises(DiscriminatorConfigError):
        DiscriminatorConfig(**kwargs)


def test_grid_sizes_at_256():
    critic = build_critic(DiscriminatorConfig(base_channels=4))
    with torch.no_grad():
        scores = critic_forward(critic, torch.rand(1, 3, 256, 256))
    shallow, deep = (g.shape[-1] for g in scores.grids)
    assert shallow == 32 and deep == 8 and shallow > deep


@pytest.mark.parametrize("n", [16, 31, 32, 33, 64, 70, 100])
@pytest.mark.parametrize("depth", [1, 3, 4])
def test_grid_formula(n, depth):
    with torch.no_grad():
        out = PatchCritic(depth, 2)(torch.zeros(1, 3, n, n))
    assert out.shape[-1] == score_grid_size(n, depth) == n // 2**depth
    assert abs(out.shape[-1] - np.ceil(n / 2**depth)) <= 1


def test_no_sigmoid_or_norm():
    for m in build_critic().modules():
        assert not isinstance(m, (nn.Sigmoid, nn.BatchNorm2d, nn.InstanceNorm2d, nn.LayerNorm))
    slopes = {m.negative_slope for m in build_critic().modules() if isinstance(m, nn.LeakyReLU)}
    assert slopes == {0.2}


def test_zero_params_give_zero_scores():
    critic = build_critic(DiscriminatorConfig(base_channels=4))
    with torch.no_grad():
        for p in critic.parameters():
            p.zero_()
        scores = critic_forward(critic, torch.rand(2, 3, 64, 64))
    assert all(not g.any() for g in scores.grids)
    assert all(float(m) == 0 for m in scores.means)


def test_deterministic():
    x = images()
    a = critic_forward(small_critic(3), x)
    b = critic_forward(small_critic(3), x)
    assert all(torch.equal(ga, gb) for ga, gb in zip(a.grids, b.grids))


def test_too_small_input():
    with pytest.raises(DimensionError):
        critic_forward(build_critic(), torch.rand(1, 3, 16, 16))


def test_fake_equals_real_leaves_only_penalty():
    critic, x = small_critic(), images()
    d, gp, _ = critic_loss(critic, x, x, torch.Generator().manual_seed(0), gp_lambda=1.0)
    assert float(d.detach()) == pytest.approx(float(gp.detach()), abs=1e-12)
    d3, gp3, _ = critic_loss(critic, x, x, torch.Generator().manual_seed(0), gp_lambda=3.0)
    assert float(d3.detach()) == pytest.approx(3.0 * float(gp3.detach()), abs=1e-12)


def test_unit_norm_critic_has_zero_penalty():
    real, fake = images(seed=1), images(seed=2)
    gp = gradient_penalty(UnitLinear(real.shape[1:]), real, fake, torch.Generator().manual_seed(0))
    assert float(gp.detach()) == pytest.approx(0.0, abs=1e-20)


def test_penalty_nonnegative_and_positive_off_unit_norm():
    real, fake = images(seed=1), images(seed=2)
    sub = UnitLinear(real.shape[1:])
    scaled = lambda x: 2 * sub(x)
    gp = gradient_penalty(scaled, real, fake, torch.Generator().manual_seed(0))
    assert float(gp.detach()) == pytest.approx(1.0)


def test_constant_critic_without_penalty():
    fake, real = images(seed=1), images(seed=2)
    t = adversarial_losses(Constant(0.7), fake, real, gp_lambda=0.0)
    assert float(t.d_loss.detach()) == 0.0
    assert float(t.g_loss.detach()) == pytest.approx(-0.7)


def test_generator_and_fake_term_cancel():
    critic, fake, real = small_critic(), images(seed=1), images(seed=2)
    gen = torch.Generator().manual_seed(0)
    _, _, (d_losses, gps) = critic_loss(critic, fake, real, gen, gp_lambda=0.0)
    _, g_losses = generator_adversarial_loss(critic, fake)
    for sub, g in zip(critic.critics, g_losses):
        fake_term = sub(fake).flatten(1).mean(1).mean()
        assert float((g + fake_term).detach()) == 0.0


def test_losses_average_sub_critics():
    critic, fake, real = small_critic(), images(seed=1), images(seed=2)
    t = adversarial_losses(critic, fake, real, torch.Generator().manual_seed(5))
    assert float(t.d_loss.detach()) == pytest.approx(float(sum(t.d_losses).detach()) / 2)
    assert float(t.g_loss.detach()) == pytest.approx(float(sum(t.g_losses).detach()) / 2)
    assert float(t.gp.detach()) >= 0


def test_fixed_rng_is_deterministic():
    critic, fake, real = small_critic(), images(seed=1), images(seed=2)
    a = adversarial_losses(critic, fake, real, torch.Generator().manual_seed(9))
    b = adversarial_losses(critic, fake, real, torch.Generator().manual_seed(9))
    assert float(a.d_loss.detach()) == float(b.d_loss.detach())


def test_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        adversarial_losses(small_critic(), images(size=32), images(size=64))


def test_penalty_backpropagates_into_critic():
    critic, fake, real = small_critic(), images(seed=1), images(seed=2)
    d, _, _ = critic_loss(critic, fake, real, torch.Generator().manual_seed(0))
    d.backward()
    assert all(p.grad is not None for p in critic.parameters())
