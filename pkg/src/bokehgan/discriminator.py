"""Dual receptive-field patch critic and the gradient-penalty objective."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import torch
import torch.nn as nn

from .imaging import DimensionError, ShapeMismatchError


class DiscriminatorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DiscriminatorConfig:
    depths: tuple[int, ...] = (3, 5)
    base_channels: int = 64
    gp_lambda: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if not self.depths or any(d < 1 for d in self.depths):
            raise DiscriminatorConfigError(f"depths must be nonempty and >= 1, got {self.depths}")
        if self.base_channels <= 0:
            raise DiscriminatorConfigError("base_channels must be positive")
        if not self.gp_lambda >= 0:
            raise DiscriminatorConfigError("gp_lambda must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["depths"] = list(self.depths)
        return d


def score_grid_size(n: int, depth: int) -> int:
    """Side length of a critic's score grid for input side ``n``.

    Each 4x4/stride-2/pad-1 convolution maps ``n`` to ``n // 2``; the final
    3x3 scoring convolution keeps size.
    """
    for _ in range(depth):
        n //= 2
    return n


class PatchCritic(nn.Module):
    def __init__(self, depth: int, base_channels: int = 64, in_channels: int = 3):
        super().__init__()
        self.depth = depth
        layers: list[nn.Module] = []
        prev = in_channels
        for i in range(depth):
            ch = base_channels * min(2**i, 8)
            layers += [nn.Conv2d(prev, ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            prev = ch
        layers.append(nn.Conv2d(prev, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


@dataclass
class CriticScoreMap:
    grids: list[torch.Tensor]  # one (N, 1, h_k, w_k) map per sub-critic

    @property
    def means(self) -> list[torch.Tensor]:
        return [g.mean() for g in self.grids]


class DualCritic(nn.Module):
    def __init__(self, config: DiscriminatorConfig | None = None, in_channels: int = 3):
        super().__init__()
        self.config = config or DiscriminatorConfig()
        self.critics = nn.ModuleList(
            PatchCritic(d, self.config.base_channels, in_channels) for d in self.config.depths
        )

    def forward(self, x) -> CriticScoreMap:
        return critic_forward(self, x)


def build_critic(config: DiscriminatorConfig | None = None, seed: int = 0) -> DualCritic:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DualCritic(config)


def _sub_critics(critic) -> Sequence[Callable[[torch.Tensor], torch.Tensor]]:
    return list(critic.critics) if hasattr(critic, "critics") else [critic]


def critic_forward(critic, img: torch.Tensor) -> CriticScoreMap:
    x = img if img.dim() == 4 else img.unsqueeze(0)
    h, w = x.shape[-2:]
    depths = [getattr(c, "depth", 0) for c in _sub_critics(critic)]
    deepest = max(depths)
    if min(score_grid_size(h, deepest), score_grid_size(w, deepest)) < 1:
        raise DimensionError(f"input {h}x{w} too small for a depth-{deepest} critic")
    return CriticScoreMap([c(x) for c in _sub_critics(critic)])


def _per_sample_score(sub, x: torch.Tensor) -> torch.Tensor:
    return sub(x).flatten(1).mean(1)


def gradient_penalty(
    sub: Callable[[torch.Tensor], torch.Tensor],
    real: torch.Tensor,
    fake: torch.Tensor,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Mean of ``(||grad D(x_hat)||_2 - 1)^2`` over real/fake interpolates.

    One mixing coefficient per sample.  ``D`` here is the sub-critic's
    per-sample mean score.  The returned value keeps its graph so it can be
    backpropagated into the critic.
    """
    n = real.shape[0]
    eps = torch.rand(n, 1, 1, 1, generator=generator, dtype=real.dtype)
    x_hat = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
    score = _per_sample_score(sub, x_hat)
    (grad,) = torch.autograd.grad(score.sum(), x_hat, create_graph=True)
    norms = grad.flatten(1).norm(2, dim=1)
    return ((norms - 1) ** 2).mean()


@dataclass
class AdversarialTerms:
    g_loss: torch.Tensor
    d_loss: torch.Tensor
    gp: torch.Tensor
    g_losses: list[torch.Tensor]
    d_losses: list[torch.Tensor]
    gps: list[torch.Tensor]


def critic_loss(critic, fake, real, generator=None, gp_lambda: float = 1.0):
    """Critic objective averaged over sub-critics; returns ``(d_loss, gp, parts)``."""
    if fake.shape != real.shape:
        raise ShapeMismatchError(f"fake {tuple(fake.shape)} vs real {tuple(real.shape)}")
    d_losses, gps = [], []
    for sub in _sub_critics(critic):
        gap = _per_sample_score(sub, fake.detach()).mean() - _per_sample_score(sub, real).mean()
        gp = gradient_penalty(sub, real, fake, generator) if gp_lambda > 0 else gap.new_zeros(())
        d_losses.append(gap + gp_lambda * gp)
        gps.append(gp)
    return _mean(d_losses), _mean(gps), (d_losses, gps)


def generator_adversarial_loss(critic, fake):
    g_losses = [-_per_sample_score(sub, fake).mean() for sub in _sub_critics(critic)]
    return _mean(g_losses), g_losses


def adversarial_losses(critic, fake, real, generator=None, gp_lambda: float | None = None) -> AdversarialTerms:
    """Generator and critic losses of a (possibly multi-scale) WGAN-GP critic."""
    if gp_lambda is None:
        gp_lambda = getattr(getattr(critic, "config", None), "gp_lambda", 1.0)
    d_loss, gp, (d_losses, gps) = critic_loss(critic, fake, real, generator, gp_lambda)
    g_loss, g_losses = generator_adversarial_loss(critic, fake)
    return AdversarialTerms(g_loss, d_loss, gp, g_losses, d_losses, gps)


def _mean(values: Iterable[torch.Tensor]) -> torch.Tensor:
    values = list(values)
    return torch.stack(values).mean()
