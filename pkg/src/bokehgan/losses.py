"""Bokeh losses and the stage-wise composite objectives.

All losses take batched ``(N, C, H, W)`` images (unbatched ``(C, H, W)``
is treated as a batch of one) and a saliency mask broadcastable to
``(N, 1, H, W)`` where 1 marks the in-focus foreground.  Per-image values
are averaged over the batch.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import ShapeMismatchError, SobelDirection, sobel, ssim, total_variation

STAGES = ("pretrain", "refine")
EDGE_DIRECTIONS = tuple(SobelDirection)


class LossConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    l1: float = 0.0
    ssim: float = 0.0
    edgediff: float = 0.0
    backblur: float = 0.0
    foreedge: float = 0.0
    vgg: float = 0.0
    adv: float = 0.0

    def __post_init__(self):
        bad = [k for k, v in self.as_dict().items() if not (math.isfinite(v) and v >= 0)]
        if bad:
            raise LossConfigError(f"loss weights must be finite and >= 0: {', '.join(bad)}")

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)

    @classmethod
    def pretrain(cls) -> "LossWeights":
        return cls(l1=0.5, ssim=0.05, edgediff=0.005, backblur=0.1, foreedge=0.005)

    @classmethod
    def refine(cls) -> "LossWeights":
        return cls(l1=0.5, ssim=0.05, vgg=0.1, adv=1.0)

    @classmethod
    def preset(cls, stage: str) -> "LossWeights":
        if stage not in STAGES:
            raise LossConfigError(f"unknown stage {stage!r}")
        return cls.pretrain() if stage == "pretrain" else cls.refine()

    def without_bokeh(self) -> "LossWeights":
        return dataclasses.replace(self, edgediff=0.0, backblur=0.0, foreedge=0.0)


@dataclass
class LossReport:
    """Per-term values of one composite evaluation.

    Only terms with a nonzero weight are computed and recorded; looking up
    any other term yields 0.0.
    """

    stage: str
    terms: dict[str, float]
    weights: dict[str, float]
    total: float
    tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)
    # diagnostics outside the weighted sum, e.g. critic loss and gradient penalty
    extras: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, name: str) -> float:
        return self.terms.get(name, 0.0)

    def weighted_sum(self) -> float:
        return sum(self.weights[k] * v for k, v in self.terms.items())


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


def _batched_mask(mask: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    if mask.dim() == 2:
        mask = mask[None, None]
    elif mask.dim() == 3:
        mask = mask.unsqueeze(1) if mask.shape[0] == image.shape[0] and mask.shape[0] != 1 else mask[None]
    if mask.shape[-2:] != image.shape[-2:] or mask.shape[1] != 1:
        raise ShapeMismatchError(
            f"mask {tuple(mask.shape)} does not match image {tuple(image.shape)}"
        )
    return mask


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def _foreground_edge_per_image(img: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    img = _batched(img)
    mask = _batched_mask(mask, img)
    masked = img * mask
    h, w = img.shape[-2:]
    strength = sum(sobel(masked, d).abs().flatten(1).sum(1) for d in EDGE_DIRECTIONS)
    return -strength / (h * w)


def foreground_edge_loss(img: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Negative normalized Sobel edge strength of the masked foreground."""
    return _foreground_edge_per_image(img, mask).mean()


def edge_difference_loss(
    input: torch.Tensor, output: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    _check_same(input, output, "edge_difference_loss input/output")
    out_edges = _foreground_edge_per_image(output, mask).abs()
    in_edges = _foreground_edge_per_image(input, mask).abs()
    return (out_edges - in_edges).abs().mean()


def background_blur_loss(img: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    img = _batched(img)
    mask = _batched_mask(mask, img)
    h, w = img.shape[-2:]
    background = img * (1 - mask)
    per_image = torch.stack([total_variation(b) for b in background])
    return per_image.mean() / (h * w)


def l1_loss(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same(output, target, "l1_loss")
    return (output - target).abs().mean()


def ssim_loss(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return 1.0 - ssim(output, target)


class FeatureExtractor(nn.Module):
    """Frozen random convolutional feature stack standing in for VGG.

    Weights are drawn once from ``seed`` and never trained.  Any module
    returning a list of feature maps can be used in its place.
    """

    def __init__(self, channels: tuple[int, ...] = (16, 32, 32), in_channels: int = 3, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        prev = in_channels
        for i, ch in enumerate(channels):
            conv = nn.Conv2d(prev, ch, 3, stride=1 if i == 0 else 2, padding=1)
            bound = math.sqrt(3.0 / (prev * 9))
            with torch.no_grad():
                conv.weight.copy_(torch.empty_like(conv.weight).uniform_(-bound, bound, generator=gen))
                conv.bias.zero_()
            layers.append(conv)
            prev = ch
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.layers:
            x = torch.tanh(conv(x))
            feats.append(x)
        return feats


def perceptual_loss(
    a: torch.Tensor, b: torch.Tensor, features: Callable[[torch.Tensor], list[torch.Tensor]]
) -> torch.Tensor:
    _check_same(a, b, "perceptual_loss")
    a, b = _batched(a), _batched(b)
    fa, fb = features(a), features(b)
    return sum(F.mse_loss(x, y.to(x.dtype)) for x, y in zip(fa, fb)) / len(fa)


def composite_loss(
    stage: str,
    input: torch.Tensor,
    output: torch.Tensor,
    target: torch.Tensor,
    mask: torch.Tensor,
    weights: LossWeights,
    adv_term: torch.Tensor | None = None,
    features: Callable | None = None,
) -> LossReport:
    """Weighted stage objective.

    ``pretrain`` combines L1, 1-SSIM and the three bokeh losses;
    ``refine`` combines L1, 1-SSIM, perceptual and the adversarial term.
    Terms outside the stage's set, or with zero weight, are skipped.
    """
    if stage not in STAGES:
        raise LossConfigError(f"unknown stage {stage!r}")
    if not isinstance(weights, LossWeights):
        weights = LossWeights(**weights)
    _check_same(output, target, "composite_loss output/target")
    _check_same(input, output, "composite_loss input/output")

    terms: dict[str, Callable[[], torch.Tensor]] = {
        "l1": lambda: l1_loss(output, target),
        "ssim": lambda: ssim_loss(output, target),
    }
    if stage == "pretrain":
        terms["edgediff"] = lambda: edge_difference_loss(input, output, mask)
        terms["backblur"] = lambda: background_blur_loss(output, mask)
        terms["foreedge"] = lambda: foreground_edge_loss(output, mask)
    else:
        if weights.vgg > 0 and features is None:
            raise LossConfigError("refine stage with a perceptual weight needs a feature extractor")
        terms["vgg"] = lambda: perceptual_loss(output, target, features)
        if weights.adv > 0 and adv_term is None:
            raise LossConfigError("refine stage with an adversarial weight needs adv_term")
        terms["adv"] = lambda: adv_term

    w = weights.as_dict()
    values: dict[str, torch.Tensor] = {k: fn() for k, fn in terms.items() if w[k] > 0}
    total = sum((w[k] * v for k, v in values.items()), output.new_zeros(()))
    return LossReport(
        stage=stage,
        terms={k: float(v.detach()) for k, v in values.items()},
        weights={k: w[k] for k in values},
        total=float(total.detach()),
        tensor=total,
    )


def non_finite_terms(report: LossReport) -> list[str]:
    return [k for k, v in report.terms.items() if not math.isfinite(v)]


def weights_from_mapping(values: Mapping[str, float]) -> LossWeights:
    return LossWeights(**{k: float(v) for k, v in values.items()})
