"""Depth-conditioned NAF-style U-Net generator.

Input is RGB plus one blur-cue channel, output is the RGB bokeh image.
Blocks use only convolutions, layer norm, pooling, addition and
multiplication; there is no activation function anywhere in the network.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import ShapeMismatchError


ENDING_INIT_GAIN = 0.3


class GeneratorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    width: int = 8
    enc_blocks: tuple[int, ...] = (2, 2, 2, 20)
    mid_blocks: int = 2
    dec_blocks: tuple[int, ...] = (2, 2, 2, 2)
    in_channels: int = 4
    out_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "enc_blocks", tuple(int(b) for b in self.enc_blocks))
        object.__setattr__(self, "dec_blocks", tuple(int(b) for b in self.dec_blocks))
        if self.width <= 0:
            raise GeneratorConfigError(f"width must be positive, got {self.width}")
        if len(self.enc_blocks) != len(self.dec_blocks):
            raise GeneratorConfigError(
                f"encoder and decoder need the same number of levels: "
                f"{list(self.enc_blocks)} vs {list(self.dec_blocks)}"
            )
        if any(b < 0 for b in self.enc_blocks + self.dec_blocks) or self.mid_blocks < 0:
            raise GeneratorConfigError("block counts must be >= 0")

    @property
    def stride(self) -> int:
        """Spatial dims must be multiples of this."""
        return 2 ** len(self.enc_blocks)

    @property
    def total_blocks(self) -> int:
        return sum(self.enc_blocks) + self.mid_blocks + sum(self.dec_blocks)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["enc_blocks"] = list(self.enc_blocks)
        d["dec_blocks"] = list(self.dec_blocks)
        return d


class LayerNorm2d(nn.Module):
    """Layer norm over the channel axis at every pixel."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        x = x.permute(0, 2, 3, 1)
        x = F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)


class SimpleGate(nn.Module):
    def forward(self, x):
        a, b = x.chunk(2, dim=1)
        return a * b


class NAFBlock(nn.Module):
    def __init__(self, c: int, dw_expand: int = 2, ffn_expand: int = 2):
        super().__init__()
        dw = c * dw_expand
        self.norm1 = LayerNorm2d(c)
        self.conv1 = nn.Conv2d(c, dw, 1)
        self.conv2 = nn.Conv2d(dw, dw, 3, padding=1, groups=dw)
        self.gate = SimpleGate()
        # simplified channel attention: pooled features -> per-channel scale
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.sca = nn.Conv2d(dw // 2, dw // 2, 1)
        self.conv3 = nn.Conv2d(dw // 2, c, 1)

        ffn = c * ffn_expand
        self.norm2 = LayerNorm2d(c)
        self.conv4 = nn.Conv2d(c, ffn, 1)
        self.conv5 = nn.Conv2d(ffn // 2, c, 1)

        self.beta = nn.Parameter(torch.ones(1, c, 1, 1))
        self.gamma = nn.Parameter(torch.ones(1, c, 1, 1))

    def forward(self, inp):
        x = self.norm1(inp)
        x = self.conv2(self.conv1(x))
        x = self.gate(x)
        x = x * self.sca(self.pool(x))
        x = self.conv3(x)
        y = inp + x * self.beta

        x = self.conv4(self.norm2(y))
        x = self.gate(x)
        x = self.conv5(x)
        return y + x * self.gamma


class Generator(nn.Module):
    """U-shaped NAF network with additive skips and a global RGB residual.

    ``forward`` returns unclamped values so gradients survive saturation;
    clamp with :func:`generator_forward` or :func:`render` at inference.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c = config.width
        self.intro = nn.Conv2d(config.in_channels, c, 3, padding=1)
        self.ending = nn.Conv2d(c, config.out_channels, 3, padding=1)
        with torch.no_grad():
            # start close to the identity map provided by the global residual
            self.ending.weight.mul_(ENDING_INIT_GAIN)
            self.ending.bias.mul_(ENDING_INIT_GAIN)

        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        for n in config.enc_blocks:
            self.encoders.append(nn.Sequential(*[NAFBlock(c) for _ in range(n)]))
            self.downs.append(nn.Conv2d(c, 2 * c, 2, stride=2))
            c *= 2

        self.middle = nn.Sequential(*[NAFBlock(c) for _ in range(config.mid_blocks)])

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for n in config.dec_blocks:
            self.ups.append(nn.Sequential(nn.Conv2d(c, 2 * c, 1, bias=False), nn.PixelShuffle(2)))
            c //= 2
            self.decoders.append(nn.Sequential(*[NAFBlock(c) for _ in range(n)]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if x.dim() != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeMismatchError(
                f"generator expects (N, {cfg.in_channels}, H, W), got {tuple(x.shape)}"
            )
        h, w = x.shape[-2:]
        if h % cfg.stride or w % cfg.stride:
            raise ShapeMismatchError(f"H and W must be multiples of {cfg.stride}, got {h}x{w}")

        feat = self.intro(x)
        skips = []
        for enc, down in zip(self.encoders, self.downs):
            feat = enc(feat)
            skips.append(feat)
            feat = down(feat)
        feat = self.middle(feat)
        for dec, up, skip in zip(self.decoders, self.ups, reversed(skips)):
            feat = dec(up(feat) + skip)
        return self.ending(feat) + x[:, : cfg.out_channels]


def build_generator(config: GeneratorConfig | None = None, seed: int = 0) -> Generator:
    """Construct a generator with weights fully determined by ``seed``."""
    config = config or GeneratorConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Generator(config)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def assemble_input(image: torch.Tensor, cue: torch.Tensor) -> torch.Tensor:
    """Append the blur cue as a fourth channel: ``[R, G, B, cue]``."""
    batched = image.dim() == 4
    img = image if batched else image.unsqueeze(0)
    if cue.dim() == 2:
        cue = cue[None, None]
    elif cue.dim() == 3:
        cue = cue.unsqueeze(1) if batched and cue.shape[0] == img.shape[0] else cue[None]
    if cue.shape[-2:] != img.shape[-2:]:
        raise ShapeMismatchError(
            f"cue {tuple(cue.shape[-2:])} does not match image {tuple(img.shape[-2:])}"
        )
    cue = cue.expand(img.shape[0], 1, *img.shape[-2:]).to(img.dtype)
    out = torch.cat([img, cue], dim=1)
    return out if batched else out[0]


def generator_forward(generator: Generator, x: torch.Tensor, clamp: bool = True) -> torch.Tensor:
    batched = x.dim() == 4
    out = generator(x if batched else x.unsqueeze(0))
    if clamp:
        out = out.clamp(0.0, 1.0)
    return out if batched else out[0]


@torch.no_grad()
def render(generator: Generator, image: torch.Tensor, cue: torch.Tensor) -> torch.Tensor:
    """Inference on an arbitrarily sized ``(3, H, W)`` image.

    Pads by edge replication to the generator stride, runs the network and
    crops back to ``H x W``.  Output is clamped to ``[0, 1]``.
    """
    stride = generator.config.stride
    h, w = image.shape[-2:]
    ph, pw = (-h) % stride, (-w) % stride
    x = assemble_input(image, cue).unsqueeze(0)
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    out = generator_forward(generator, x, clamp=True)
    return out[0, :, :h, :w]
