"""Differentiable imaging primitives shared by the losses, metrics and tests.

Images are torch tensors laid out channels-first, ``(C, H, W)`` or batched
``(N, C, H, W)``, with intensities in ``[0, 1]``.  Every function here is a
pure function of its inputs.
"""

from __future__ import annotations

import enum
import math

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "SobelDirection",
    "DimensionError",
    "ShapeMismatchError",
    "sobel",
    "total_variation",
    "psnr",
    "ssim",
    "gaussian_window",
    "to_tensor",
    "to_numpy",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class DimensionError(ValueError):
    """Spatial dimensions too small for the requested operation."""


class ShapeMismatchError(ValueError):
    """Two tensors that must agree in shape do not."""


class SobelDirection(enum.Enum):
    D0 = 0
    D45 = 45
    D90 = 90
    D135 = 135

    @property
    def kernel(self) -> np.ndarray:
        return _KERNELS[self].copy()


_D0 = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_D45 = np.array([[0, 1, 2], [-1, 0, 1], [-2, -1, 0]], dtype=np.float64)
_KERNELS = {
    SobelDirection.D0: _D0,
    SobelDirection.D90: _D0.T.copy(),
    SobelDirection.D45: _D45,
    # D45 is its own anti-transpose; the 135 degree kernel is its left-right mirror
    SobelDirection.D135: _D45[:, ::-1].copy(),
}


def _as_planes(image: torch.Tensor) -> tuple[torch.Tensor, tuple[int, ...]]:
    """Reshape ``(..., H, W)`` into ``(B, 1, H, W)`` single-channel planes."""
    if image.dim() < 2:
        raise DimensionError(f"expected at least 2 dims, got shape {tuple(image.shape)}")
    shape = tuple(image.shape)
    return image.reshape(-1, 1, shape[-2], shape[-1]), shape


def sobel(image: torch.Tensor, direction: SobelDirection) -> torch.Tensor:
    """Directional Sobel response with replicate padding.

    Cross-correlates every channel plane independently, so the output has
    the same shape as ``image``.
    """
    h, w = image.shape[-2:]
    if h < 3 or w < 3:
        raise DimensionError(f"sobel needs H, W >= 3, got {h}x{w}")
    planes, shape = _as_planes(image)
    kernel = torch.as_tensor(_KERNELS[direction], dtype=image.dtype, device=image.device)
    padded = F.pad(planes, (1, 1, 1, 1), mode="replicate")
    out = F.conv2d(padded, kernel.view(1, 1, 3, 3))
    return out.reshape(shape)


def total_variation(image: torch.Tensor) -> torch.Tensor:
    """Anisotropic total variation summed over every leading dimension."""
    h, w = image.shape[-2:]
    if h < 2 or w < 2:
        raise DimensionError(f"total_variation needs H, W >= 2, got {h}x{w}")
    dh = (image[..., 1:, :] - image[..., :-1, :]).abs().sum()
    dw = (image[..., :, 1:] - image[..., :, :-1]).abs().sum()
    return dh + dw


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for unit peak; ``inf`` for identical inputs."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"psnr shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = torch.mean((a.double() - b.double()) ** 2).item()
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5).

    Windows are not padded, so only fully interior positions count.
    """
    if a.shape != b.shape:
        raise ShapeMismatchError(f"ssim shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    h, w = a.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DimensionError(f"ssim window {SSIM_WINDOW} larger than image {h}x{w}")
    x, _ = _as_planes(a)
    y, _ = _as_planes(b)
    win = torch.as_tensor(gaussian_window(), dtype=a.dtype, device=a.device).view(
        1, 1, SSIM_WINDOW, SSIM_WINDOW
    )

    mu_x = F.conv2d(x, win)
    mu_y = F.conv2d(y, win)
    sxx = F.conv2d(x * x, win) - mu_x**2
    syy = F.conv2d(y * y, win) - mu_y**2
    sxy = F.conv2d(x * y, win) - mu_x * mu_y

    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean()


def to_tensor(array: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """``(H, W, C)`` or ``(H, W)`` array to a channels-first tensor."""
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype)


def to_numpy(tensor: torch.Tensor) -> np.ndarray:
    """Channels-first tensor to an ``(H, W, C)`` float64 array."""
    return tensor.detach().cpu().double().numpy().transpose(1, 2, 0)
