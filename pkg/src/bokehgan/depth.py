"""Blur-cue sources: precomputed depth files, an external tool, or a synthetic field.

Every map produced here is a ``(H, W)`` float tensor in ``[0, 1]`` using
the disparity convention, so 1 is near/in-focus and 0 is far background.
The same map serves as the generator's fourth channel and as the
foreground mask of the bokeh losses.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

KINDS = ("precomputed_file", "synthetic_gradient", "external_command")
NORMALIZATIONS = ("minmax", "fixed_range")


class DepthError(ValueError):
    pass


@dataclass(frozen=True)
class DepthSource:
    kind: str = "precomputed_file"
    normalization: str = "minmax"
    command: str = ""
    invert: bool = False  # set for files storing depth (far = large) instead of disparity

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DepthError(f"unknown depth source kind {self.kind!r}; expected one of {KINDS}")
        if self.normalization not in NORMALIZATIONS:
            raise DepthError(f"unknown normalization {self.normalization!r}")
        if self.kind == "external_command" and not self.command:
            raise DepthError("external_command depth source needs a command")


def read_grayscale(path: str | Path) -> tuple[np.ndarray, float]:
    """Decode a single-channel image; returns the raw values and the dtype peak."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"depth file not found: {path}")
    with Image.open(path) as im:
        if len(im.getbands()) != 1:
            raise DepthError(f"{path}: expected a single-channel depth map, got mode {im.mode}")
        arr = np.array(im)
        mode = im.mode
    if arr.dtype == np.uint8:
        peak = 255.0
    elif mode.startswith("I;16") or arr.dtype == np.uint16:
        peak = 65535.0
    elif mode == "I" and arr.max(initial=0) <= 65535 and arr.min(initial=0) >= 0:
        peak = 65535.0
    else:
        peak = float(np.abs(arr).max()) or 1.0
    return arr.astype(np.float64), peak


def resize_bilinear(plane: torch.Tensor, dims: tuple[int, int]) -> torch.Tensor:
    if tuple(plane.shape[-2:]) == tuple(dims):
        return plane
    out = F.interpolate(plane[None, None], size=tuple(dims), mode="bilinear", align_corners=False)
    return out[0, 0]


def minmax(plane: torch.Tensor, source: str = "depth map") -> torch.Tensor:
    lo, hi = plane.min(), plane.max()
    if not hi > lo:
        raise DepthError(
            f"{source} is constant ({float(lo):g}); min-max normalization is undefined. "
            "Supply a map with depth variation or use fixed_range normalization."
        )
    return (plane - lo) / (hi - lo)


def load_depth(
    path: str | Path,
    target_dims: tuple[int, int] | None = None,
    normalization: str = "minmax",
    invert: bool = False,
) -> torch.Tensor:
    arr, peak = read_grayscale(path)
    plane = torch.from_numpy(arr)
    if target_dims is not None:
        plane = resize_bilinear(plane, target_dims)
    if normalization == "minmax":
        plane = minmax(plane, str(path))
    elif normalization == "fixed_range":
        plane = (plane / peak).clamp(0.0, 1.0)
    else:
        raise DepthError(f"unknown normalization {normalization!r}")
    if invert:
        plane = 1.0 - plane
    return plane.float()


def synthetic_depth(dims: tuple[int, int], seed: int = 0) -> torch.Tensor:
    """Smooth random disparity field: a vertical ramp plus low-frequency noise."""
    h, w = dims
    if h < 8 or w < 8:
        raise DepthError(f"synthetic depth needs dims >= 8x8, got {h}x{w}")
    rng = np.random.default_rng(seed)
    ramp = np.linspace(0.0, 1.0, h)[:, None].repeat(w, axis=1)
    coarse = torch.from_numpy(rng.normal(size=(4, 4)))
    noise = F.interpolate(coarse[None, None], size=(h, w), mode="bicubic", align_corners=True)[0, 0]
    field = torch.from_numpy(ramp) + 0.35 * noise
    return minmax(field, "synthetic depth").float()


def run_external(command: str, image_path: str | Path, dims: tuple[int, int], **kwargs) -> torch.Tensor:
    """Run ``<command> <image> <output>`` and load the grayscale map it writes."""
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "depth.png"
        argv = shlex.split(command) + [str(image_path), str(out)]
        result = subprocess.run(argv, capture_output=True, text=True)
        if result.returncode != 0:
            raise DepthError(
                f"depth command exited with {result.returncode}: {result.stderr.strip()[:200]}"
            )
        if not out.is_file():
            raise DepthError(f"depth command did not write {out.name}")
        return load_depth(out, dims, **kwargs)


def provide_depth(
    source: DepthSource,
    image_path: str | Path | None,
    dims: tuple[int, int],
    depth_path: str | Path | None = None,
    seed: int = 0,
) -> torch.Tensor:
    if source.kind == "precomputed_file":
        if depth_path is None:
            raise DepthError("precomputed_file depth source needs a depth file")
        return load_depth(depth_path, dims, source.normalization, source.invert)
    if source.kind == "external_command":
        if image_path is None:
            raise DepthError("external_command depth source needs an image path")
        return run_external(source.command, image_path, dims,
                            normalization=source.normalization, invert=source.invert)
    return synthetic_depth(dims, seed)


def save_depth(plane: torch.Tensor, path: str | Path) -> None:
    """Write a ``[0, 1]`` map as a 16-bit grayscale PNG."""
    arr = np.round(plane.detach().cpu().double().clamp(0, 1).numpy() * 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)
