"""Paired-image datasets: manifests on disk, in-memory synthetic pairs, batching.

Batches are pure functions of ``(seed, step)``: the epoch permutation is
drawn from ``(seed, epoch)`` and each crop offset from ``(seed, step, slot)``,
so any worker can rebuild any batch without shared state.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .depth import DepthSource, load_depth, provide_depth, save_depth

DEFAULT_CROP = 1024
MANIFEST_FIELDS = ("id", "input_path", "target_path", "depth_path", "split")


class DataError(ValueError):
    pass


@dataclass
class SamplePair:
    input: torch.Tensor  # (3, H, W)
    target: torch.Tensor  # (3, H, W)
    mask: torch.Tensor  # (H, W), 1 = in focus
    id: str

    def __post_init__(self):
        if self.input.shape != self.target.shape:
            raise DataError(
                f"{self.id}: input {tuple(self.input.shape)} and target "
                f"{tuple(self.target.shape)} differ"
            )
        if tuple(self.mask.shape) != tuple(self.input.shape[-2:]):
            raise DataError(f"{self.id}: mask {tuple(self.mask.shape)} does not match image")


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    input_path: Path
    target_path: Path
    depth_path: Path | None
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    crop_size: int | None = DEFAULT_CROP
    seed: int = 0
    depth_source: DepthSource | None = None
    path: Path | None = None

    def split_ids(self, split: str) -> list[str]:
        return [r.id for r in self.records if r.split == split]

    def record(self, id: str) -> ManifestRecord:
        for r in self.records:
            if r.id == id:
                return r
        raise KeyError(id)

    def load_pair(self, id: str) -> SamplePair:
        rec = self.record(id)
        inp = read_rgb(rec.input_path)
        tgt = read_rgb(rec.target_path)
        if inp.shape != tgt.shape:
            raise DataError(f"{rec.id}: input and target sizes differ")
        dims = tuple(inp.shape[-2:])
        if rec.depth_path is not None:
            mask = load_depth(rec.depth_path, dims)
        elif self.depth_source is not None and self.depth_source.kind != "precomputed_file":
            mask = provide_depth(self.depth_source, rec.input_path, dims, seed=self.seed)
        else:
            raise DataError(f"{rec.id}: no depth_path and no depth source configured")
        return SamplePair(inp, tgt, mask, rec.id)


@dataclass
class PairSet:
    """In-memory pairs with the same batching interface as a manifest."""

    pairs: dict[str, list[SamplePair]] = field(default_factory=dict)
    crop_size: int | None = None
    seed: int = 0

    def split_ids(self, split: str) -> list[str]:
        return [p.id for p in self.pairs.get(split, [])]

    def load_pair(self, id: str) -> SamplePair:
        for group in self.pairs.values():
            for p in group:
                if p.id == id:
                    return p
        raise KeyError(id)


def read_rgb(path: str | Path) -> torch.Tensor:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def write_rgb(image: torch.Tensor, path: str | Path) -> None:
    arr = image.detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy()
    Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)


def load_manifest(
    path: str | Path,
    crop_size: int | None = DEFAULT_CROP,
    seed: int = 0,
    depth_source: DepthSource | None = None,
) -> DatasetManifest:
    """Read a CSV manifest with columns ``id,input_path,target_path,depth_path,split``.

    ``id`` and ``depth_path`` may be omitted or blank; relative paths resolve
    against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    records: list[ManifestRecord] = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(row for row in fh if not row.lstrip().startswith("#"))
        missing = {"input_path", "target_path", "split"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: manifest lacks columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                inp = base / row["input_path"].strip()
                tgt = base / row["target_path"].strip()
                depth = (row.get("depth_path") or "").strip()
                split = row["split"].strip()
            except AttributeError as exc:
                raise DataError(f"{path}:{lineno}: unreadable record") from exc
            if not split:
                raise DataError(f"{path}:{lineno}: empty split")
            rid = (row.get("id") or "").strip() or inp.stem
            records.append(ManifestRecord(rid, inp, tgt, base / depth if depth else None, split))

    splits: dict[str, str] = {}
    for r in records:
        if r.id in splits:
            where = "in two splits" if splits[r.id] != r.split else "twice"
            raise DataError(f"{path}: id {r.id!r} appears {where} ({splits[r.id]}, {r.split})")
        splits[r.id] = r.split
        for p in (r.input_path, r.target_path, r.depth_path):
            if p is not None and not p.is_file():
                raise DataError(f"{path}: record {r.id!r} references missing file {p}")
    return DatasetManifest(records, crop_size, seed, depth_source, path)


def crop_offsets(seed: int, step: int, slot: int, dims: tuple[int, int], crop: int | None):
    h, w = dims
    if crop is None:
        return 0, 0, h, w
    if crop > h or crop > w:
        raise DataError(f"crop {crop} larger than image {h}x{w}")
    rng = np.random.default_rng([seed, step, slot])
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    return y, x, crop, crop


def batch_ids(ids: list[str], seed: int, batch_size: int, step: int) -> list[str]:
    n = len(ids)
    if n == 0:
        raise DataError("split is empty")
    if batch_size > n:
        raise DataError(f"batch size {batch_size} exceeds split size {n}")
    per_epoch = n // batch_size
    epoch, pos = divmod(step, per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [ids[i] for i in order[pos * batch_size:(pos + 1) * batch_size]]


def sample_batch(source, split: str, batch_size: int, step: int) -> list[SamplePair]:
    """Deterministic batch for ``step``; crops are aligned across input, target and mask."""
    chosen = batch_ids(source.split_ids(split), source.seed, batch_size, step)
    batch = []
    for slot, id in enumerate(chosen):
        pair = source.load_pair(id)
        y, x, ch, cw = crop_offsets(source.seed, step, slot, tuple(pair.input.shape[-2:]), source.crop_size)
        batch.append(SamplePair(
            # copies, so callers can modify a batch without touching the source
            pair.input[:, y:y + ch, x:x + cw].clone(),
            pair.target[:, y:y + ch, x:x + cw].clone(),
            pair.mask[y:y + ch, x:x + cw].clone(),
            pair.id,
        ))
    return batch


def steps_per_epoch(source, split: str, batch_size: int) -> int:
    return max(len(source.split_ids(split)) // batch_size, 1)


def collate(batch: list[SamplePair]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack into ``(N, 3, H, W)`` input, target and ``(N, 1, H, W)`` mask."""
    inp = torch.stack([p.input for p in batch])
    tgt = torch.stack([p.target for p in batch])
    mask = torch.stack([p.mask for p in batch]).unsqueeze(1).to(inp.dtype)
    return inp, tgt, mask


# --- synthetic pairs ---------------------------------------------------------

def gaussian_blur(image: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur of ``(C, H, W)`` with reflect padding."""
    if sigma <= 0:
        return image
    radius = max(1, int(math.ceil(3 * sigma)))
    coords = torch.arange(-radius, radius + 1, dtype=image.dtype)
    k = torch.exp(-(coords**2) / (2 * sigma**2))
    k = k / k.sum()
    c = image.shape[0]
    x = image.unsqueeze(0)
    pad_h = min(radius, image.shape[-2] - 1)
    pad_w = min(radius, image.shape[-1] - 1)
    x = F.pad(x, (pad_w, pad_w, pad_h, pad_h), mode="reflect")
    x = F.pad(x, (radius - pad_w, radius - pad_w, radius - pad_h, radius - pad_h), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    x = F.conv2d(x, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return x[0]


def _texture(rng: np.random.Generator, h: int, w: int) -> torch.Tensor:
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base = rng.uniform(0.25, 0.75, size=3)
    img = np.zeros((3, h, w))
    for _ in range(6):
        fy, fx = rng.uniform(0.15, 0.6, size=2) * rng.choice([-1, 1], size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.03, 0.08, size=3)
        img += amp[:, None, None] * np.sin(fy * yy + fx * xx + phase)[None]
    img += 0.04 * rng.normal(size=(3, h, w))
    return torch.from_numpy(np.clip(base[:, None, None] + img, 0.0, 1.0))


def _variable_blur(image: torch.Tensor, sigma_map: torch.Tensor, sigma_max: float, levels: int = 5):
    """Blend a stack of blurs so each pixel sees roughly ``sigma_map`` blur."""
    sigmas = np.linspace(0.0, sigma_max, levels)
    stack = torch.stack([gaussian_blur(image, float(s)) for s in sigmas])
    pos = (sigma_map / sigma_max).clamp(0, 1) * (levels - 1)
    lo = pos.floor().clamp(max=levels - 2).long()
    frac = pos - lo
    lower = torch.gather(stack, 0, lo[None, None].expand(1, 3, *lo.shape))[0]
    upper = torch.gather(stack, 0, (lo + 1)[None, None].expand(1, 3, *lo.shape))[0]
    return lower * (1 - frac) + upper * frac


def synthesize_pair(dims: tuple[int, int], seed: int, id: str = "") -> SamplePair:
    h, w = dims
    rng = np.random.default_rng(seed)
    background = _texture(rng, h, w)
    foreground = _texture(rng, h, w)

    cy, cx = rng.uniform(0.35, 0.65) * h, rng.uniform(0.35, 0.65) * w
    ry, rx = rng.uniform(0.15, 0.3) * h, rng.uniform(0.15, 0.3) * w
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    alpha = torch.from_numpy((((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.float64))
    # smoothing only lowers values near the rim, so mask > 0.99 stays inside alpha
    mask = gaussian_blur(alpha[None], 1.0)[0].clamp(0, 1)

    inp = alpha * foreground + (1 - alpha) * background
    sigma_max = float(rng.uniform(2.0, 3.5))
    blurred = _variable_blur(inp, sigma_max * (1 - mask), sigma_max)
    target = alpha * inp + (1 - alpha) * blurred
    return SamplePair(inp.float(), target.float(), mask.float(), id or f"synth{seed}")


def synthesize_pairs(n: int, dims: tuple[int, int] = (64, 64), seed: int = 0, stride: int = 16) -> list[SamplePair]:
    h, w = dims
    if h % stride or w % stride:
        raise DataError(f"synthetic dims {h}x{w} must be multiples of {stride}")
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)
    return [synthesize_pair(dims, int(s), id=f"s{seed}_{i:04d}") for i, s in enumerate(seeds)]


def synthetic_pairset(n_train: int, n_val: int, dims=(64, 64), seed: int = 0, stride: int = 16) -> PairSet:
    train = synthesize_pairs(n_train, dims, seed, stride)
    val = synthesize_pairs(n_val, dims, seed + 1_000_003, stride)
    return PairSet({"train": train, "val": val}, crop_size=None, seed=seed)


def write_dataset(pairs_by_split: dict[str, list[SamplePair]], out_dir: str | Path) -> Path:
    """Write pairs as PNG files plus a ``manifest.csv`` and return its path."""
    out = Path(out_dir)
    for sub in ("input", "target", "depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for split, pairs in pairs_by_split.items():
        for p in pairs:
            write_rgb(p.input, out / "input" / f"{p.id}.png")
            write_rgb(p.target, out / "target" / f"{p.id}.png")
            save_depth(p.mask, out / "depth" / f"{p.id}.png")
            rows.append({"id": p.id, "input_path": f"input/{p.id}.png",
                         "target_path": f"target/{p.id}.png",
                         "depth_path": f"depth/{p.id}.png", "split": split})
    manifest = out / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return manifest
