"""Metrics files and figures written next to them.

Figures are drawn on an Agg canvas directly, so nothing here touches the
global pyplot state or needs a display.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

EVAL_FIELDS = ("id", "psnr", "ssim")
STAGE_COLORS = {"pretrain": "tab:blue", "refine": "tab:orange"}


def read_metrics(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=110)
    return path


def plot_training(metrics_path: str | Path, out_path: str | Path | None = None) -> Path:
    """Loss curves per stage and validation PSNR against the identity baseline."""
    records = read_metrics(metrics_path)
    steps = [r for r in records if r.get("kind") == "step"]
    vals = [r for r in records if r.get("kind") == "val"]
    run = next((r for r in records if r.get("kind") == "run"), {})

    fig = Figure(figsize=(10, 4))
    ax_loss, ax_val = fig.subplots(1, 2)
    for stage, color in STAGE_COLORS.items():
        rows = [r for r in steps if r["stage"] == stage]
        if rows:
            ax_loss.plot([r["step"] for r in rows], [r["total"] for r in rows], color=color,
                         lw=0.8, label=f"{stage} total")
        if stage == "refine" and any("gp" in r for r in rows):
            ax_gp = ax_loss.twinx()
            ax_gp.plot([r["step"] for r in rows], [r["gp"] for r in rows], color="tab:red",
                       lw=0.6, alpha=0.6, label="gradient penalty")
            ax_gp.set_ylabel("gradient penalty")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("weighted loss")
    ax_loss.legend(loc="upper right", fontsize=8)

    if vals:
        x = [r["step"] for r in vals]
        ax_val.plot(x, [r["val_psnr"] for r in vals], "o-", ms=3, label="model")
        ax_val.plot(x, [r["identity_psnr"] for r in vals], "--", color="gray", label="output = input")
        ax_val.legend(fontsize=8)
    ax_val.set_xlabel("step")
    ax_val.set_ylabel("validation PSNR (dB)")
    fig.suptitle(run.get("arm_label", "training run"))
    fig.tight_layout()
    out = out_path or Path(metrics_path).with_name("training_curves.png")
    return _save(fig, out)


def write_eval_csv(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EVAL_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({"id": r["id"], "psnr": repr(float(r["psnr"])), "ssim": repr(float(r["ssim"]))})
    return path


def read_eval_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{"id": r["id"], "psnr": float(r["psnr"]), "ssim": float(r["ssim"])}
                for r in csv.DictReader(fh)]


def summarize(rows: Iterable[dict]) -> dict[str, float]:
    rows = list(rows)
    return {
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
        "n": len(rows),
    }


def _hwc(img: torch.Tensor) -> np.ndarray:
    return img.detach().cpu().float().clamp(0, 1).permute(1, 2, 0).numpy()


def plot_samples(samples: Sequence[dict], out_path: str | Path, limit: int = 4) -> Path:
    """Grid of input / mask / prediction / target for the first ``limit`` samples.

    Each sample is a dict with ``id``, ``input``, ``mask``, ``prediction``,
    ``target`` and ``psnr``.
    """
    samples = list(samples)[:limit]
    cols = ("input", "mask", "prediction", "target")
    fig = Figure(figsize=(2.2 * len(cols), 2.2 * max(len(samples), 1)))
    axes = np.atleast_2d(fig.subplots(max(len(samples), 1), len(cols), squeeze=False))
    for row, s in zip(axes, samples):
        for ax, col in zip(row, cols):
            if col == "mask":
                ax.imshow(s["mask"].detach().cpu().numpy(), cmap="gray", vmin=0, vmax=1)
            else:
                ax.imshow(_hwc(s[col]))
            ax.set_xticks([])
            ax.set_yticks([])
        psnr = s["psnr"]
        row[2].set_xlabel("inf dB" if math.isinf(psnr) else f"{psnr:.2f} dB", fontsize=8)
        row[0].set_ylabel(s["id"], fontsize=8)
    for ax, col in zip(axes[0], cols):
        ax.set_title(col, fontsize=9)
    fig.tight_layout()
    return _save(fig, out_path)
