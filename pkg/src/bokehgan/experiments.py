"""Scripted sweeps over ablation arms (generator width, bokeh-loss toggle)."""

from __future__ import annotations

import csv
import dataclasses
from pathlib import Path
from typing import Sequence

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .data import synthetic_pairset
from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig, parameter_count
from .train import TrainConfig, arm_label, run_training

SWEEP_FIELDS = ("width", "parameters", "arm", "val_psnr", "val_ssim", "identity_psnr", "checkpoint")


def width_sweep(
    out_dir: str | Path,
    widths: Sequence[int] = (4, 8, 12),
    config: TrainConfig | None = None,
    n_train: int = 4,
    n_val: int = 2,
    size: int = 64,
    disc_config: DiscriminatorConfig | None = None,
) -> list[dict]:
    """Train one run per width on a shared synthetic set; write ``sweep.csv``.

    Every arm sees the same pairs and the same seed, so only the width varies.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = config or TrainConfig(epochs=(1, 1))
    stride = GeneratorConfig().stride
    source = synthetic_pairset(n_train, n_val, (size, size), config.seed, stride)
    rows = []
    for width in widths:
        gen_cfg = dataclasses.replace(GeneratorConfig(), width=width)
        result = run_training(config, source, out / f"width{width}", gen_cfg, disc_config)
        last = result.validation[-1] if result.validation else {}
        rows.append({
            "width": width,
            "parameters": parameter_count(result.state.generator),
            "arm": arm_label(config, gen_cfg),
            "val_psnr": last.get("val_psnr", float("nan")),
            "val_ssim": last.get("val_ssim", float("nan")),
            "identity_psnr": last.get("identity_psnr", float("nan")),
            "checkpoint": str(result.final_checkpoint),
        })
    with (out / "sweep.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    plot_sweep(rows, out / "sweep.png")
    return rows


def plot_sweep(rows: Sequence[dict], path: str | Path) -> Path:
    fig = Figure(figsize=(5, 3.5))
    FigureCanvasAgg(fig)
    ax = fig.subplots()
    params = [r["parameters"] / 1e6 for r in rows]
    ax.plot(params, [r["val_psnr"] for r in rows], "o-", label="model")
    ax.plot(params, [r["identity_psnr"] for r in rows], "--", color="gray", label="output = input")
    for p, r in zip(params, rows):
        ax.annotate(f"w{r['width']}", (p, r["val_psnr"]), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("generator parameters (M)")
    ax.set_ylabel("validation PSNR (dB)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    return Path(path)
