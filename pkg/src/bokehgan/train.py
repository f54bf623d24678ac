"""Two-stage training: bokeh-loss pretraining, then adversarial refinement.

Stage one fits the generator to the pretraining composite.  Stage two
reloads the stage-one checkpoint, resets the generator's Adam moments,
and alternates one critic update with one generator update per step.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import CheckpointError, load_archive, prefixed, save_archive
from .data import collate, sample_batch, steps_per_epoch
from .discriminator import (
    DiscriminatorConfig,
    DualCritic,
    build_critic,
    critic_loss,
    generator_adversarial_loss,
)
from .generator import Generator, GeneratorConfig, assemble_input, build_generator, render
from .imaging import psnr, ssim
from .losses import FeatureExtractor, LossReport, LossWeights, composite_loss, non_finite_terms

log = logging.getLogger(__name__)

ARMS = {
    "bokeh_loss": "GAN/Bokeh Loss during pretraining",
    "no_bokeh_loss": "GAN/No Bokeh Loss",
}


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: tuple[int, int] = (60, 60)
    batch_size: int = 2
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    pretrain_weights: LossWeights = field(default_factory=LossWeights.pretrain)
    refine_weights: LossWeights = field(default_factory=LossWeights.refine)
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 keeps only the end-of-stage checkpoints
    history: int = 100

    def __post_init__(self):
        object.__setattr__(self, "epochs", tuple(int(e) for e in self.epochs))
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if len(self.epochs) != 2 or min(self.epochs) < 0:
            raise ValueError(f"epochs must be two nonnegative counts, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def arm(self) -> str:
        w = self.pretrain_weights
        return "no_bokeh_loss" if w.edgediff == w.backblur == w.foreedge == 0 else "bokeh_loss"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["epochs"] = list(self.epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["pretrain_weights"] = LossWeights(**d["pretrain_weights"])
        d["refine_weights"] = LossWeights(**d["refine_weights"])
        return cls(**d)


def arm_label(config: TrainConfig, gen_config: GeneratorConfig) -> str:
    return f"NAFNet{gen_config.width} ({ARMS[config.arm]})"


@dataclass
class TrainState:
    generator: Generator
    opt_g: torch.optim.Adam
    config: TrainConfig
    gen_config: GeneratorConfig
    disc_config: DiscriminatorConfig
    stage: str = "pretrain"
    step: int = 0
    epoch: int = 0
    rng: torch.Generator = field(default_factory=torch.Generator)
    history: deque = field(default_factory=deque)
    critic: DualCritic | None = None
    opt_d: torch.optim.Adam | None = None
    features: FeatureExtractor | None = None


def _adam(params, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=config.lr, betas=(config.beta1, config.beta2))


def init_state(
    config: TrainConfig,
    gen_config: GeneratorConfig | None = None,
    disc_config: DiscriminatorConfig | None = None,
) -> TrainState:
    gen_config = gen_config or GeneratorConfig()
    generator = build_generator(gen_config, config.seed)
    return TrainState(
        generator=generator,
        opt_g=_adam(generator.parameters(), config),
        config=config,
        gen_config=gen_config,
        disc_config=disc_config or DiscriminatorConfig(),
        rng=torch.Generator().manual_seed(config.seed),
        history=deque(maxlen=config.history),
    )


def start_refine(state: TrainState) -> TrainState:
    """Switch to stage two: fresh critic, fresh generator moments."""
    cfg = state.config
    state.stage = "refine"
    state.epoch = 0
    state.critic = build_critic(state.disc_config, cfg.seed + 1)
    state.opt_d = _adam(state.critic.parameters(), cfg)
    state.opt_g = _adam(state.generator.parameters(), cfg)
    state.features = FeatureExtractor(seed=cfg.seed)
    state.rng = torch.Generator().manual_seed(cfg.seed + 2)
    state.history.clear()
    return state


def _ensure_finite(report: LossReport, where: str) -> None:
    bad = non_finite_terms(report) + [k for k, v in report.extras.items() if not math.isfinite(v)]
    if bad or not math.isfinite(report.total):
        raise NumericalError(f"{where}: non-finite loss term(s) {', '.join(bad) or 'total'}")


def _ensure_finite_params(module: torch.nn.Module, where: str) -> None:
    for name, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericalError(f"{where}: parameter {name} became non-finite")


def pretrain_step(state: TrainState, batch) -> tuple[TrainState, LossReport]:
    if state.stage != "pretrain":
        raise RuntimeError(f"pretrain_step called in stage {state.stage!r}")
    inp, tgt, mask = collate(batch)
    out = state.generator(assemble_input(inp, mask))
    report = composite_loss("pretrain", inp, out, tgt, mask, state.config.pretrain_weights)
    _ensure_finite(report, f"pretrain step {state.step}")

    state.opt_g.zero_grad(set_to_none=True)
    report.tensor.backward()
    state.opt_g.step()
    _ensure_finite_params(state.generator, f"pretrain step {state.step}")

    state.step += 1
    state.history.append(report.total)
    return state, report


def refine_step(state: TrainState, batch) -> tuple[TrainState, LossReport]:
    if state.stage != "refine" or state.critic is None:
        raise RuntimeError("refine_step needs a state prepared by start_refine")
    inp, tgt, mask = collate(batch)
    out = state.generator(assemble_input(inp, mask))

    critic = state.critic
    critic.requires_grad_(True)
    d_loss, gp, _ = critic_loss(critic, out, tgt, state.rng, state.disc_config.gp_lambda)
    d_val, gp_val = float(d_loss.detach()), float(gp.detach())
    if not (math.isfinite(d_val) and math.isfinite(gp_val)):
        raise NumericalError(f"refine step {state.step}: non-finite critic loss or gradient penalty")
    state.opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    state.opt_d.step()
    _ensure_finite_params(critic, f"refine step {state.step}")

    critic.requires_grad_(False)
    adv, _ = generator_adversarial_loss(critic, out)
    report = composite_loss(
        "refine", inp, out, tgt, mask, state.config.refine_weights,
        adv_term=adv, features=state.features,
    )
    report.extras.update(d_loss=d_val, gp=gp_val)
    _ensure_finite(report, f"refine step {state.step}")
    state.opt_g.zero_grad(set_to_none=True)
    report.tensor.backward()
    state.opt_g.step()
    _ensure_finite_params(state.generator, f"refine step {state.step}")

    state.step += 1
    state.history.append(report.total)
    return state, report


# --- checkpoints -------------------------------------------------------------

def _optimizer_arrays(opt: torch.optim.Optimizer, prefix: str):
    sd = opt.state_dict()
    arrays = {}
    for pid, entry in sd["state"].items():
        for key, value in entry.items():
            arrays[f"{prefix}/{pid}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    return arrays, sd["param_groups"]


def _restore_optimizer(opt: torch.optim.Optimizer, arrays, groups) -> None:
    state: dict[int, dict] = {}
    for key, value in arrays.items():
        pid, name = key.split("/", 1)
        state.setdefault(int(pid), {})[name] = torch.from_numpy(value.copy())
    opt.load_state_dict({"state": state, "param_groups": groups})


def _module_arrays(module: torch.nn.Module, prefix: str):
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def save_state(state: TrainState, path: str | Path) -> Path:
    arrays = _module_arrays(state.generator, "generator")
    opt_arrays, g_groups = _optimizer_arrays(state.opt_g, "opt_g")
    arrays.update(opt_arrays)
    header = {
        "generator_config": state.gen_config.to_dict(),
        "discriminator_config": state.disc_config.to_dict(),
        "train_config": state.config.to_dict(),
        "seed": state.config.seed,
        "stage": state.stage,
        "step": state.step,
        "epoch": state.epoch,
        "history": list(state.history),
        "opt_g_groups": g_groups,
    }
    arrays["rng"] = state.rng.get_state().numpy()
    if state.critic is not None:
        arrays.update(_module_arrays(state.critic, "critic"))
        d_arrays, d_groups = _optimizer_arrays(state.opt_d, "opt_d")
        arrays.update(d_arrays)
        header["opt_d_groups"] = d_groups
    return save_archive(path, arrays, header)


def _load_module(module: torch.nn.Module, arrays: dict, path) -> None:
    sd = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
    try:
        module.load_state_dict(sd, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: weights do not match the recorded config: {exc}") from exc


def _check_expected(header: dict, expected: GeneratorConfig | None, path) -> GeneratorConfig:
    recorded = GeneratorConfig(**header["generator_config"])
    if expected is not None and recorded != expected:
        raise CheckpointError(
            f"{path}: checkpoint generator config {recorded.to_dict()} != expected {expected.to_dict()}"
        )
    return recorded


def load_generator(path: str | Path, expected: GeneratorConfig | None = None) -> Generator:
    arrays, header = load_archive(path)
    cfg = _check_expected(header, expected, path)
    generator = Generator(cfg)
    _load_module(generator, prefixed(arrays, "generator"), path)
    generator.eval()
    return generator


def load_state(path: str | Path, expected: GeneratorConfig | None = None) -> TrainState:
    arrays, header = load_archive(path)
    gen_cfg = _check_expected(header, expected, path)
    config = TrainConfig.from_dict(header["train_config"])
    disc_cfg = DiscriminatorConfig(**header["discriminator_config"])
    state = init_state(config, gen_cfg, disc_cfg)
    _load_module(state.generator, prefixed(arrays, "generator"), path)
    if header["stage"] == "refine":
        start_refine(state)
        _load_module(state.critic, prefixed(arrays, "critic"), path)
        _restore_optimizer(state.opt_d, prefixed(arrays, "opt_d"), header["opt_d_groups"])
    _restore_optimizer(state.opt_g, prefixed(arrays, "opt_g"), header["opt_g_groups"])
    state.stage = header["stage"]
    state.step = header["step"]
    state.epoch = header["epoch"]
    state.history.extend(header["history"])
    state.rng.set_state(torch.from_numpy(arrays["rng"].copy()))
    return state


# --- evaluation and the full run ---------------------------------------------

@torch.no_grad()
def evaluate(generator: Generator, pairs) -> dict[str, float]:
    """Mean PSNR/SSIM of clamped outputs, plus the output = input baseline."""
    was_training = generator.training
    generator.eval()
    out_psnr, out_ssim, base_psnr = [], [], []
    for p in pairs:
        pred = render(generator, p.input, p.mask)
        out_psnr.append(psnr(pred, p.target))
        out_ssim.append(float(ssim(pred, p.target)))
        base_psnr.append(psnr(p.input, p.target))
    generator.train(was_training)
    return {
        "val_psnr": float(np.mean(out_psnr)),
        "val_ssim": float(np.mean(out_ssim)),
        "identity_psnr": float(np.mean(base_psnr)),
    }


@dataclass
class TrainResult:
    final_checkpoint: Path
    metrics_path: Path
    checkpoints: list[Path]
    state: TrainState
    validation: list[dict]


class MetricsLog:
    """Append-only JSON-lines log of step and validation records."""

    def __init__(self, path: Path, fresh: bool = True):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if fresh:
            self.path.write_text("")

    def write(self, record: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _step_record(state: TrainState, report: LossReport) -> dict:
    return {"kind": "step", "stage": state.stage, "step": state.step, "epoch": state.epoch,
            **report.terms, **report.extras, "total": report.total}


def run_training(
    config: TrainConfig,
    source,
    out_dir: str | Path,
    gen_config: GeneratorConfig | None = None,
    disc_config: DiscriminatorConfig | None = None,
    train_split: str = "train",
    val_split: str = "val",
    on_step: Callable[[TrainState, LossReport], None] | None = None,
) -> TrainResult:
    """Run stage one then stage two, logging metrics and writing checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = MetricsLog(out / "metrics.jsonl")
    gen_config = gen_config or GeneratorConfig()
    val_pairs = [source.load_pair(i) for i in source.split_ids(val_split)]
    per_epoch = steps_per_epoch(source, train_split, config.batch_size)
    checkpoints: list[Path] = []
    validation: list[dict] = []

    state = init_state(config, gen_config, disc_config)
    label = arm_label(config, gen_config)
    log.info("training arm %s", label)
    metrics.write({"kind": "run", "arm": config.arm, "arm_label": label,
                   "generator_config": gen_config.to_dict(), "train_config": config.to_dict()})

    def validate():
        if not val_pairs:
            return
        rec = {"kind": "val", "stage": state.stage, "step": state.step, "epoch": state.epoch,
               **evaluate(state.generator, val_pairs)}
        validation.append(rec)
        metrics.write(rec)
        log.info("%s epoch %d: val PSNR %.3f dB, SSIM %.4f", state.stage, state.epoch,
                 rec["val_psnr"], rec["val_ssim"])

    def run_stage(epochs: int, step_fn):
        nonlocal state
        validate()
        for _ in range(epochs):
            for _ in range(per_epoch):
                batch = sample_batch(source, train_split, config.batch_size, state.step)
                state, report = step_fn(state, batch)
                metrics.write(_step_record(state, report))
                if on_step is not None:
                    on_step(state, report)
                if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                    checkpoints.append(save_state(state, out / f"ckpt_{state.step:07d}.npz"))
            state.epoch += 1
            validate()
        final = save_state(state, out / f"{state.stage}_final.npz")
        checkpoints.append(final)
        return final

    pretrain_ckpt = run_stage(config.epochs[0], pretrain_step)
    state = start_refine(load_state(pretrain_ckpt))
    final = run_stage(config.epochs[1], refine_step)
    return TrainResult(final, metrics.path, checkpoints, state, validation)
