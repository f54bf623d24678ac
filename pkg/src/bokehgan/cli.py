"""``blg`` command line: train, infer, eval, depth, synth.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.  Every verb takes ``--seed`` and ``--threads`` (default 1) so a
run is bitwise reproducible on one machine.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from contextlib import contextmanager
from pathlib import Path

import torch
from filelock import FileLock, Timeout

from . import __version__
from .checkpoint import CheckpointError
from .config import DEFAULT_OUTPUT, DEFAULTS, OUTPUT_ENV, ConfigError, RunConfig, describe, load_config
from .data import DataError, load_manifest, read_rgb, synthetic_pairset, write_dataset, write_rgb
from .depth import KINDS, NORMALIZATIONS, DepthError, DepthSource, load_depth, provide_depth, save_depth
from .discriminator import DiscriminatorConfigError
from .generator import GeneratorConfig, GeneratorConfigError, render
from .imaging import psnr, ssim
from .losses import LossConfigError
from .report import plot_samples, plot_training, summarize, write_eval_csv
from .train import NumericalError, load_generator, run_training

log = logging.getLogger("bokehgan")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
LOCK_NAME = ".blg.lock"
PREDICTORS = ("model", "target", "input")


class UsageError(ValueError):
    """Flag combination that cannot run; reported as a configuration error."""


def _exit_code(exc: BaseException) -> int | None:
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, UsageError, LossConfigError, GeneratorConfigError,
                        DiscriminatorConfigError, Timeout)):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, DepthError, CheckpointError, FileNotFoundError, OSError)):
        return EXIT_DATA
    return None


@contextmanager
def output_lock(directory: Path):
    """One command per output directory; a second concurrent one fails fast."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(directory / LOCK_NAME), timeout=0)
    try:
        lock.acquire()
    except Timeout as exc:
        raise ConfigError(f"output directory {directory} is in use by another blg process") from exc
    try:
        yield
    finally:
        lock.release()


# --- argument parsing --------------------------------------------------------

def _key_opt(p, flag: str, key: str, **kw):
    """Option overriding config ``key``; help shows the config default."""
    p.add_argument(flag, default=None, help=f"{kw.pop('help')} {describe(key)}", **kw)


def _common(p):
    p.add_argument("--seed", type=int, default=None,
                   help=f"random seed for every stochastic choice {describe('train.seed')}")
    p.add_argument("--threads", type=int, default=1,
                   help="torch intra-op threads; 1 keeps results bitwise reproducible (default: 1)")


def _epochs(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected two counts, PRETRAIN,REFINE")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _assignment(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError("expected KEY=VALUE")
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blg", description="Edge-aware bokeh rendering toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="two-stage training run",
                       description="Pretrain with the bokeh losses, then refine adversarially.")
    p.add_argument("--config", default=None, help="TOML file of dotted keys (default: none)")
    _key_opt(p, "--out", "output.dir", help=f"output directory; empty uses ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT}")
    _key_opt(p, "--manifest", "data.manifest", help="dataset manifest CSV; empty uses synthetic pairs")
    _key_opt(p, "--synthetic", "data.synthetic", type=int, help="number of synthetic training pairs")
    _key_opt(p, "--synthetic-val", "data.synthetic_val", type=int, help="number of synthetic validation pairs")
    _key_opt(p, "--size", "data.size", type=int, help="side of synthetic images")
    _key_opt(p, "--crop-size", "data.crop_size", type=int, help="training crop side for manifest data, 0 for whole images")
    p.add_argument("--epochs", type=_epochs, default=None,
                   help=f"PRETRAIN,REFINE epoch counts (default: "
                        f"{DEFAULTS['train.epochs_pretrain']},{DEFAULTS['train.epochs_refine']})")
    _key_opt(p, "--batch-size", "train.batch_size", type=int, help="pairs per step")
    _key_opt(p, "--lr", "train.lr", type=float, help="Adam learning rate for generator and critic")
    _key_opt(p, "--width", "generator.width", type=int, help="generator base width")
    p.add_argument("--no-bokeh-loss", action="store_true",
                   help="drop the edge and blur terms from pretraining (default: off)")
    _key_opt(p, "--depth-kind", "depth.kind", choices=KINDS, help="blur-cue source for records without a depth file")
    _key_opt(p, "--depth-command", "depth.command", help="external depth tool, run as CMD IMAGE OUTPUT")
    _key_opt(p, "--checkpoint-every", "train.checkpoint_every", type=int, help="checkpoint cadence in steps")
    p.add_argument("--set", type=_assignment, action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, repeatable (default: none)")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="render one image", description="Render a bokeh image from a checkpoint.")
    p.add_argument("--checkpoint", required=True, help="checkpoint archive (required)")
    p.add_argument("--input", required=True, help="RGB input image (required)")
    p.add_argument("--output", required=True, help="path of the rendered image (required)")
    p.add_argument("--depth", default=None, help="precomputed depth/disparity map (default: none)")
    p.add_argument("--config", default=None,
                   help="TOML config; its generator keys must match the checkpoint (default: none)")
    _key_opt(p, "--depth-kind", "depth.kind", choices=KINDS, help="blur-cue source when --depth is absent")
    _key_opt(p, "--depth-command", "depth.command", help="external depth tool, run as CMD IMAGE OUTPUT")
    _key_opt(p, "--depth-normalization", "depth.normalization", choices=NORMALIZATIONS,
             help="depth map normalization")
    p.add_argument("--invert-depth", action="store_true",
                   help="treat the map as depth (far = large) and flip it (default: off)")
    _common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM over a split",
                       description="Score predictions on a split and write a per-sample CSV.")
    p.add_argument("--checkpoint", default=None, help="checkpoint archive, needed for --predictor model (default: none)")
    p.add_argument("--predictor", choices=PREDICTORS, default="model",
                   help="what to score: the model, the targets themselves, or the inputs (default: model)")
    _key_opt(p, "--manifest", "data.manifest", help="dataset manifest CSV; empty uses synthetic pairs")
    p.add_argument("--synthetic", type=int, default=None,
                   help=f"evaluate N synthetic pairs when no manifest is given "
                        f"(default: {DEFAULTS['data.synthetic_val']})")
    _key_opt(p, "--size", "data.size", type=int, help="side of synthetic images")
    p.add_argument("--split", default="val", help="split to score (default: val)")
    _key_opt(p, "--out", "output.dir", help=f"directory for the CSV and sample figure; empty uses ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT}")
    p.add_argument("--config", default=None, help="TOML config (default: none)")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("depth", help="produce a blur-cue map", description="Write a 16-bit blur-cue map for an image.")
    p.add_argument("--image", required=True, help="RGB image whose size the map takes (required)")
    p.add_argument("--output", required=True, help="16-bit PNG to write (required)")
    p.add_argument("--kind", choices=KINDS, default="synthetic_gradient",
                   help="depth source (default: synthetic_gradient)")
    p.add_argument("--source", default=None,
                   help="existing map to resize and normalize, for --kind precomputed_file (default: none)")
    p.add_argument("--command", default="", help="external depth tool, run as CMD IMAGE OUTPUT (default: none)")
    p.add_argument("--normalization", choices=NORMALIZATIONS, default="minmax",
                   help="normalization of loaded maps (default: minmax)")
    p.add_argument("--invert", action="store_true", help="flip a depth map to disparity (default: off)")
    _common(p)
    p.set_defaults(func=cmd_depth)

    p = sub.add_parser("synth", help="write a synthetic dataset", description="Write synthetic pairs and a manifest.")
    _key_opt(p, "--out", "output.dir", help=f"dataset directory; empty uses ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT}")
    _key_opt(p, "--n-train", "data.synthetic", type=int, help="training pairs")
    _key_opt(p, "--n-val", "data.synthetic_val", type=int, help="validation pairs")
    _key_opt(p, "--size", "data.size", type=int, help="image side, a multiple of 16")
    _common(p)
    p.set_defaults(func=cmd_synth)
    return parser


# --- verbs -------------------------------------------------------------------

def _overrides(args, mapping: dict[str, str]) -> dict:
    out = {key: getattr(args, attr) for attr, key in mapping.items() if getattr(args, attr, None) is not None}
    if getattr(args, "seed", None) is not None:
        out["train.seed"] = args.seed
    return out


def _data_source(cfg: RunConfig, stride: int):
    seed = cfg["train.seed"]
    if cfg["data.manifest"]:
        return load_manifest(cfg["data.manifest"], cfg["data.crop_size"] or None, seed, cfg.depth_source())
    size = cfg["data.size"]
    # synthetic pairs are generated at training size and never cropped
    return synthetic_pairset(cfg["data.synthetic"], cfg["data.synthetic_val"], (size, size), seed, stride)


def cmd_train(args) -> int:
    overrides = _overrides(args, {
        "out": "output.dir", "manifest": "data.manifest", "synthetic": "data.synthetic",
        "synthetic_val": "data.synthetic_val", "size": "data.size", "crop_size": "data.crop_size",
        "batch_size": "train.batch_size", "lr": "train.lr", "width": "generator.width",
        "depth_kind": "depth.kind", "depth_command": "depth.command",
        "checkpoint_every": "train.checkpoint_every",
    })
    if args.epochs is not None:
        overrides["train.epochs_pretrain"], overrides["train.epochs_refine"] = args.epochs
    if args.no_bokeh_loss:
        overrides["train.bokeh_loss"] = False
    for key, value in args.set:
        overrides[key] = value
    cfg = load_config(args.config, overrides)
    out = cfg.output_dir()
    cfg = cfg.merged({"output.dir": str(out)})

    with output_lock(out):
        cfg.write(out / "effective_config.toml")
        gen_cfg = cfg.generator_config()
        source = _data_source(cfg, gen_cfg.stride)
        result = run_training(
            cfg.train_config(), source, out, gen_cfg, cfg.discriminator_config(),
            cfg["data.train_split"], cfg["data.val_split"],
        )
        plot_training(result.metrics_path)
    final = result.validation[-1] if result.validation else {}
    print(f"final checkpoint: {result.final_checkpoint}")
    if final:
        print(f"val PSNR {final['val_psnr']:.3f} dB (identity {final['identity_psnr']:.3f} dB), "
              f"SSIM {final['val_ssim']:.4f}")
    return EXIT_OK


def _expected_generator(config_path) -> GeneratorConfig | None:
    return load_config(config_path).generator_config() if config_path else None


def cmd_infer(args) -> int:
    cfg = load_config(args.config, _overrides(args, {
        "depth_kind": "depth.kind", "depth_command": "depth.command",
        "depth_normalization": "depth.normalization",
    }))
    generator = load_generator(args.checkpoint, _expected_generator(args.config))
    image = read_rgb(args.input)
    dims = tuple(image.shape[-2:])
    source = cfg.depth_source()
    invert = args.invert_depth or source.invert
    if args.depth:
        cue = load_depth(args.depth, dims, source.normalization, invert)
    else:
        if source.kind == "precomputed_file":
            raise DepthError("no --depth file given; pass one or choose another --depth-kind")
        cue = provide_depth(DepthSource(source.kind, source.normalization, source.command, invert),
                            args.input, dims, seed=cfg["train.seed"])
    out = Path(args.output)
    with output_lock(out.parent if str(out.parent) else Path(".")):
        write_rgb(render(generator, image, cue), out)
    print(f"wrote {out} ({dims[1]}x{dims[0]})")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, _overrides(args, {
        "manifest": "data.manifest", "size": "data.size", "out": "output.dir",
    }))
    if args.synthetic is not None:
        key = "data.synthetic_val" if args.split == cfg["data.val_split"] else "data.synthetic"
        cfg = cfg.merged({key: args.synthetic}, "command line")
    generator = None
    if args.predictor == "model":
        if not args.checkpoint:
            raise UsageError("--predictor model needs --checkpoint")
        generator = load_generator(args.checkpoint, _expected_generator(args.config))
    stride = generator.config.stride if generator is not None else GeneratorConfig().stride
    source = _data_source(cfg, stride)
    ids = source.split_ids(args.split)
    if not ids:
        raise DataError(f"split {args.split!r} is empty")

    rows, samples = [], []
    for id in ids:
        pair = source.load_pair(id)
        if args.predictor == "model":
            pred = render(generator, pair.input, pair.mask)
        else:
            pred = pair.target if args.predictor == "target" else pair.input
        row = {"id": id, "psnr": psnr(pred, pair.target), "ssim": float(ssim(pred, pair.target))}
        rows.append(row)
        samples.append({**row, "input": pair.input, "mask": pair.mask, "prediction": pred, "target": pair.target})

    out = cfg.output_dir()
    with output_lock(out):
        csv_path = write_eval_csv(rows, out / f"eval_{args.split}.csv")
        plot_samples(samples, out / f"eval_{args.split}_samples.png")
    s = summarize(rows)
    psnr_text = "inf" if math.isinf(s["psnr"]) else f"{s['psnr']:.4f}"
    print(f"split {args.split}: n={s['n']} PSNR {psnr_text} dB SSIM {s['ssim']:.6f}")
    print(f"per-sample report: {csv_path}")
    return EXIT_OK


def cmd_depth(args) -> int:
    image = read_rgb(args.image)
    dims = tuple(image.shape[-2:])
    seed = args.seed if args.seed is not None else DEFAULTS["train.seed"]
    source = DepthSource(args.kind, args.normalization, args.command, args.invert)
    plane = provide_depth(source, args.image, dims, depth_path=args.source, seed=seed)
    out = Path(args.output)
    with output_lock(out.parent if str(out.parent) else Path(".")):
        save_depth(plane, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config(None, _overrides(args, {
        "out": "output.dir", "n_train": "data.synthetic", "n_val": "data.synthetic_val", "size": "data.size",
    }))
    size = cfg["data.size"]
    source = synthetic_pairset(cfg["data.synthetic"], cfg["data.synthetic_val"], (size, size),
                               cfg["train.seed"], GeneratorConfig().stride)
    out = cfg.output_dir()
    with output_lock(out):
        manifest = write_dataset(source.pairs, out)
    print(f"wrote {manifest}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        message = " ".join(str(exc).split())
        print(f"blg {args.verb}: error: {message}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
