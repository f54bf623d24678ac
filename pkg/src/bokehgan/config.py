"""Run configuration: flat dotted keys, TOML files, flag overrides.

Every key has a default, so an empty file (or no file) is the full
reference configuration.  Unknown keys and ill-typed values are reported
together in a single :class:`ConfigError`.
"""

from __future__ import annotations

import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import DEFAULT_CROP
from .depth import DepthSource
from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig
from .losses import LossWeights
from .train import TrainConfig

OUTPUT_ENV = "BLG_OUTPUT_DIR"
DEFAULT_OUTPUT = "runs"
LOSS_TERMS = tuple(LossWeights().as_dict())


class ConfigError(ValueError):
    pass


def _defaults() -> dict[str, Any]:
    d: dict[str, Any] = {
        "train.epochs_pretrain": 60,
        "train.epochs_refine": 60,
        "train.batch_size": 2,
        "train.lr": 1e-4,
        "train.beta1": 0.0,
        "train.beta2": 0.9,
        "train.seed": 0,
        "train.checkpoint_every": 0,
        "train.bokeh_loss": True,
    }
    for stage, preset in (("pretrain", LossWeights.pretrain()), ("refine", LossWeights.refine())):
        for term, value in preset.as_dict().items():
            d[f"loss.{stage}.{term}"] = float(value)
    gen, disc = GeneratorConfig(), DiscriminatorConfig()
    d.update({
        "generator.width": gen.width,
        "generator.enc_blocks": list(gen.enc_blocks),
        "generator.mid_blocks": gen.mid_blocks,
        "generator.dec_blocks": list(gen.dec_blocks),
        "discriminator.depths": list(disc.depths),
        "discriminator.base_channels": disc.base_channels,
        "discriminator.gp_lambda": disc.gp_lambda,
        # an empty manifest means synthetic pairs
        "data.manifest": "",
        "data.synthetic": 16,
        "data.synthetic_val": 8,
        "data.size": 64,
        "data.crop_size": DEFAULT_CROP,  # 0 disables cropping
        "data.train_split": "train",
        "data.val_split": "val",
        "depth.kind": "precomputed_file",
        "depth.normalization": "minmax",
        "depth.command": "",
        "depth.invert": False,
        "output.dir": "",
    })
    return d


DEFAULTS = _defaults()

def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise TypeError("expected a boolean")
    if isinstance(default, int):
        if isinstance(value, str):
            value = int(value)
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError("expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            value = float(value)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError("expected a number")
        if not math.isfinite(value):
            raise TypeError("expected a finite number")
        return float(value)
    if isinstance(default, list):
        if isinstance(value, str):
            value = [int(v) for v in value.replace("[", "").replace("]", "").split(",") if v.strip()]
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise TypeError("expected a list of integers")
        return list(value)
    if not isinstance(value, str):
        raise TypeError("expected a string")
    return value


def flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


@dataclass
class RunConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @classmethod
    def default(cls) -> "RunConfig":
        return cls(dict(DEFAULTS))

    def merged(self, overrides: dict[str, Any], source: str = "overrides") -> "RunConfig":
        """New config with ``overrides`` applied; every bad key is reported at once."""
        problems = []
        values = dict(self.values)
        for key, raw in overrides.items():
            if key not in DEFAULTS:
                problems.append(f"unknown key {key!r}")
                continue
            try:
                values[key] = _coerce(key, raw)
            except (TypeError, ValueError) as exc:
                problems.append(f"{key}: {exc} (got {raw!r})")
        if problems:
            raise ConfigError(f"{source}: " + "; ".join(problems))
        cfg = RunConfig(values)
        cfg.validate(source)
        return cfg

    def validate(self, source: str = "config") -> None:
        try:
            self.train_config()
            self.generator_config()
            self.discriminator_config()
            self.depth_source()
        except ValueError as exc:
            raise ConfigError(f"{source}: {exc}") from exc

    # --- typed views ---------------------------------------------------------

    def weights(self, stage: str) -> LossWeights:
        return LossWeights(**{t: self.values[f"loss.{stage}.{t}"] for t in LOSS_TERMS})

    def train_config(self) -> TrainConfig:
        v = self.values
        pretrain = self.weights("pretrain")
        if not v["train.bokeh_loss"]:
            pretrain = pretrain.without_bokeh()
        return TrainConfig(
            epochs=(v["train.epochs_pretrain"], v["train.epochs_refine"]),
            batch_size=v["train.batch_size"],
            lr=v["train.lr"],
            beta1=v["train.beta1"],
            beta2=v["train.beta2"],
            pretrain_weights=pretrain,
            refine_weights=self.weights("refine"),
            seed=v["train.seed"],
            checkpoint_every=v["train.checkpoint_every"],
        )

    def generator_config(self) -> GeneratorConfig:
        v = self.values
        return GeneratorConfig(
            width=v["generator.width"],
            enc_blocks=tuple(v["generator.enc_blocks"]),
            mid_blocks=v["generator.mid_blocks"],
            dec_blocks=tuple(v["generator.dec_blocks"]),
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        v = self.values
        return DiscriminatorConfig(
            depths=tuple(v["discriminator.depths"]),
            base_channels=v["discriminator.base_channels"],
            gp_lambda=v["discriminator.gp_lambda"],
        )

    def depth_source(self) -> DepthSource:
        v = self.values
        return DepthSource(v["depth.kind"], v["depth.normalization"], v["depth.command"], v["depth.invert"])

    def output_dir(self) -> Path:
        return Path(self.values["output.dir"] or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)

    # --- serialization -------------------------------------------------------

    def to_toml(self) -> str:
        lines = ["# effective configuration; every key is materialized"]
        for key in sorted(self.values):
            lines.append(f"{key} = {_toml_value(self.values[key])}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_toml())
        return path


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return '"' + str(value).replace("\\", "\\\\").replace('"', '\\"') + '"'


def read_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return flatten(tomllib.load(fh))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file, then ``overrides`` (flags win)."""
    cfg = RunConfig.default()
    if path is not None:
        cfg = cfg.merged(read_config_file(path), str(path))
    if overrides:
        cfg = cfg.merged(overrides, "command line")
    return cfg


def describe(key: str) -> str:
    """Help-text suffix naming the default of ``key``."""
    return f"(default: {_toml_value(DEFAULTS[key])})"

