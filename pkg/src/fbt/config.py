"""Experiment configuration: flat key-value files with [section] headers.

Every known key has a documented default and is written out explicitly on
serialization, so a saved config is a complete record of a run. Unknown
sections or keys are hard errors; silent typos are worse than loud ones.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetHandle, SyntheticSpec, generate_synthetic, load_cifar_binary
from .engine import FusionPlanConfig, RunConfig, TrainConfig
from .losses import LossConfig
from .models import CNNConfig, MixerConfig, ModelConfig, MSAConfig


class ConfigError(ValueError):
    """Unknown key/section, malformed value, or inconsistent configuration."""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_int_tuple(raw: str) -> tuple:
    return tuple(int(part.strip()) for part in raw.split(","))


def _parse_float_tuple(raw: str) -> tuple:
    return tuple(float(part.strip()) for part in raw.split(","))


def _parse_cut(raw: str) -> int:
    # "fc" marks the head-only late cut.
    if raw.strip().lower() == "fc":
        return 5
    return int(raw)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _fmt_cut(value) -> str:
    return "fc" if value == 5 else str(value)


@dataclass(frozen=True)
class Key:
    parse: object
    default: object
    fmt: object = _fmt


_MODEL_KEYS = {
    "family": Key(str, "cnn"),
    "widths": Key(_parse_int_tuple, (16, 32, 64, 128)),
    "blocks_per_stage": Key(_parse_int_tuple, (2, 2, 2, 2)),
    "patch": Key(int, 4),
    "dim": Key(int, 64),
    "depth_per_stage": Key(int, 2),
    "heads": Key(int, 4),
    "mlp_ratio": Key(float, 2.0),
    "token_mlp_ratio": Key(float, 1.0),
    "channel_mlp_ratio": Key(float, 2.0),
}

SCHEMA: dict[str, dict[str, Key]] = {
    "teacher": {**_MODEL_KEYS, "checkpoint": Key(str, "teacher.ckpt")},
    "student": dict(_MODEL_KEYS),
    "fusion": {
        "k": Key(int, 3),
        "j": Key(_parse_cut, 4, _fmt_cut),
        "no_attn_block": Key(_parse_bool, False),
        "no_msa_stage": Key(_parse_bool, False),
        "path_grad_scale": Key(float, 1.0),
    },
    "loss": {
        "gamma": Key(float, 1.0),
        "kd_temperature": Key(float, 1.0),
        "tau_init": Key(float, 0.07),
        "embed_dim": Key(int, 128),
        "w_ts": Key(float, 1.0),
        "w_tf": Key(float, 1.0),
        "w_fs": Key(float, 1.0),
        "ce_weight": Key(float, 1.0),
        "ofa_weight": Key(float, 1.0),
        "infonce_weight": Key(float, 1.0),
        "detach_fused_teacher": Key(_parse_bool, True),
    },
    "train": {
        "optimizer": Key(str, "auto"),
        "lr": Key(float, 0.0),
        "momentum": Key(float, 0.9),
        "beta1": Key(float, 0.9),
        "beta2": Key(float, 0.999),
        "weight_decay": Key(float, 5e-4),
        "schedule": Key(str, "cosine"),
        "warmup_frac": Key(float, 0.05),
        "epochs": Key(int, 30),
        "batch_size": Key(int, 64),
        "seed": Key(int, 0),
        "eval_every": Key(int, 1),
        "augment": Key(_parse_bool, True),
        "record_wall_time": Key(_parse_bool, False),
    },
    "data": {
        "source": Key(str, "synthetic"),
        "train_path": Key(str, ""),
        "test_path": Key(str, ""),
        "num_classes": Key(int, 10),
        "image_size": Key(int, 32),
        "channels": Key(int, 3),
        "subset_train": Key(int, 0),
        "subset_test": Key(int, 0),
        "per_class_train": Key(int, 500),
        "per_class_test": Key(int, 100),
        "margin": Key(float, 2.0),
        "jitter": Key(int, 0),
        "texture": Key(float, 1.0),
        "pixel_noise": Key(float, 0.25),
        "modes": Key(int, 4),
        "seed": Key(int, 0),
    },
}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.values[section][key] = value

    # -- assembly into runtime objects -------------------------------------

    def model_config(self, section: str) -> ModelConfig:
        m = self.values[section]
        d = self.values["data"]
        common = dict(in_channels=d["channels"], image_size=d["image_size"],
                      num_classes=d["num_classes"])
        family = m["family"]
        if family == "cnn":
            return CNNConfig(widths=m["widths"], blocks_per_stage=m["blocks_per_stage"], **common)
        if family == "msa":
            return MSAConfig(patch=m["patch"], dim=m["dim"], blocks_per_stage=m["depth_per_stage"],
                             heads=m["heads"], mlp_ratio=m["mlp_ratio"], **common)
        if family == "mixer":
            return MixerConfig(patch=m["patch"], dim=m["dim"], blocks_per_stage=m["depth_per_stage"],
                               token_mlp_ratio=m["token_mlp_ratio"],
                               channel_mlp_ratio=m["channel_mlp_ratio"], **common)
        raise ConfigError(f"unknown model family {family!r} in [{section}]")

    def loss_config(self) -> LossConfig:
        s = self.values["loss"]
        return LossConfig(
            gamma=s["gamma"], kd_temperature=s["kd_temperature"], tau_init=s["tau_init"],
            embed_dim=s["embed_dim"], pair_weights=(s["w_ts"], s["w_tf"], s["w_fs"]),
            ce_weight=s["ce_weight"], ofa_weight=s["ofa_weight"],
            infonce_weight=s["infonce_weight"], detach_fused_teacher=s["detach_fused_teacher"],
        ).validate()

    def train_config(self) -> TrainConfig:
        s = self.values["train"]
        return TrainConfig(**s)

    def fusion_config(self) -> FusionPlanConfig:
        s = self.values["fusion"]
        return FusionPlanConfig(k=s["k"], j=s["j"], no_attn_block=s["no_attn_block"],
                                no_msa_stage=s["no_msa_stage"],
                                path_grad_scale=s["path_grad_scale"])

    def run_config(self) -> RunConfig:
        return RunConfig(
            teacher=self.model_config("teacher"),
            student=self.model_config("student"),
            teacher_checkpoint=self.values["teacher"]["checkpoint"],
            fusion=self.fusion_config(),
            loss=self.loss_config(),
            train=self.train_config(),
        )

    def dataset(self) -> DatasetHandle:
        d = self.values["data"]
        if d["source"] == "cifar_binary":
            if not d["train_path"] or not d["test_path"]:
                raise ConfigError("cifar_binary source needs train_path and test_path")
            return load_cifar_binary(d["train_path"], d["test_path"],
                                     num_classes=d["num_classes"],
                                     subset_train=d["subset_train"],
                                     subset_test=d["subset_test"], seed=d["seed"])
        if d["source"] == "synthetic":
            spec = SyntheticSpec(
                num_classes=d["num_classes"], per_class_train=d["per_class_train"],
                per_class_test=d["per_class_test"], channels=d["channels"],
                image_size=d["image_size"], margin=d["margin"], jitter=d["jitter"],
                texture=d["texture"], pixel_noise=d["pixel_noise"], modes=d["modes"],
            )
            return generate_synthetic(spec, seed=d["seed"])
        raise ConfigError(f"unknown data source {d['source']!r}")


def default_config() -> ExperimentConfig:
    values = {section: {key: spec.default for key, spec in keys.items()}
              for section, keys in SCHEMA.items()}
    return ExperimentConfig(values=values)


def parse_config_text(text: str, origin: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as err:
        raise ConfigError(f"{origin}: {err}") from err
    cfg = default_config()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        for key, raw in parser.items(section):
            spec = SCHEMA[section].get(key)
            if spec is None:
                raise ConfigError(f"{origin}: unknown key {key!r} in [{section}]")
            try:
                cfg.values[section][key] = spec.parse(raw)
            except ConfigError:
                raise
            except (TypeError, ValueError) as err:
                raise ConfigError(f"{origin}: bad value for [{section}] {key}: {err}") from err
    return cfg


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), origin=str(path))


def serialize_config(cfg: ExperimentConfig) -> str:
    """Write every key explicitly so the file is a full provenance record."""
    out = io.StringIO()
    for section, keys in SCHEMA.items():
        out.write(f"[{section}]\n")
        for key, spec in keys.items():
            out.write(f"{key} = {spec.fmt(cfg.values[section][key])}\n")
        out.write("\n")
    return out.getvalue()


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(serialize_config(cfg))
