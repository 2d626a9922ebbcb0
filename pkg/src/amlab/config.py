"""Run configuration: JSON loading, schema validation and defaults."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import jsonschema

from amlab.losses import LossConfig
from amlab.margin import LambdaSchedule
from amlab.trainer import MlpConfig, TrainConfig


class ConfigError(ValueError):
    pass


def schema():
    text = resources.files("amlab").joinpath("schema/run_config.schema.json").read_text()
    return json.loads(text)


DATASET_DEFAULTS = {
    "synthetic": {"class_count": 10, "dim": 32, "samples_per_class": 200, "spread": 0.25, "eval_per_class": 100},
    "idx": {"scaling": "unit", "eval_per_class": 100},
}
MLP_DEFAULTS = {"hidden": [64, 64], "embed_dim": 3}
LOSS_DEFAULTS = {
    "variant": "am_softmax",
    "s": 30.0,
    "m_mult": 4,
    "lambda_base": 1000.0,
    "lambda_min": 5.0,
    "lambda_gamma": 0.12,
    "lambda_power": 1.0,
}
TRAIN_DEFAULTS = {
    "lr_base": 0.1,
    "lr_decay_iters": [800, 1200, 1400],
    "lr_decay_factor": 0.1,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "batch_size": 64,
    "total_iters": 1500,
}
PROTOCOL_DEFAULTS = {
    "pair_count": 2000,
    "far_targets": [0.01, 0.001],
    "gallery_per_class": 1,
    "probe_per_class": 5,
    "distractor_classes": 0,
    "dir_far": 0.01,
}


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "amlab-run"
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic", **DATASET_DEFAULTS["synthetic"]})
    mlp: dict = field(default_factory=lambda: dict(MLP_DEFAULTS))
    loss: dict = field(default_factory=lambda: dict(LOSS_DEFAULTS))
    train: dict = field(default_factory=lambda: dict(TRAIN_DEFAULTS))
    protocol: dict = field(default_factory=lambda: dict(PROTOCOL_DEFAULTS))

    def mlp_config(self, input_dim):
        return MlpConfig((input_dim, *self.mlp["hidden"], self.mlp["embed_dim"]))

    def loss_config(self):
        d = self.loss
        return LossConfig(
            variant=d["variant"],
            s=d["s"],
            m_add=d.get("m_add"),
            m_mult=d["m_mult"],
            lambda_schedule=LambdaSchedule(d["lambda_base"], d["lambda_min"], d["lambda_gamma"], d["lambda_power"]),
            feature_norm=d.get("feature_norm"),
            weight_norm=d.get("weight_norm"),
        )

    def train_config(self):
        return TrainConfig(seed=self.seed, **{k: (tuple(v) if isinstance(v, list) else v) for k, v in self.train.items()})


def parse_config(doc):
    """Validate a config document and fill in defaults."""
    try:
        jsonschema.validate(doc, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    cfg = RunConfig()
    if "seed" in doc:
        cfg.seed = doc["seed"]
    if "output_dir" in doc:
        cfg.output_dir = doc["output_dir"]
    if "dataset" in doc:
        kind = doc["dataset"]["kind"]
        cfg.dataset = {"kind": kind, **DATASET_DEFAULTS[kind], **doc["dataset"]}
    cfg.mlp.update(doc.get("mlp", {}))
    cfg.loss.update(doc.get("loss", {}))
    cfg.train.update(doc.get("train", {}))
    cfg.protocol.update(doc.get("protocol", {}))
    try:
        cfg.loss_config()
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_config(doc)
