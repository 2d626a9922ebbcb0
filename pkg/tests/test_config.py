import json

import numpy as np
import pytest

from amlab.cli import build_dataset, main
from amlab.config import ConfigError, RunConfig, load_config, parse_config
from amlab.data import write_idx
from amlab.losses import Variant


def test_empty_document_gives_defaults():
    cfg = parse_config({})
    assert cfg == RunConfig()
    assert cfg.loss_config().variant is Variant.AM_SOFTMAX
    assert cfg.train_config().lr_decay_iters == (800, 1200, 1400)
    assert cfg.mlp_config(32).layer_widths == (32, 64, 64, 3)


def test_partial_sections_merge_with_defaults():
    cfg = parse_config({"loss": {"variant": "a_softmax", "m_mult": 2}, "dataset": {"kind": "synthetic", "dim": 5}})
    lc = cfg.loss_config()
    assert lc.variant is Variant.A_SOFTMAX and lc.m_mult == 2 and lc.lambda_schedule.lambda_base == 1000
    assert cfg.dataset["dim"] == 5 and cfg.dataset["class_count"] == 10


@pytest.mark.parametrize(
    "doc,needle",
    [
        ({"dataset": {"kind": "idx"}}, "train_images"),
        ({"dataset": {"kind": "idx", "train_images": "a", "train_labels": "b", "spread": 1}}, "spread"),
        ({"loss": {"variant": "cosface"}}, "cosface"),
        ({"loss": {"variant": "normface", "m_add": 0.3}}, "normface"),
        ({"train": {"total_iters": 10}}, "lr_decay_iters"),
        ({"seed": -1}, "seed"),
    ],
)
def test_invalid_documents(doc, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(doc)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("[1,")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_idx_dataset_from_config(tmp_path):
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(3), 6)
    write_idx(rng.integers(0, 256, (18, 4)), labels, tmp_path / "i", tmp_path / "l", 2, 2)
    cfg = parse_config(
        {"dataset": {"kind": "idx", "train_images": str(tmp_path / "i"), "train_labels": str(tmp_path / "l"), "eval_per_class": 2}}
    )
    train, held = build_dataset(cfg)
    assert len(train) == 12 and len(held) == 6 and train.inputs.shape[1] == 4


def test_missing_idx_file_exit_1(tmp_path):
    doc = {"dataset": {"kind": "idx", "train_images": str(tmp_path / "x"), "train_labels": str(tmp_path / "y")}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    assert main(["train", "--config", str(path), "--out", str(tmp_path)]) == 1
