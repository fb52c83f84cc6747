from dataclasses import replace

import pytest

import core.runconfig as runconfig
from core.errors import ValidationError
from core.multitask import LossWeights, Strategy
from core.network import ArchitectureConfig
from core.runconfig import (
    TrainConfig,
    emit_train_config,
    load_train_config,
    parse_train_config,
    with_seed_override,
)


def test_emit_then_parse_is_lossless():
    cfg = replace(
        TrainConfig(),
        strategy=Strategy.SEQUENTIAL_MTL,
        lr_max=0.0123456789,
        loss_weights=LossWeights(0.3, 1.7),
        architecture=ArchitectureConfig(widths=(8, 16), pool=(2, 1), sequential_detach=True),
    )

    text = emit_train_config(cfg)

    assert parse_train_config(text) == cfg
    assert emit_train_config(parse_train_config(text)) == text


def test_emitted_sections_are_in_fixed_order():
    text = emit_train_config(TrainConfig())
    headers = [line for line in text.splitlines() if line.startswith("[")]
    assert headers == ["[train]", "[loss_weights]", "[fusion]", "[augment]", "[architecture]", "[mel]", "[synth]"]


def test_partial_file_keeps_defaults():
    cfg = parse_train_config(
        """
        [train]
        epochs = 5
        gradnorm_enabled = true

        [architecture]
        widths = [4, 8]
        """
    )
    assert cfg.epochs == 5
    assert cfg.gradnorm_enabled
    assert cfg.architecture.widths == (4, 8)
    assert cfg.batch_size == 24
    assert cfg.strategy is Strategy.EXTENDED_MTL


def test_ratio_preset():
    cfg = parse_train_config('[loss_weights]\nratio = "1:3"\n')
    assert cfg.loss_weights == LossWeights(1.0, 3.0)


@pytest.mark.parametrize(
    "text",
    [
        "[train]\nepochz = 3\n",
        "[optimizer]\nlr = 0.1\n",
        "[mel]\nn_mels = 64\nhop = 10\n",
        '[loss_weights]\nratio = "1:9"\n',
        '[loss_weights]\nratio = "1:2"\nw3 = 1.0\n',
        '[train]\nepochs = "ten"\n',
        "[train]\nlr_max = true\n",
        '[train]\nstrategy = "joint"\n',
        "[train]\nlr_min = 0.1\nlr_max = 0.01\n",
        "[train\n",
    ],
)
def test_invalid_files_are_rejected(text):
    with pytest.raises(ValidationError):
        parse_train_config(text)


def test_integer_is_accepted_for_float_keys():
    assert parse_train_config("[train]\nlr_max = 1\n").lr_max == 1.0


def test_default_path_means_builtin_defaults(tmp_path):
    assert load_train_config("default") == TrainConfig()
    path = tmp_path / "run.toml"
    path.write_text("[train]\nseed = 9\n")
    assert load_train_config(path).seed == 9


def test_seed_override(monkeypatch):
    monkeypatch.setattr(runconfig.settings, "seed_override", 7)
    assert with_seed_override(TrainConfig()).seed == 7

    monkeypatch.setattr(runconfig.settings, "seed_override", None)
    cfg = TrainConfig(seed=3)
    assert with_seed_override(cfg) is cfg
