"""Config parsing, serialization, and builder behaviour."""
from fractions import Fraction

import pytest

from priorseg.config import ExperimentConfig, parse_config, save_config, serialize_config
from priorseg.dataio import AugmentationParams


def test_defaults_survive_serialize_parse_round_trip():
    cfg = ExperimentConfig()
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text


def test_parse_overrides_typed_values():
    cfg = parse_config(
        "[dataset]\n"
        "fraction = 1/4\n"
        "val_count = 12\n"
        "[model]\n"
        "pretrained = true\n"
        "eval_size = 320\n"
        "[trainer]\n"
        "init_lr = 0.01\n"
        "scale_max = 1.5\n"
    )
    assert cfg.dataset.fraction == "1/4"
    assert cfg.fraction() == Fraction(1, 4)
    assert cfg.dataset.val_count == 12
    assert cfg.model.pretrained is True
    assert cfg.model.eval_size == 320
    assert cfg.trainer.init_lr == 0.01
    assert cfg.trainer.scale_max == 1.5
    # untouched keys keep their defaults
    assert cfg.prior.gp_weight == 10.0
    assert cfg.trainer.momentum == 0.9


def test_bool_parsing_accepts_common_spellings():
    for raw, expected in [("1", True), ("yes", True), ("on", True),
                          ("0", False), ("no", False), ("off", False)]:
        cfg = parse_config(f"[model]\npretrained = {raw}\n")
        assert cfg.model.pretrained is expected


def test_unknown_section_is_rejected():
    with pytest.raises(ValueError, match=r"unknown config section \[optimizer\]"):
        parse_config("[optimizer]\nlr = 0.1\n")


def test_unknown_key_is_rejected():
    with pytest.raises(ValueError, match=r"unknown key 'learning_rate' in section \[trainer\]"):
        parse_config("[trainer]\nlearning_rate = 0.1\n")


def test_bad_value_error_names_section_and_key():
    with pytest.raises(ValueError, match=r"\[trainer\] epochs: cannot parse 'many'"):
        parse_config("[trainer]\nepochs = many\n")
    with pytest.raises(ValueError, match=r"\[model\] pretrained: cannot parse 'maybe'"):
        parse_config("[model]\npretrained = maybe\n")


def test_malformed_ini_text_is_rejected():
    with pytest.raises(ValueError, match="malformed config"):
        parse_config("[trainer\nepochs = 3\n")


def test_parse_from_file_and_missing_file(tmp_path):
    cfg = ExperimentConfig()
    cfg.trainer.epochs = 7
    path = save_config(cfg, tmp_path / "exp.ini")
    assert parse_config(path) == cfg
    assert parse_config(str(path)) == cfg
    with pytest.raises(FileNotFoundError):
        parse_config(tmp_path / "nope.ini")


def test_aug_params_builder_collects_trainer_keys():
    cfg = parse_config(
        "[trainer]\nresize_to = 96\ncrop_to = 64\nrotation = 10.0\nscale_min = 0.9\nscale_max = 1.1\n"
    )
    assert cfg.aug_params() == AugmentationParams(
        resize_to=96, crop_to=64, rotation=10.0, scale_range=(0.9, 1.1)
    )


def test_model_builders_produce_requested_shapes():
    cfg = parse_config(
        "[model]\ndepth = 18\nbase_width = 16\ndecoder_widths = 64,32,16,8,8\ndropout_rate = 0.25\n"
    )
    enc = cfg.encoder_spec()
    assert enc.depth == 18
    assert enc.base_width == 16
    assert cfg.decoder_spec().widths == (64, 32, 16, 8, 8)
    drop = cfg.dropout_config()
    assert drop.drop_rate == 0.25
    assert drop.granularity == "channel"


def test_prior_and_trainer_builders_forward_values():
    cfg = parse_config(
        "[prior]\nlatent_dim = 32\nbatch_size = 8\nepochs = 3\ncritic_steps = 2\n"
        "[trainer]\nepochs = 5\nlabeled_batch = 4\nlambda_prior = 0.2\ngamma = 0.5\n"
    )
    gan = cfg.gan_config()
    assert (gan.batch_size, gan.epochs, gan.critic_steps) == (8, 3, 2)
    assert cfg.generator_spec().latent_dim == 32
    opt = cfg.optim_config()
    assert (opt.epochs, opt.labeled_batch) == (5, 4)
    weights = cfg.loss_weights()
    assert (weights.lambda_prior, weights.gamma) == (0.2, 0.5)


def test_serialized_floats_parse_back_exactly():
    cfg = ExperimentConfig()
    cfg.trainer.weight_decay = 1e-5
    cfg.prior.learning_rate = 5e-5
    again = parse_config(serialize_config(cfg))
    assert again.trainer.weight_decay == 1e-5
    assert again.prior.learning_rate == 5e-5
