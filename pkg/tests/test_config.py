import pytest

from crossvit_sca.config import PRESETS, format_config, parse_config, parse_config_text
from crossvit_sca.model import DESK_CONFIG, ConfigError
from crossvit_sca.train import TrainConfig


def test_empty_file_gives_published_defaults(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("")
    model, train = parse_config(path)
    assert (model.image_size, model.s_patch, model.dim_s, model.dim_l) == (256, 16, 256, 256)
    assert (model.depth, model.cls_depth, model.heads, model.mlp_dim) == (6, 2, 12, 512)
    assert (model.dropout_p, model.emb_dropout_p, model.layer_drop_p) == (0.15, 0.15, 0.05)
    assert train.learning_rate == 0.001 and train.epochs == 50


def test_heads_must_divide_dim():
    with pytest.raises(ConfigError, match="dim divisible by heads"):
        parse_config_text("dim = 256\nheads = 5\n")


def test_desk_preset_and_overrides():
    model, train = parse_config_text("preset = desk  # small\n\nkeep_ratio = 0.25\ntrain_seed = 3\nseed=2\n")
    assert model == DESK_CONFIG.__class__(**{**DESK_CONFIG.to_dict(), "keep_ratio": 0.25, "seed": 2})
    assert train.seed == 3 and train.epochs == PRESETS["desk"][1].epochs


@pytest.mark.parametrize("text, message", [
    ("colour = red", "unknown key"),
    ("depth = two", "cannot parse"),
    ("just words", "expected 'key = value'"),
    ("preset = huge", "unknown preset"),
    ("learning_rate = 0", "learning_rate > 0"),
])
def test_bad_lines(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_config_text(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.txt")


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_format_round_trips(preset):
    model, train = PRESETS[preset]
    assert parse_config_text(format_config(model, train)) == (model, train)


def test_round_trip_with_paths():
    model, train = parse_config_text("preset = desk\ncheckpoint_path = out/c.bin\noptimizer = sgd\n")
    assert train.checkpoint_path == "out/c.bin" and train.log_path is None
    assert parse_config_text(format_config(model, train)) == (model, train)
    assert isinstance(train, TrainConfig)
