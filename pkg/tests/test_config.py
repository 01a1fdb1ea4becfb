import pytest

from seqsort.config import ConfigError, dump_config, load_config, parse_config, write_resolved
from seqsort.evaluator import PipelineConfig


def test_empty_config_is_defaults():
    assert parse_config("") == PipelineConfig()
    assert load_config(None) == PipelineConfig()


def test_dump_round_trips():
    cfg = parse_config("""
[scene]
kind_weights = linear:2, static:1
hue_drift = 0.01
[mining]
channel = drop
jitter = 3
[train]
decay_steps = 100, 200
augment = flip
[model]
share_pairs = yes
[data]
max_tuples = 123
""")
    assert cfg.scene.kind_weights == (2.0, 0.0, 0.0, 1.0)
    assert cfg.mining.channel == "drop" and cfg.train.decay_steps == (100, 200)
    assert cfg.model.share_pairs is True and cfg.max_tuples == 123
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config(dump_config(PipelineConfig())) == PipelineConfig()


def test_model_preset_then_overrides():
    cfg = parse_config("[model]\nfc6 = 64\npreset = small\n")
    assert (cfg.model.conv1, cfg.model.fc6) == (32, 64)


@pytest.mark.parametrize("text,where", [
    ("[scene]\nheight = tall\n", "scene.height"),
    ("[mining]\nbogus = 1\n", "mining.bogus"),
    ("[nothing]\na = 1\n", "nothing"),
    ("[data]\ntrain_clips = 0\n", "data.train_clips"),
    ("[scene]\nkind_weights = flying:1\n", "scene.kind_weights"),
    ("[scene]\nkind_weights = 1, 2\n", "scene.kind_weights"),
    ("[mining]\nchannel = purple\n", "mining"),
    ("[model]\npreset = enormous\n", "model.preset"),
    ("[train]\nshare_pairs = maybe\n", "train.share_pairs"),
    ("no section header\n", "malformed"),
])
def test_errors_name_the_key(text, where):
    with pytest.raises(ConfigError, match=where.replace(".", r"\.")):
        parse_config(text)


def test_infeasible_scene_is_a_config_error():
    with pytest.raises(ConfigError, match="infeasible"):
        parse_config("[scene]\nheight = 16\nwidth = 16\n")


def test_resolved_file(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[mining]\ntop_k = 2\n")
    cfg = load_config(p)
    out = write_resolved(cfg, tmp_path / "out")
    assert out.name == "config.resolved.ini"
    assert load_config(out) == cfg
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
