import pytest
from hypothesis import given, settings, strategies as st

from segchange import config as cfglib
from segchange.config import TrainConfig, desk_preset, parse, serialize, to_flat
from segchange.errors import ConfigError


def test_defaults_follow_training_recipe():
    cfg = TrainConfig()
    assert (cfg.lr_main, cfg.lr_backbone, cfg.weight_decay) == (1e-4, 1e-5, 1e-4)
    assert (cfg.epochs, cfg.batch_size, cfg.sched_step, cfg.sched_gamma) == (128, 16, 20, 0.1)
    assert cfg.decoder.threshold == 0.5


def test_roundtrip_defaults():
    cfg = TrainConfig()
    assert parse(serialize(cfg), env={}) == cfg


def test_roundtrip_preset():
    cfg = desk_preset(**{"bev.mode": "transformer", "text.template": "roofs, roads and trees"})
    assert parse(serialize(cfg), env={}) == cfg


def test_parse_dotted_keys_and_comments():
    cfg = parse("# comment\nlr_main = 0.001\nbackbone.channels = 4, 8, 12, 16\n\ntext.http.url = http://x/y\n", env={})
    assert cfg.lr_main == 0.001
    assert cfg.backbone.channels == (4, 8, 12, 16)
    assert cfg.text.http.url == "http://x/y"


@pytest.mark.parametrize("text", [
    "lr_mian = 0.1",
    "bev.attn = 3",
    "text.http = x",
    "no equals sign",
    "epochs = ten",
    "epochs = 1\nepochs = 2",
    "bev.mode = geometric",
    "text.mode = llm",
    "epochs = 0",
    "lr_main = -1",
    "decoder.threshold = 1.0",
    "text.mode = static\ntext.template = ",
])
def test_invalid_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse(text, env={})


def test_env_overrides_url():
    cfg = parse("text.http.url = http://a\n", env={"SEGCHANGE_TEXT_URL": "http://b"})
    assert cfg.text.http.url == "http://b"


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        cfglib.load_config(str(tmp_path / "nope.txt"))


@settings(max_examples=50)
@given(
    lr=st.floats(1e-8, 1.0),
    epochs=st.integers(1, 500),
    mode=st.sampled_from(["none", "transformer", "additive_exact", "additive_linear"]),
    text_mode=st.sampled_from(["none", "static", "dynamic"]),
    widths=st.tuples(*[st.integers(1, 256)] * 4),
    template=st.text(alphabet="abcdefgh ,.-", min_size=1, max_size=30).map(str.strip).filter(bool),
)
def test_roundtrip_property(lr, epochs, mode, text_mode, widths, template):
    cfg = cfglib.from_flat({
        "lr_main": lr, "epochs": epochs, "bev.mode": mode, "text.mode": text_mode,
        "backbone.channels": widths, "text.template": template,
    }).validate()
    again = parse(serialize(cfg), env={})
    assert again == cfg
    assert to_flat(again) == to_flat(cfg)
