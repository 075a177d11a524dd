import pytest

from semibev.config import ConfigError, TrainConfig, build_config, dump_config, load_config, read_config_file
from semibev.geometry import BorderMode


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.eval_every, cfg.ema_decay) == (40, 8, 5, 0.999)
    assert cfg.augment.alpha_max == 35.0 and cfg.augment.border is BorderMode.REPLICATE
    assert not cfg.unlabeled_includes_labeled


def test_three_way_precedence(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("trainer.epochs = 7\ntrainer.seed = 3  # comment\naugment.border = zero\n")
    cfg = load_config(f, {"trainer.epochs": "9"})
    assert cfg.epochs == 9  # flag beats file
    assert cfg.seed == 3  # file beats default
    assert cfg.batch_size == 8  # default
    assert cfg.augment.border is BorderMode.ZERO


def test_unknown_key_names_the_key(tmp_path):
    with pytest.raises(ConfigError, match="trainer.epoch'"):
        build_config(None, {"trainer.epoch": "3"})
    with pytest.raises(ConfigError, match="nosection"):
        build_config(None, {"nosection.x": "1"})
    with pytest.raises(ConfigError):
        build_config(None, {"model.grid": "1"})


@pytest.mark.parametrize("key,value", [("trainer.epochs", "many"), ("trainer.batch_size", "7"),
                                       ("trainer.ema_warmup", "maybe"), ("augment.border", "wrap"),
                                       ("trainer.threshold", "1.0"), ("augment.apply_prob", "2")])
def test_bad_values(key, value):
    with pytest.raises(ConfigError):
        build_config(None, {key: value})


def test_malformed_file(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("trainer.epochs 7\n")
    with pytest.raises(ConfigError, match=":1:"):
        read_config_file(f)
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "missing.cfg")


def test_dump_roundtrip(tmp_path):
    cfg = build_config(None, {"trainer.lambda1": "0", "model.dec_channels": "8,8", "augment.border": "reflect",
                              "trainer.lr_initial": "0.003"})
    f = tmp_path / "d.cfg"
    f.write_text(dump_config(cfg))
    assert load_config(f) == cfg


def test_every_field_is_addressable():
    text = dump_config(TrainConfig())
    from dataclasses import fields
    for fld in fields(TrainConfig):
        if fld.name not in ("augment", "model"):
            assert f"trainer.{fld.name} = " in text
