import pytest

from cqser.config import (ConfigError, PRESETS, collect_settings, load_config, parse_seeds,
                          preset_feature)


def test_presets():
    cqt = preset_feature("cqt-optimized")
    assert (cqt.kind, cqt.cqt.bins_per_octave, cqt.cqt.hop, cqt.dim) == ("CQT", 3, 64, 24)
    mfsc = preset_feature("mfsc-optimized")
    assert (mfsc.kind, mfsc.mel.n_filters, mfsc.mel.hop, mfsc.dim) == ("MFSC", 24, 64, 24)
    base = preset_feature("mfsc-baseline")
    assert (base.mel.n_filters, base.mel.hop) == (128, 160)
    for name in PRESETS:
        preset_feature(name)


def test_defaults():
    cfg = load_config(environ={})
    assert cfg.seeds == [1, 2, 3] and cfg.n_val == 2 and cfg.train.epochs == 50
    assert cfg.train.batch_size == 64 and cfg.train.lr == 1e-3 and cfg.train.dropout == 0.3
    assert cfg.augment.enabled


def test_precedence(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[run]\npreset = mfsc-optimized\nseeds = 4,5\n[feature]\nhop = 128\n[train]\nepochs = 7\n")
    cfg = load_config(p, environ={})
    assert cfg.feature.kind == "MFSC" and cfg.feature.hop == 128 and cfg.seeds == [4, 5]
    cfg = load_config(p, environ={"CQSER_TRAIN_EPOCHS": "9", "CQSER_FEATURE_HOP": "96"},
                      overrides=["feature.hop=32"])
    assert cfg.train.epochs == 9 and cfg.feature.hop == 32
    cfg = load_config(p, preset="cqt-optimized", environ={}, overrides=["run.preset=cqt-optimized"])
    assert cfg.feature.kind == "CQT" and cfg.feature.hop == 128


@pytest.mark.parametrize("bad", ["feature.colour=red", "nosuch.key=1", "feature.hop", "train.epochs=many",
                                 "feature.f_max=9000", "feature.kind=LPC", "train.lr=-1",
                                 "feature.sad_enabled=maybe", "run.preset=nope"])
def test_rejections(bad):
    with pytest.raises(ConfigError):
        load_config(overrides=[bad], environ={})


def test_unknown_section_in_file(tmp_path):
    p = tmp_path / "x.ini"
    p.write_text("[model]\nlayers = 4\n")
    with pytest.raises(ConfigError):
        load_config(p, environ={})


def test_env_unknown_key():
    with pytest.raises(ConfigError):
        collect_settings(environ={"CQSER_TRAIN_MOMENTUM": "0.5"})


def test_mel_collision_caught_early():
    with pytest.raises(ConfigError, match="too many"):
        load_config(overrides=["feature.kind=MFSC", "feature.n_filters=128", "feature.hop=160"],
                    environ={})


def test_parse_seeds():
    assert parse_seeds("1, 2,3") == [1, 2, 3]
    assert parse_seeds([4]) == [4]
    with pytest.raises(ConfigError):
        parse_seeds("")
