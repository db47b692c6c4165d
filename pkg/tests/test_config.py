import pytest

from occmae.config import KEYS, RunConfig, load_config, parse_config_text
from occmae.errors import ConfigError


def test_defaults():
    cfg = RunConfig().validate()
    assert cfg.train.epochs == 3
    assert cfg.mask.ratios == (0.9, 0.7, 0.5)
    assert cfg.mask.band_edges == (30.0, 50.0)
    assert cfg.loss.mode == "standard" and (cfg.loss.alpha, cfg.loss.gamma) == (0.25, 2.0)
    assert cfg.grid.dims == (64, 64, 16)
    assert (cfg.train.learning_rate, cfg.train.betas, cfg.train.eps) == (1e-3, (0.9, 0.999), 1e-8)


def test_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nepochs = 5\nseed = 4  # trailing\nratios = 0.8,0.6,0.4\n")
    cfg = load_config(path, {"epochs": "2"})
    assert cfg.train.epochs == 2
    assert cfg.seed == 4 and cfg.train.seed == 4
    assert cfg.mask.ratios == (0.8, 0.6, 0.4)


def test_dump_round_trip():
    cfg = RunConfig().with_values({"grid": "32x32x8", "loss_mode": "paper_literal", "alpha": "2",
                                   "gamma": "0.25", "ground_z": "none"})
    again = RunConfig().with_values(parse_config_text(cfg.dump()))
    assert again == cfg
    assert set(cfg.to_values()) == set(KEYS)


@pytest.mark.parametrize("values, key", [
    ({"epochs": "0"}, "epochs"),
    ({"grid": "60x64x16"}, "grid"),
    ({"ratios": "0.9,0.7"}, "ratios"),
    ({"learning_rate": "-1"}, "learning_rate"),
    ({"loss_mode": "weird"}, "loss_mode"),
    ({"threshold": "1.5"}, "threshold"),
    ({"batch_size": "0"}, "batch_size"),
])
def test_invalid_values(values, key):
    with pytest.raises(ConfigError):
        RunConfig().with_values(values).validate()


def test_unknown_key():
    with pytest.raises(ConfigError, match="unknown config key"):
        RunConfig().with_values({"epoch": "3"})


def test_malformed_line():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("seed = 1\nnonsense\n")


def test_band_edges_shared_with_scene():
    cfg = RunConfig().with_values({"band_edges": "20,40"})
    assert cfg.scene.band_edges == cfg.mask.band_edges == (20.0, 40.0)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")
