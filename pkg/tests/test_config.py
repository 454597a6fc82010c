import pytest

from dealkit.config import ConfigError, RunConfig, build_config, load_config, parse_config_text


def test_parse_text():
    vals = parse_config_text("# comment\nmu = 3.0\n\nepochs=5  # trailing\n")
    assert vals == {"mu": "3.0", "epochs": "5"}


@pytest.mark.parametrize("text", ["mu 3", "mu = 1\nmu = 2"])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_build_routes_keys_to_sections():
    cfg = build_config({"mu": "3.0", "epochs": "5", "image_size": "32", "n_train": "10", "align_h": ""})
    assert cfg.loss.mu == 3.0 and cfg.train.epochs == 5 and cfg.synth.image_size == 32
    assert cfg.paths.n_train == 10 and cfg.loss.align_h is None
    assert cfg.train_config().loss.mu == 3.0


def test_build_errors():
    with pytest.raises(ConfigError):
        build_config({"nonsense": "1"})
    with pytest.raises(ConfigError):
        build_config({"epochs": "many"})
    with pytest.raises(ConfigError):
        build_config({"epochs": "0"})


def test_text_roundtrip(tmp_path):
    cfg = build_config({"mu": "2.0", "w_edge": "0.05", "depth_noise_std": "0.02", "lr": "0.002"})
    (tmp_path / "run.cfg").write_text(cfg.to_text())
    back = load_config(tmp_path / "run.cfg")
    assert back == cfg
    assert RunConfig().to_text() == load_config(None).to_text()


def test_overrides_beat_file(tmp_path):
    (tmp_path / "a.cfg").write_text("mu = 2.0\nepochs = 4\n")
    cfg = load_config(tmp_path / "a.cfg", {"mu": 1.5, "epochs": None})
    assert cfg.loss.mu == 1.5 and cfg.train.epochs == 4


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/x.cfg")
