import pytest

from halluaudio.config import RunConfigError, cell_name, format_grid, load_config, parse_grid, to_dict


def test_defaults_are_the_reference_setup():
    cfg = load_config().validate()
    assert cfg.spectrogram.shape == (160, 128)
    assert cfg.backbone.embedding_dim == 256
    t = cfg.train
    assert (t.lr, t.weight_decay, t.step_size, t.epochs, t.momentum) == (0.01, 1e-4, 20, 60, 0.0)
    assert cfg.grid == ((5, 1), (5, 5), (10, 1), (10, 5))
    assert (cfg.repetitions, cfg.n_novel, cfg.split_band, cfg.distance) == (50, 15, 64, "euclidean")


def test_grid_parsing():
    assert parse_grid("5x1, 10X5") == ((5, 1), (10, 5))
    assert format_grid(((5, 1), (10, 5))) == "5x1,10x5"
    assert cell_name(10, 5) == "10way5shot"
    with pytest.raises(RunConfigError):
        parse_grid("5by1")
    with pytest.raises(RunConfigError):
        parse_grid("")


def test_ini_sections(tmp_path):
    ini = tmp_path / "k.ini"
    ini.write_text("[spectrogram]\nhop = 201\nclip_samples = 32000\n[train]\nstep_size = 30\n"
                   "[fewshot]\ndistance = squared\n[run]\nseed = 4\n")
    cfg = load_config(ini, seed=7).validate()
    assert cfg.spectrogram.hop == 201 and cfg.spectrogram.shape == (160, 128)
    assert cfg.train.step_size == 30
    assert cfg.squared
    assert cfg.seed == 7
    assert to_dict(cfg)["grid"] == "5x1,5x5,10x1,10x5"


@pytest.mark.parametrize("text", ["[fewshot]\nmask_mode = spectral\n", "[fewshot]\ndistance = cosine\n",
                                  "[train]\nlr = -1\n", "[spectrogram]\nf_max = 9000\n", "[train]\nepochs = many\n",
                                  "[fewshot]\nsplit_band = 128\n", "[backbone]\nchannels = 4 4\n"])
def test_invalid_config(tmp_path, text):
    ini = tmp_path / "bad.ini"
    ini.write_text(text)
    with pytest.raises(RunConfigError):
        load_config(ini).validate()


def test_data_root_env_override(monkeypatch, tmp_path):
    monkeypatch.setenv("HALLUAUDIO_DATA_ROOT", str(tmp_path))
    cfg = load_config(root="/elsewhere")
    assert cfg.meta_path == tmp_path / "meta/esc50.csv"
    with pytest.raises(RunConfigError, match="metadata"):
        cfg.validate(need_data=True)
