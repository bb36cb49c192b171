import pytest
import yaml

from augment import InstrumentId
from pipeline_config import ConfigError, default_config_dict, default_config_yaml, load_config


def write_yaml(path, doc):
    path.write_text(yaml.safe_dump(doc), encoding="utf-8")
    return path


def test_defaults_are_desk_scale():
    cfg = load_config()
    assert cfg.num_tracks == 50
    assert cfg.ensembles == ("string", "brass", "woodwind", "random")
    assert cfg.sample_rate == 16000 and cfg.frame_rate == 250.0
    assert cfg.tempo.min_bpm == 50 and cfg.tempo.max_bpm == 150
    assert cfg.microtiming.bound == pytest.approx(0.05)
    assert cfg.target_lufs == -13.0 and cfg.ceiling_db == -1.0
    assert cfg.alpha is None
    assert cfg.render.num_harmonics == cfg.synth.num_harmonics


def test_default_yaml_round_trips(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(default_config_yaml(), encoding="utf-8")
    cfg = load_config(path)
    assert cfg.to_dict() == default_config_dict()


def test_file_values_and_overrides(tmp_path):
    path = write_yaml(tmp_path / "run.yaml", {
        "generation": {"num_tracks": 3, "seed": 9},
        "pitch_correction": {"alpha": 1.0},
        "instruments": {"tuba": [30, 60]},
    })
    cfg = load_config(path, {"generation": {"seed": 11, "workers": 4}})
    assert cfg.num_tracks == 3
    assert cfg.seed == 11
    assert cfg.workers == 4
    assert cfg.alpha == 1.0
    assert cfg.playable_ranges[InstrumentId.TUBA] == (30, 60)
    assert cfg.playable_ranges[InstrumentId.VIOLIN] == (55, 100)


@pytest.mark.parametrize("doc", [
    {"generation": {"tracks": 3}},
    {"mystery": {}},
    {"render": {"vibrato_rate": 5.0}},
])
def test_unknown_keys_rejected(tmp_path, doc):
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(write_yaml(tmp_path / "bad.yaml", doc))


@pytest.mark.parametrize("doc", [
    {"generation": {"ensembles": ["jazz"]}},
    {"generation": {"num_tracks": 0}},
    {"pitch_correction": {"alpha": 1.5}},
    {"tempo": {"min_bpm": 200}},
    {"microtiming": {"sigma": 0}},
    {"audio": {"frame_rate": 300}},
    {"splits": {"train": 0.9}},
    {"mixdown": {"peak_mode": "rms"}},
    {"instruments": {"banjo": [40, 80]}},
    {"ranges": {"parts": {"soprano": [81, 60]}}},
    {"note_model": {"kind": "external", "scores_dir": "/nonexistent/scores"}},
])
def test_invalid_values_rejected(tmp_path, doc):
    with pytest.raises(ConfigError):
        load_config(write_yaml(tmp_path / "bad.yaml", doc))


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "broken.yaml"
    bad.write_text("generation: [unclosed", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(bad)
    scalar = tmp_path / "scalar.yaml"
    scalar.write_text("42", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(scalar)


def test_gibbs_config_uses_section():
    cfg = load_config(overrides={"gibbs": {"num_steps": 10, "final_mask_fraction": 0.5}})
    gibbs = cfg.gibbs(3)
    assert gibbs.num_steps == 10 and gibbs.seed == 3
    assert gibbs.mask_fraction(9) == pytest.approx(0.5)
