import pytest
import yaml

from chorale_stems import EXIT_CONFIG, EXIT_FAILED, EXIT_OK, main


def small_yaml(tmp_path, **generation):
    doc = {"generation": {"num_tracks": 1, "ensembles": ["brass"], **generation}, "gibbs": {"num_steps": 48}}
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(doc), encoding="utf-8")
    return path


def test_print_default_config(capsys):
    assert main(["--print-default-config"]) == EXIT_OK
    doc = yaml.safe_load(capsys.readouterr().out)
    assert doc["generation"]["num_tracks"] == 50
    assert doc["mixdown"]["target_lufs"] == -13.0


def test_no_command_prints_help(capsys):
    assert main([]) == EXIT_CONFIG
    assert "generate" in capsys.readouterr().out


def test_bad_config_exits_with_config_code(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("generation:\n  speed: 3\n", encoding="utf-8")
    assert main(["generate", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_CONFIG
    assert not (tmp_path / "out").exists()


def test_unknown_ensemble_flag(tmp_path):
    with pytest.raises(SystemExit) as excinfo:
        main(["generate", "--ensembles", "brass,jazz"])
    assert excinfo.value.code == 2


def test_generate_validate_stats(tmp_path, capsys):
    out = tmp_path / "corpus"
    config = small_yaml(tmp_path)
    assert main(["-q", "generate", "--config", str(config), "--out", str(out), "--seed", "4",
                 "--no-progress"]) == EXIT_OK
    assert "Written: 1" in capsys.readouterr().out

    assert main(["-q", "validate", str(out)]) == EXIT_OK
    assert "Violations: 0" in capsys.readouterr().out

    assert main(["-q", "stats", str(out), "--bin-width", "0.05"]) == EXIT_OK
    assert (out / "stats" / "note_deviation_histogram.csv").is_file()


def test_validate_reports_violations(tmp_path):
    out = tmp_path / "corpus"
    assert main(["-q", "generate", "--config", str(small_yaml(tmp_path)), "--out", str(out),
                 "--no-progress"]) == EXIT_OK
    next(out.rglob("mix.wav")).unlink()
    assert main(["-q", "validate", str(out)]) == EXIT_FAILED


def test_bad_bin_width(tmp_path):
    assert main(["-q", "stats", str(tmp_path), "--bin-width", "0"]) == EXIT_CONFIG
