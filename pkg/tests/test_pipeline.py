import hashlib
import json
import logging
from dataclasses import replace

import numpy as np
import pytest

from augment import MicrotimingConfig
from dataset_io import (append_manifest, find_track_dirs, read_manifest, read_metadata, validate_track,
                        write_synth_params_csv)
from expression import SynthesisParams
from pipeline import (TrackJob, deviation_histogram, nearest_pitch_deviation, plan_tracks, run_generate,
                      run_stats, run_validate, track_streams)


def corpus_digest(root):
    """Hash of every file under the split directories plus the manifest."""
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file() and "stats" not in p.parts):
        digest.update(path.relative_to(root).as_posix().encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def test_plan_covers_every_ensemble(make_config):
    cfg = make_config(num_tracks=3, ensembles=["string", "brass", "woodwind", "random"])
    jobs = plan_tracks(cfg)
    assert len(jobs) == 12
    assert jobs[0].track_id == "string_00000"
    assert jobs[-1].track_id == "random_00002"


def test_track_streams_depend_only_on_seed_and_position():
    a = track_streams(3, TrackJob("brass", 1, 4))
    b = track_streams(3, TrackJob("brass", 1, 4))
    c = track_streams(3, TrackJob("brass", 1, 5))
    assert a["score"].generate_state(2).tolist() == b["score"].generate_state(2).tolist()
    assert a["score"].generate_state(2).tolist() != c["score"].generate_state(2).tolist()
    assert a["score"].generate_state(2).tolist() != a["tempo"].generate_state(2).tolist()


def test_generate_validate_and_skip(make_config, tmp_path):
    root = tmp_path / "corpus"
    cfg = make_config(root, num_tracks=2, ensembles=["string", "brass"])
    summary = run_generate(cfg, progress=False)
    assert summary.ok
    assert summary.written == 4
    assert len(find_track_dirs(root)) == 4
    assert [e["track_id"] for e in read_manifest(root)] == ["string_00000", "string_00001",
                                                           "brass_00000", "brass_00001"]

    report = run_validate(root)
    assert report.ok
    assert report.manifest_total == report.track_total == 4

    before = corpus_digest(root)
    again = run_generate(cfg, progress=False)
    assert again.skipped == 4 and again.written == 0
    assert corpus_digest(root) == before


def test_same_config_same_corpus(make_config, tmp_path):
    first = make_config(tmp_path / "a", num_tracks=1, ensembles=["woodwind", "random"], seed=21)
    second = make_config(tmp_path / "b", num_tracks=1, ensembles=["woodwind", "random"], seed=21)
    run_generate(first, progress=False)
    run_generate(second, progress=False)
    assert corpus_digest(tmp_path / "a") == corpus_digest(tmp_path / "b")


def test_corrupted_wav_flags_one_track(make_config, tmp_path):
    root = tmp_path / "corpus"
    run_generate(make_config(root, num_tracks=2, ensembles=["brass"]), progress=False)
    victim = find_track_dirs(root)[0]
    next(victim.glob("stems_audio/*.wav")).write_bytes(b"\x00" * 64)
    report = run_validate(root)
    assert not report.ok
    assert [r.track_id for r in report.reports if not r.ok] == [victim.name]


def test_manifest_mismatch_is_reported(make_config, tmp_path):
    root = tmp_path / "corpus"
    run_generate(make_config(root, num_tracks=1, ensembles=["brass"]), progress=False)
    (root / "manifest.jsonl").write_text("", encoding="utf-8")
    report = run_validate(root)
    assert not report.ok
    assert report.manifest_total == 0 and report.track_total == 1


def test_metadata_records_generation_details(make_config, tmp_path):
    root = tmp_path / "corpus"
    run_generate(make_config(root, num_tracks=1, ensembles=["random"]), progress=False)
    meta = read_metadata(find_track_dirs(root)[0])
    assert 50 <= meta["tempo_bpm"] <= 150
    assert 1 <= meta["rejection_attempts"] <= 100
    assert len(meta["stems"]) == 4
    assert all(isinstance(s["register_shift"], int) and s["register_shift"] % 12 == 0 for s in meta["stems"])
    assert meta["mastering"]["target_lufs"] == -13.0


def test_histogram_is_normalized():
    values = np.random.default_rng(0).uniform(-0.5, 0.5, 10_000)
    edges, mass = deviation_histogram(values, 0.01)
    assert len(mass) == 100
    assert mass.sum() == pytest.approx(1.0, abs=1e-9)
    assert edges[0] == -0.5 and edges[-1] == 0.5


def test_nearest_pitch_deviation():
    assert np.allclose(nearest_pitch_deviation([60.2, 61.8, 69.0]), [0.2, -0.2, 0.0])


def write_stub_track(root, track_id="string_00000", f0=None, amplitude=None, notes=()):
    track_dir = root / "train" / track_id
    (track_dir / "synth_params").mkdir(parents=True)
    n = 500
    params = SynthesisParams(250.0, np.full(n, 60.0) if f0 is None else f0,
                             np.zeros(n) if amplitude is None else amplitude, np.full((n, 4), 0.25), np.zeros((n, 3)))
    write_synth_params_csv(track_dir / "synth_params" / "0_violin.csv", params)
    meta = {"track_id": track_id, "ensemble": "string", "duration_s": 2.0, "frame_rate": 250.0,
            "stems": [{"name": "0_violin", "notes": list(notes)}]}
    (track_dir / "metadata.json").write_text(json.dumps(meta), encoding="utf-8")


def test_stats_on_silent_corpus(tmp_path):
    write_stub_track(tmp_path)
    summary = run_stats(tmp_path)
    assert summary.voiced_frames == 0
    assert not summary.framewise_mass.any()
    assert summary.note_mode is None
    assert summary.ensembles["string"].tracks == 1
    assert (tmp_path / "stats" / "f0_deviation_histogram.csv").is_file()


def test_stats_lists_unreadable_tracks(tmp_path):
    write_stub_track(tmp_path)
    broken = tmp_path / "valid" / "brass_00000"
    broken.mkdir(parents=True)
    (broken / "metadata.json").write_text("{", encoding="utf-8")
    summary = run_stats(tmp_path, out_dir=tmp_path / "out")
    assert summary.unreadable == [str(broken)]


def test_stats_on_generated_corpus(make_config, tmp_path):
    root = tmp_path / "corpus"
    run_generate(make_config(root, num_tracks=1, ensembles=["string"]), progress=False)
    summary = run_stats(root, bin_width=0.02)
    assert summary.voiced_frames > 0
    assert summary.framewise_mass.sum() == pytest.approx(1.0, abs=1e-9)
    assert summary.note_mass.sum() == pytest.approx(1.0, abs=1e-9)
    assert summary.ensembles["string"].notes == sum(
        len(s["notes"]) for s in read_metadata(find_track_dirs(root)[0])["stems"])


@pytest.mark.slow
def test_worker_count_does_not_change_corpus(make_config, tmp_path):
    serial = make_config(tmp_path / "serial", num_tracks=2, ensembles=["string", "random"], workers=1)
    pooled = make_config(tmp_path / "pooled", num_tracks=2, ensembles=["string", "random"], workers=4)
    run_generate(serial, progress=False)
    run_generate(pooled, progress=False)
    assert corpus_digest(tmp_path / "serial") == corpus_digest(tmp_path / "pooled")


@pytest.mark.slow
def test_pitch_correction_narrows_note_deviation(make_config, tmp_path):
    results = {}
    for name, alpha in (("raw", 0.0), ("corrected", None)):
        root = tmp_path / name
        cfg = make_config(root, num_tracks=6, ensembles=["string", "woodwind"])
        if alpha is not None:
            cfg = replace(cfg, alpha=alpha)
        run_generate(cfg, progress=False)
        results[name] = run_stats(root, bin_width=0.01)
    assert results["corrected"].mean_abs_note < results["raw"].mean_abs_note
    assert abs(results["corrected"].note_mode) <= 0.02


def test_stats_counts_deviations_outside_the_histogram(tmp_path, caplog):
    caplog.set_level(logging.WARNING, logger="pipeline")
    n = 500
    f0 = np.where(np.arange(n) < 100, 60.3, 60.05)
    notes = [{"pitch": 60, "onset_s": 0.0, "offset_s": 1.0, "corrected_mean_offset": 0.3},
             {"pitch": 60, "onset_s": 1.0, "offset_s": 2.0, "corrected_mean_offset": 0.05}]
    write_stub_track(tmp_path, f0=f0, amplitude=np.full(n, 0.1), notes=notes)
    summary = run_stats(tmp_path, bin_width=0.01, max_deviation=0.2)
    assert summary.voiced_frames == n
    assert summary.framewise_out_of_range == 100
    assert summary.note_out_of_range == 1
    assert "left out of the histograms" in caplog.text


def test_wide_microtiming_bound_still_validates(make_config, tmp_path):
    root = tmp_path / "corpus"
    cfg = make_config(root, num_tracks=1, ensembles=["brass"])
    cfg = replace(cfg, microtiming=MicrotimingConfig(sigma=0.04, bound=0.1))
    assert run_generate(cfg, progress=False).ok
    track_dir = find_track_dirs(root)[0]
    meta = read_metadata(track_dir)
    assert meta["duration_s"] - meta["grid_s"] == pytest.approx(0.1, abs=1e-3)
    assert validate_track(track_dir).violations == []


def test_manifest_is_rewritten_per_run(make_config, tmp_path):
    root = tmp_path / "corpus"
    root.mkdir()
    (root / "manifest.jsonl").write_text('{"track_id": "stale_00009", "path": "train/stale_00009"}\nnot json\n',
                                         encoding="utf-8")
    run_generate(make_config(root, num_tracks=2, ensembles=["woodwind"]), progress=False)
    entries = read_manifest(root)
    assert [e["track_id"] for e in entries] == ["woodwind_00000", "woodwind_00001"]
    assert len(entries) == len(find_track_dirs(root))


def test_manifest_grows_as_tracks_finish(make_config, tmp_path, monkeypatch):
    root = tmp_path / "corpus"
    seen = []

    def recording_append(root_dir, entry):
        seen.append((entry["track_id"], len(read_manifest(root_dir))))
        append_manifest(root_dir, entry)

    monkeypatch.setattr("pipeline.append_manifest", recording_append)
    run_generate(make_config(root, num_tracks=2, ensembles=["brass"]), progress=False)
    assert seen == [("brass_00000", 0), ("brass_00001", 1)]
