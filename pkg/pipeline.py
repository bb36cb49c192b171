"""
End-to-end generation, validation and corpus statistics.

Every track is a pure function of (config, ensemble, index): its random
streams come from SeedSequence(seed, spawn_key=(ensemble index, track index)),
so the corpus does not depend on worker count or scheduling.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from augment import (ENSEMBLES, assign_orchestration, fit_register, grid_seconds, realize_timing,
                     sample_tempo)
from dataset_io import (DatasetError, TrackBundle, TrackExistsError, append_manifest, assign_split,
                        find_track_dirs, manifest_entry, read_manifest, read_metadata, read_synth_params_columns,
                        track_dir_for, validate_track, write_manifest, write_track)
from expression import generate_expressions, note_frame_span, render_note, stitch_note_segments
from mixdown import master_stems
from pipeline_config import PipelineConfig
from score_core import (PARTS, ExternalScoreModel, MarkovNoteModel, list_score_files, pianoroll_to_notes,
                        sample_accepted_chorale)
from synth import synthesize_stem

logger = logging.getLogger(__name__)

# ---------------- CONFIG ----------------
STATS_DIR = "stats"
FRAMEWISE_HISTOGRAM = "f0_deviation_histogram.csv"
NOTE_HISTOGRAM = "note_deviation_histogram.csv"
ENSEMBLE_STATS = "ensemble_stats.csv"
# order of the child streams spawned per track
STAGES = ("score", "tempo", "orchestration", "timing", "expression", "render", "dither")
# ---------------------------------------


class TrackJob(NamedTuple):
    ensemble: str
    ensemble_index: int
    index: int

    @property
    def track_id(self) -> str:
        return f"{self.ensemble}_{self.index:05d}"


class TrackResult(NamedTuple):
    track_id: str
    status: str  # "written", "skipped" or "failed"
    entry: dict | None = None
    attempts: int = 0
    error: str | None = None


@dataclass
class GenerateSummary:
    entries: list = field(default_factory=list)
    written: int = 0
    skipped: int = 0
    failed: int = 0
    attempts: int = 0
    elapsed_s: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.failed == 0


def plan_tracks(cfg: PipelineConfig) -> list[TrackJob]:
    """All tracks of a run in manifest order: ensemble by ensemble, index ascending."""
    names = list(ENSEMBLES)
    return [TrackJob(name, names.index(name), i) for name in cfg.ensembles for i in range(cfg.num_tracks)]


def track_streams(seed: int, job: TrackJob) -> dict:
    """Independent child SeedSequences per pipeline stage of one track."""
    root = np.random.SeedSequence(seed, spawn_key=(job.ensemble_index, job.index))
    return dict(zip(STAGES, root.spawn(len(STAGES))))


def stream_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def note_model_factory(cfg: PipelineConfig, job: TrackJob):
    kind = cfg.note_model["kind"]
    if kind == "external":
        files = list_score_files(cfg.note_model["scores_dir"])
        model = ExternalScoreModel.from_midi(files[job.index % len(files)])
        return lambda attempt: model
    return lambda attempt: MarkovNoteModel(cfg.ranges, tonic=cfg.note_model["tonic"],
                                           temperature=cfg.note_model["temperature"])


def build_track(cfg: PipelineConfig, job: TrackJob) -> tuple[TrackBundle, int]:
    """Run every stage for one track and return the bundle plus its dither seed."""
    streams = track_streams(cfg.seed, job)
    track_seed = stream_seed(streams["score"])

    roll, attempts = sample_accepted_chorale(note_model_factory(cfg, job), cfg.gibbs(track_seed),
                                             cfg.ranges, cfg.max_attempts)
    score_notes = pianoroll_to_notes(roll)

    bpm = sample_tempo(cfg.tempo, np.random.default_rng(streams["tempo"]))
    orchestration = assign_orchestration(ENSEMBLES[job.ensemble], np.random.default_rng(streams["orchestration"]))

    fitted, shifts = [], []
    for part in range(len(PARTS)):
        notes, shift = fit_register([n for n in score_notes if n.part == part],
                                    orchestration.instruments[part], cfg.playable_ranges)
        if shift:
            logger.debug("%s: %s part shifted %+d semitones", job.track_id, PARTS[part], shift)
        fitted.extend(notes)
        shifts.append(shift)

    grid = grid_seconds(bpm)
    duration = grid + cfg.microtiming.bound
    performed = realize_timing(fitted, bpm, cfg.microtiming, np.random.default_rng(streams["timing"]),
                               orchestration, end_s=duration)

    expr_rng = np.random.default_rng(streams["expression"])
    render_rng = np.random.default_rng(streams["render"])
    stem_notes, stem_exprs, stem_params, stems, intonation = [], [], [], [], []
    for part in range(len(PARTS)):
        notes = sorted((n for n in performed if n.part == part), key=lambda n: n.onset_s)
        instrument = orchestration.instruments[part]
        exprs = generate_expressions(notes, instrument, expr_rng, cfg.priors)
        rendered = [render_note(n, e, render_rng, cfg.render, cfg.intonation, cfg.alpha)
                    for n, e in zip(notes, exprs)]
        params = stitch_note_segments([r.params for r in rendered], duration, cfg.render.crossfade_s)
        stems.append(synthesize_stem(params, cfg.synth, key=(track_seed, part)))
        stem_notes.append(notes)
        stem_exprs.append(exprs)
        stem_params.append(params)
        intonation.append([{"alpha": r.alpha, "f0_delta_mean": r.f0_delta_mean,
                            "corrected_mean_offset": r.corrected_mean_offset} for r in rendered])

    mastered = master_stems(stems, cfg.target_lufs, cfg.ceiling_db, cfg.peak_mode)
    for index in mastered.silent_stems:
        logger.warning("%s: stem %d (%s) is silent", job.track_id, index, orchestration.stem_labels[index])
    gains = {
        "target_lufs": cfg.target_lufs,
        "ceiling_db": cfg.ceiling_db,
        "peak_mode": cfg.peak_mode,
        "stem_gains_db": [float(g) for g in mastered.stem_gains_db],
        "peak_guard_gain_db": float(mastered.peak_guard_gain_db),
        "stem_loudness_lufs": [None if v is None else float(v) for v in mastered.stem_loudness],
        "silent_stems": list(mastered.silent_stems),
    }
    bundle = TrackBundle(
        track_id=job.track_id,
        ensemble=job.ensemble,
        tempo=bpm,
        instruments=orchestration.instruments,
        stem_labels=orchestration.stem_labels,
        mix=mastered.mix,
        stems=mastered.stems,
        notes=stem_notes,
        expressions=stem_exprs,
        synthesis_params=stem_params,
        gains=gains,
        split=assign_split(job.track_id, cfg.splits),
        seed=track_seed,
        duration_s=duration,
        note_intonation=intonation,
        register_shifts=tuple(shifts),
        rejection_attempts=attempts,
        grid_s=grid,
    )
    return bundle, stream_seed(streams["dither"])


def generate_track(cfg: PipelineConfig, job: TrackJob) -> TrackResult:
    """
    Generate and write one track. Never raises: failures come back as a
    "failed" result so one bad track cannot stop the run.
    """
    root = Path(cfg.output_root)
    final = track_dir_for(root, assign_split(job.track_id, cfg.splits), job.track_id)
    try:
        if final.exists() and not cfg.overwrite:
            meta = read_metadata(final)
            return TrackResult(job.track_id, "skipped", manifest_entry(meta, root, final),
                               meta.get("rejection_attempts", 0))
        bundle, dither_seed = build_track(cfg, job)
        entry = write_track(bundle, root, overwrite=cfg.overwrite, dither_seed=dither_seed)
        return TrackResult(job.track_id, "written", entry, bundle.rejection_attempts)
    except TrackExistsError as e:
        return TrackResult(job.track_id, "failed", error=str(e))
    except Exception as e:
        return TrackResult(job.track_id, "failed", error=f"{type(e).__name__}: {e}")


def run_generate(cfg: PipelineConfig, progress: bool = True) -> GenerateSummary:
    """
    Generate every planned track with a joblib worker pool.

    Results come back in plan order, and only this process writes the
    manifest, so its content is independent of `cfg.workers`. The manifest
    is truncated up front and one line is appended per finished track, so
    after an interruption it lists exactly the tracks completed so far.
    """
    jobs = plan_tracks(cfg)
    root = Path(cfg.output_root)
    root.mkdir(parents=True, exist_ok=True)
    write_manifest(root, [])
    logger.info("Generating %d track(s) for %s into %s (%d worker(s))",
                len(jobs), ", ".join(cfg.ensembles), root, cfg.workers)

    summary = GenerateSummary()
    start = time.time()
    results = Parallel(n_jobs=cfg.workers, return_as="generator")(
        delayed(generate_track)(cfg, job) for job in jobs
    )
    for result in tqdm(results, total=len(jobs), desc="tracks", unit="track",
                       disable=None if progress else True):
        if result.status == "failed":
            summary.failed += 1
            summary.failures.append((result.track_id, result.error))
            logger.error("%s failed: %s", result.track_id, result.error)
            continue
        if result.status == "skipped":
            summary.skipped += 1
            logger.debug("%s exists, skipped", result.track_id)
        else:
            summary.written += 1
        summary.attempts += result.attempts
        summary.entries.append(result.entry)
        append_manifest(root, result.entry)

    summary.elapsed_s = time.time() - start
    logger.info("Generation complete in %.1f s: written %d, skipped %d, failed %d, rejection attempts %d",
                summary.elapsed_s, summary.written, summary.skipped, summary.failed, summary.attempts)
    return summary


@dataclass
class ValidationSummary:
    reports: list
    manifest_total: int
    track_total: int
    problems: list = field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(len(r.violations) for r in self.reports) + len(self.problems)

    @property
    def ok(self) -> bool:
        return self.violations == 0


def run_validate(root, target_lufs: float | None = None) -> ValidationSummary:
    """validate_track over every track directory, plus manifest/directory agreement."""
    root = Path(root)
    dirs = find_track_dirs(root)
    reports = []
    for track_dir in tqdm(dirs, desc="validate", unit="track", disable=None):
        report = validate_track(track_dir, target_lufs)
        for violation in report.violations:
            logger.warning("%s: %s", report.track_id, violation)
        reports.append(report)

    manifest = read_manifest(root)
    problems = []
    listed = {e["path"] for e in manifest}
    found = {d.relative_to(root).as_posix() for d in dirs}
    if len(manifest) != len(dirs):
        problems.append(f"manifest lists {len(manifest)} tracks, {len(dirs)} directories found")
    for path in sorted(listed - found):
        problems.append(f"manifest entry without directory: {path}")
    for path in sorted(found - listed):
        problems.append(f"directory missing from manifest: {path}")
    for problem in problems:
        logger.warning("%s", problem)

    summary = ValidationSummary(reports, len(manifest), len(dirs), problems)
    flagged = sum(1 for r in reports if not r.ok)
    logger.info("Validated %d track(s): %d flagged, %d violation(s)", len(reports), flagged, summary.violations)
    return summary


# -------------------------
# Statistics
# -------------------------
def deviation_histogram(values, bin_width: float, max_deviation: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """
    Histogram of pitch deviations normalized to unit mass over the values
    inside ±max_deviation; empty input gives all-zero masses.
    """
    n_bins = int(round(2 * max_deviation / bin_width))
    edges = np.linspace(-max_deviation, max_deviation, n_bins + 1)
    counts, _ = np.histogram(np.asarray(values, dtype=float), bins=edges)
    total = counts.sum()
    mass = counts / total if total else np.zeros(n_bins)
    return edges, mass


def nearest_pitch_deviation(f0_semitones) -> np.ndarray:
    f0 = np.asarray(f0_semitones, dtype=float)
    return f0 - np.round(f0)


@dataclass
class EnsembleStats:
    tracks: int = 0
    seconds: float = 0.0
    notes: int = 0
    voiced_frames: int = 0


@dataclass
class StatsSummary:
    edges: np.ndarray
    framewise_mass: np.ndarray
    note_edges: np.ndarray
    note_mass: np.ndarray
    ensembles: dict
    voiced_frames: int
    mean_abs_framewise: float
    mean_abs_note: float
    unreadable: list = field(default_factory=list)
    framewise_out_of_range: int = 0  # beyond ±max_deviation, left out of the histogram mass
    note_out_of_range: int = 0

    @property
    def note_mode(self) -> float | None:
        """Centre of the heaviest note-mean bin."""
        if not self.note_mass.any():
            return None
        i = int(np.argmax(self.note_mass))
        return float(0.5 * (self.note_edges[i] + self.note_edges[i + 1]))


def _write_histogram(path: Path, edges, mass):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_low", "bin_high", "mass"])
        for lo, hi, m in zip(edges[:-1], edges[1:], mass):
            writer.writerow([f"{lo:.6f}", f"{hi:.6f}", f"{m:.9g}"])


def run_stats(root, bin_width: float = 0.01, max_deviation: float = 0.5, out_dir=None) -> StatsSummary:
    """
    Framewise and note-mean f0 deviation histograms plus per-ensemble totals.

    Framewise deviations are taken from the nearest integer pitch over voiced
    frames (amplitude > 0). Note-mean deviations come from the per-note
    record written at render time, since stored frames near note boundaries
    are crossfaded with the neighbouring pitch; tracks without that record
    fall back to the mean f0 over the note's frames minus its pitch.
    """
    root = Path(root)
    out_dir = Path(out_dir) if out_dir is not None else root / STATS_DIR
    framewise, note_means, unreadable = [], [], []
    ensembles: dict = {}

    for track_dir in find_track_dirs(root):
        try:
            meta = read_metadata(track_dir)
            frame_rate = meta["frame_rate"]
            per_stem = []
            for stem in meta["stems"]:
                cols = read_synth_params_columns(track_dir / "synth_params" / f"{stem['name']}.csv")
                per_stem.append((stem, cols["f0_semitones"], cols["amplitude"]))
        except (DatasetError, KeyError, OSError, ValueError) as e:
            logger.warning("unreadable track %s: %s", track_dir, e)
            unreadable.append(str(track_dir))
            continue

        totals = ensembles.setdefault(meta["ensemble"], EnsembleStats())
        totals.tracks += 1
        totals.seconds += float(meta["duration_s"])
        for stem, f0, amp in per_stem:
            voiced = amp > 0
            framewise.append(nearest_pitch_deviation(f0[voiced]))
            totals.voiced_frames += int(voiced.sum())
            totals.notes += len(stem["notes"])
            for note in stem["notes"]:
                if "corrected_mean_offset" in note:
                    note_means.append(float(note["corrected_mean_offset"]))
                    continue
                lo, hi = note_frame_span(note["onset_s"], note["offset_s"], frame_rate)
                frames = f0[lo:min(hi, len(f0))]
                if frames.size:
                    note_means.append(float(frames.mean()) - note["pitch"])

    framewise = np.concatenate(framewise) if framewise else np.zeros(0)
    note_means = np.asarray(note_means, dtype=float)
    edges, mass = deviation_histogram(framewise, bin_width, max_deviation)
    note_edges, note_mass = deviation_histogram(note_means, bin_width, max_deviation)
    summary = StatsSummary(
        edges=edges,
        framewise_mass=mass,
        note_edges=note_edges,
        note_mass=note_mass,
        ensembles=ensembles,
        voiced_frames=int(framewise.size),
        mean_abs_framewise=float(np.abs(framewise).mean()) if framewise.size else 0.0,
        mean_abs_note=float(np.abs(note_means).mean()) if note_means.size else 0.0,
        unreadable=unreadable,
        framewise_out_of_range=int(np.count_nonzero(np.abs(framewise) > max_deviation)),
        note_out_of_range=int(np.count_nonzero(np.abs(note_means) > max_deviation)),
    )
    if summary.framewise_out_of_range or summary.note_out_of_range:
        logger.warning("%d frame(s) and %d note mean(s) deviate more than %.3f st and are left out of "
                       "the histograms", summary.framewise_out_of_range, summary.note_out_of_range, max_deviation)

    out_dir.mkdir(parents=True, exist_ok=True)
    _write_histogram(out_dir / FRAMEWISE_HISTOGRAM, edges, mass)
    _write_histogram(out_dir / NOTE_HISTOGRAM, note_edges, note_mass)
    with open(out_dir / ENSEMBLE_STATS, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["ensemble", "tracks", "seconds", "notes", "voiced_frames"])
        for name, s in sorted(ensembles.items()):
            writer.writerow([name, s.tracks, f"{s.seconds:.3f}", s.notes, s.voiced_frames])
        writer.writerow(["all", sum(s.tracks for s in ensembles.values()),
                         f"{sum(s.seconds for s in ensembles.values()):.3f}",
                         sum(s.notes for s in ensembles.values()), summary.voiced_frames])
    logger.info("Stats over %d voiced frames: mean |deviation| %.4f st framewise, %.4f st note-mean",
                summary.voiced_frames, summary.mean_abs_framewise, summary.mean_abs_note)
    return summary
