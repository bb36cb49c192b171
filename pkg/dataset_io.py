"""
On-disk layout of generated tracks, split assignment, and track validation.

<root>/<split>/<track_id>/
    mix.wav
    stems_audio/<i>_<label>.wav
    stems_midi/<i>_<label>.mid
    expression/<i>_<label>.csv
    synth_params/<i>_<label>.csv
    metadata.json
<root>/manifest.jsonl
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import mido
import numpy as np
from pydub import AudioSegment

from augment import InstrumentId, PerformanceNote
from expression import EXPRESSION_FIELDS, NoteExpression, SynthesisParams
from mixdown import LoudnessMeter, db_to_gain, is_silence
from score_core import PARTS
from synth import AudioBuffer, midi_to_hz

logger = logging.getLogger(__name__)

# ---------------- CONFIG ----------------
SPLITS = ("train", "valid", "test")
MANIFEST_NAME = "manifest.jsonl"
METADATA_NAME = "metadata.json"
MIX_NAME = "mix.wav"
STEM_DIRS = {
    "stems_audio": ".wav",
    "stems_midi": ".mid",
    "expression": ".csv",
    "synth_params": ".csv",
}
TICKS_PER_BEAT = 220
PCM_SCALE = 32767
LSB = 1.0 / PCM_SCALE
MIX_CONSISTENCY_RMS = 1e-4
LOUDNESS_TOLERANCE_LU = 0.1
DURATION_TOLERANCE_S = 0.060
GM_PROGRAMS = {
    InstrumentId.VIOLIN: 40,
    InstrumentId.VIOLA: 41,
    InstrumentId.CELLO: 42,
    InstrumentId.DOUBLE_BASS: 43,
    InstrumentId.FLUTE: 73,
    InstrumentId.OBOE: 68,
    InstrumentId.CLARINET: 71,
    InstrumentId.SAXOPHONE: 65,
    InstrumentId.BASSOON: 70,
    InstrumentId.TRUMPET: 56,
    InstrumentId.FRENCH_HORN: 60,
    InstrumentId.TROMBONE: 57,
    InstrumentId.TUBA: 58,
}
# ---------------------------------------


class DatasetError(RuntimeError):
    """Raised when a track cannot be written or read."""


class TrackExistsError(DatasetError):
    """Raised when a track directory already exists and overwriting is off."""


@dataclass(frozen=True)
class SplitPolicy:
    fractions: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if len(self.fractions) != len(SPLITS):
            raise DatasetError(f"need {len(SPLITS)} split fractions, got {len(self.fractions)}")
        if any(f < 0 for f in self.fractions) or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise DatasetError(f"split fractions must be non-negative and sum to 1, got {self.fractions}")


def assign_split(track_id: str, policy: SplitPolicy = SplitPolicy()) -> str:
    """Deterministic split from a SHA-256 hash of the track id."""
    digest = hashlib.sha256(track_id.encode("utf-8")).digest()
    u = int.from_bytes(digest[:8], "big") / 2.0**64
    edge = 0.0
    for name, fraction in zip(SPLITS, policy.fractions):
        edge += fraction
        if u < edge:
            return name
    # u sits above a cumulative sum that rounded below 1
    return [name for name, f in zip(SPLITS, policy.fractions) if f > 0][-1]


@dataclass(eq=False)
class TrackBundle:
    track_id: str
    ensemble: str
    tempo: int
    instruments: tuple
    stem_labels: tuple
    mix: AudioBuffer
    stems: list
    notes: list               # per stem: list of PerformanceNote
    expressions: list         # per stem: list of NoteExpression
    synthesis_params: list    # per stem: SynthesisParams
    gains: dict               # mastering record
    split: str
    seed: int = 0
    duration_s: float = 0.0
    note_intonation: list = field(default_factory=list)  # per stem: list of dicts
    register_shifts: tuple = (0, 0, 0, 0)
    rejection_attempts: int = 1
    grid_s: float | None = None  # quantized score length; audio runs past it by the microtiming pad

    def __post_init__(self):
        if len(self.stems) != len(PARTS):
            raise DatasetError(f"{self.track_id}: expected {len(PARTS)} stems, got {len(self.stems)}")
        lengths = {len(s) for s in self.stems} | {len(self.mix)}
        if len(lengths) != 1:
            raise DatasetError(f"{self.track_id}: audio buffers differ in length {sorted(lengths)}")
        for i, (notes, exprs) in enumerate(zip(self.notes, self.expressions)):
            if len(notes) != len(exprs):
                raise DatasetError(f"{self.track_id}: stem {i} has {len(notes)} notes but {len(exprs)} expressions")
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")

    def stem_name(self, index: int) -> str:
        return f"{index}_{self.stem_labels[index]}"


class TrackReport(NamedTuple):
    track_id: str
    path: str
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


# -------------------------
# Audio
# -------------------------
def quantize_pcm16(samples: np.ndarray, rng: np.random.Generator, ceiling: float | None = None) -> np.ndarray:
    """TPDF-dithered 16-bit quantization; `ceiling` caps |sample| at the next LSB above it."""
    dither = rng.uniform(-0.5, 0.5, len(samples)) + rng.uniform(-0.5, 0.5, len(samples))
    q = np.round(np.asarray(samples) * PCM_SCALE + dither)
    limit = PCM_SCALE if ceiling is None else min(PCM_SCALE, int(np.ceil(ceiling * PCM_SCALE)))
    return np.clip(q, -limit, limit).astype(np.int16)


def write_wav(path, pcm: np.ndarray, sample_rate: int):
    audio = AudioSegment(data=pcm.astype("<i2").tobytes(), sample_width=2, frame_rate=sample_rate, channels=1)
    audio.export(str(path), format="wav").close()


class WavData(NamedTuple):
    samples: np.ndarray
    sample_rate: int
    sample_width: int
    channels: int


def read_wav(path) -> WavData:
    try:
        audio = AudioSegment.from_wav(str(path))
    except Exception as e:
        raise DatasetError(f"cannot read WAV {path}: {e}") from e
    pcm = np.array(audio.get_array_of_samples(), dtype=np.float64)
    return WavData(pcm / PCM_SCALE, audio.frame_rate, audio.sample_width, audio.channels)


# -------------------------
# MIDI
# -------------------------
def write_stem_midi(path, notes, bpm: int, instrument, label: str, expressions=None):
    """Monophonic type-0 SMF on the quantized grid with one tempo event."""
    ticks_per_step = TICKS_PER_BEAT // 4
    mid = mido.MidiFile(type=0, ticks_per_beat=TICKS_PER_BEAT)
    track = mido.MidiTrack()
    mid.tracks.append(track)
    track.append(mido.MetaMessage("track_name", name=label, time=0))
    track.append(mido.MetaMessage("set_tempo", tempo=mido.bpm2tempo(bpm), time=0))
    track.append(mido.Message("program_change", program=GM_PROGRAMS.get(InstrumentId(instrument), 0), time=0))
    now = 0
    paired = zip(notes, expressions if expressions is not None else [None] * len(notes))
    for note, expr in sorted(paired, key=lambda pair: pair[0].quantized_onset_step):
        start = note.quantized_onset_step * ticks_per_step
        end = (note.quantized_onset_step + note.quantized_duration_steps) * ticks_per_step
        velocity = 80 if expr is None else 1 + int(round(126 * expr.volume))
        track.append(mido.Message("note_on", note=note.pitch, velocity=velocity, time=start - now))
        track.append(mido.Message("note_off", note=note.pitch, velocity=0, time=end - start))
        now = end
    track.append(mido.MetaMessage("end_of_track", time=0))
    mid.save(str(path))


def read_midi_notes(path) -> tuple[list, float]:
    """Return ((pitch, onset_s, offset_s) list, file length in seconds)."""
    try:
        mid = mido.MidiFile(str(path))
    except Exception as e:
        raise DatasetError(f"cannot read MIDI {path}: {e}") from e
    notes, active, now = [], {}, 0.0
    for msg in mid:  # iterating a MidiFile yields delta times in seconds
        now += msg.time
        if msg.type == "note_on" and msg.velocity > 0:
            active[msg.note] = now
        elif msg.type in ("note_on", "note_off") and msg.note in active:
            notes.append((msg.note, active.pop(msg.note), now))
    return notes, mid.length


# -------------------------
# Tables
# -------------------------
def write_expression_csv(path, notes, expressions):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["note_index", "pitch", "onset_s", "offset_s", *EXPRESSION_FIELDS])
        for i, (note, expr) in enumerate(zip(notes, expressions)):
            writer.writerow([i, note.pitch, f"{note.onset_s:.6f}", f"{note.offset_s:.6f}",
                             *(f"{v:.6f}" for v in expr.as_array())])


def synth_params_header(num_harmonics: int, num_bands: int) -> list[str]:
    return (["time_s", "f0_semitones", "f0_hz", "amplitude"]
            + [f"harmonic_{k}" for k in range(1, num_harmonics + 1)]
            + [f"noise_{b}" for b in range(num_bands)])


def write_synth_params_csv(path, p: SynthesisParams):
    time_s = (p.start_frame + np.arange(p.num_frames)) / p.frame_rate
    table = np.column_stack([time_s, p.f0, midi_to_hz(p.f0), p.amplitude, p.harmonic_distribution, p.noise_magnitudes])
    header = ",".join(synth_params_header(p.num_harmonics, p.num_noise_bands))
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.6g")


def read_synth_params_columns(path, columns=("f0_semitones", "amplitude")) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
    try:
        idx = [header.index(c) for c in columns]
    except ValueError as e:
        raise DatasetError(f"{path}: missing column ({e})") from e
    data = np.loadtxt(path, delimiter=",", skiprows=1, usecols=idx, ndmin=2)
    return {c: data[:, i] for i, c in enumerate(columns)}


def count_csv_rows(path) -> int:
    with open(path, "r", encoding="utf-8") as f:
        return max(0, sum(1 for line in f if line.strip()) - 1)


# -------------------------
# Tracks
# -------------------------
def note_record(note: PerformanceNote, expr: NoteExpression, intonation: dict | None) -> dict:
    record = {
        "pitch": note.pitch,
        "onset_s": note.onset_s,
        "offset_s": note.offset_s,
        "quantized_onset_step": note.quantized_onset_step,
        "quantized_duration_steps": note.quantized_duration_steps,
        "timing_offset_s": note.timing_offset_s,
        "expression": dict(zip(EXPRESSION_FIELDS, (float(v) for v in expr.as_array()))),
    }
    if intonation:
        record.update(intonation)
    return record


def build_metadata(bundle: TrackBundle, sample_rate: int, frame_rate: float) -> dict:
    stems = []
    for i in range(len(PARTS)):
        intonation = bundle.note_intonation[i] if bundle.note_intonation else [None] * len(bundle.notes[i])
        stems.append({
            "index": i,
            "part": PARTS[i],
            "label": bundle.stem_labels[i],
            "instrument": InstrumentId(bundle.instruments[i]).value,
            "register_shift": int(bundle.register_shifts[i]),
            "name": bundle.stem_name(i),
            "num_notes": len(bundle.notes[i]),
            "notes": [note_record(n, e, t) for n, e, t in zip(bundle.notes[i], bundle.expressions[i], intonation)],
        })
    return {
        "track_id": bundle.track_id,
        "split": bundle.split,
        "ensemble": bundle.ensemble,
        "tempo_bpm": bundle.tempo,
        "seed": str(bundle.seed),
        "duration_s": bundle.duration_s,
        "grid_s": bundle.duration_s if bundle.grid_s is None else bundle.grid_s,
        "sample_rate": sample_rate,
        "frame_rate": frame_rate,
        "num_samples": len(bundle.mix),
        "rejection_attempts": bundle.rejection_attempts,
        "instruments": [InstrumentId(i).value for i in bundle.instruments],
        "stem_labels": list(bundle.stem_labels),
        "mastering": bundle.gains,
        "stems": stems,
    }


def manifest_entry(metadata: dict, root: Path, track_dir: Path) -> dict:
    mastering = metadata["mastering"]
    return {
        "track_id": metadata["track_id"],
        "split": metadata["split"],
        "ensemble": metadata["ensemble"],
        "tempo_bpm": metadata["tempo_bpm"],
        "instruments": metadata["instruments"],
        "stem_gains_db": mastering.get("stem_gains_db"),
        "peak_guard_gain_db": mastering.get("peak_guard_gain_db"),
        "path": track_dir.relative_to(root).as_posix(),
    }


def track_dir_for(root, split: str, track_id: str) -> Path:
    return Path(root) / split / track_id


def write_track(bundle: TrackBundle, root, overwrite: bool = False, dither_seed: int = 0) -> dict:
    """
    Write one track atomically: everything goes to a hidden temp directory
    next to the target, which is renamed into place at the end.

    Returns:
        dict: the manifest entry for the track.
    """
    root = Path(root)
    split_dir = root / bundle.split
    final = track_dir_for(root, bundle.split, bundle.track_id)
    if final.exists() and not overwrite:
        raise TrackExistsError(f"track already exists: {final}")
    try:
        split_dir.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{bundle.track_id}.", dir=split_dir))
    except OSError as e:
        raise DatasetError(f"cannot create track directory under {split_dir}: {e}") from e

    rate = bundle.mix.sample_rate
    frame_rate = bundle.synthesis_params[0].frame_rate
    rng = np.random.default_rng(dither_seed)
    try:
        for sub in STEM_DIRS:
            (tmp / sub).mkdir()
        ceiling = bundle.gains.get("ceiling_db")
        write_wav(tmp / MIX_NAME, quantize_pcm16(bundle.mix.samples, rng,
                                                 None if ceiling is None else db_to_gain(ceiling)), rate)
        for i in range(len(PARTS)):
            name = bundle.stem_name(i)
            write_wav(tmp / "stems_audio" / f"{name}.wav", quantize_pcm16(bundle.stems[i].samples, rng), rate)
            write_stem_midi(tmp / "stems_midi" / f"{name}.mid", bundle.notes[i], bundle.tempo,
                            bundle.instruments[i], bundle.stem_labels[i], bundle.expressions[i])
            write_expression_csv(tmp / "expression" / f"{name}.csv", bundle.notes[i], bundle.expressions[i])
            write_synth_params_csv(tmp / "synth_params" / f"{name}.csv", bundle.synthesis_params[i])
        metadata = build_metadata(bundle, rate, frame_rate)
        with open(tmp / METADATA_NAME, "w", encoding="utf-8") as f:
            json.dump(metadata, f, indent=2, sort_keys=True)
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
    except OSError as e:
        shutil.rmtree(tmp, ignore_errors=True)
        raise DatasetError(f"failed writing {final}: {e}") from e
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest_entry(metadata, root, final)


def read_metadata(track_dir) -> dict:
    path = Path(track_dir) / METADATA_NAME
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot read {path}: {e}") from e


def find_track_dirs(root) -> list[Path]:
    """Track directories under every split, skipping in-flight temp directories."""
    root = Path(root)
    found = []
    for split in SPLITS:
        split_dir = root / split
        if split_dir.is_dir():
            found.extend(p for p in split_dir.iterdir() if p.is_dir() and not p.name.startswith("."))
    return sorted(found, key=lambda p: (p.name, p.parent.name))


def write_manifest(root, entries):
    path = Path(root) / MANIFEST_NAME
    with open(path, "w", encoding="utf-8") as f:
        for entry in entries:
            f.write(json.dumps(entry, sort_keys=True) + "\n")


def append_manifest(root, entry: dict):
    with open(Path(root) / MANIFEST_NAME, "a", encoding="utf-8") as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")


def read_manifest(root) -> list[dict]:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        return []
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# -------------------------
# Validation
# -------------------------
def validate_track(path, target_lufs: float | None = None) -> TrackReport:
    """
    Check one written track; problems are collected, never raised.

    Covers file presence, WAV format fields, mixture consistency, stem
    loudness and mix peak, MIDI vs audio duration, and expression counts.
    """
    track_dir = Path(path)
    violations = []
    try:
        meta = read_metadata(track_dir)
    except DatasetError as e:
        return TrackReport(track_dir.name, str(track_dir), [f"metadata: {e}"])

    rate = meta.get("sample_rate")
    mastering = meta.get("mastering", {})
    stem_meta = meta.get("stems")
    if not isinstance(stem_meta, list):
        return TrackReport(meta.get("track_id", track_dir.name), str(track_dir), ["metadata: no stem list"])
    stem_meta = [s for s in stem_meta if isinstance(s, dict) and s.get("name")]
    names = [s["name"] for s in stem_meta]
    if len(names) != len(PARTS):
        violations.append(f"metadata lists {len(names)} stems, expected {len(PARTS)}")

    expected = [MIX_NAME] + [f"{sub}/{name}{ext}" for sub, ext in STEM_DIRS.items() for name in names]
    missing = {rel for rel in expected if not (track_dir / rel).is_file()}
    violations.extend(f"missing file: {rel}" for rel in sorted(missing))

    audio = {}
    for rel in [MIX_NAME] + [f"stems_audio/{n}.wav" for n in names]:
        if rel in missing:
            continue
        try:
            wav = read_wav(track_dir / rel)
        except DatasetError as e:
            violations.append(f"unreadable audio: {rel} ({e})")
            continue
        if wav.sample_rate != rate or wav.sample_width != 2 or wav.channels != 1:
            violations.append(f"bad WAV format in {rel}: {wav.sample_rate} Hz, "
                              f"{8 * wav.sample_width}-bit, {wav.channels} ch")
        audio[rel] = wav.samples

    stems = [audio.get(f"stems_audio/{n}.wav") for n in names]
    mix = audio.get(MIX_NAME)
    if mix is not None and all(s is not None for s in stems):
        if len({len(mix), *(len(s) for s in stems)}) != 1:
            violations.append("audio files differ in length")
        else:
            residual = mix - np.sum(stems, axis=0)
            rms = float(np.sqrt(np.mean(residual ** 2))) if len(mix) else 0.0
            if rms > MIX_CONSISTENCY_RMS:
                violations.append(f"mixture consistency: rms(mix - sum(stems)) = {rms:.2e}")

    ceiling_db = mastering.get("ceiling_db")
    if mix is not None and ceiling_db is not None and len(mix):
        if np.max(np.abs(mix)) > db_to_gain(ceiling_db) + LSB + 1e-12:
            violations.append(f"mix peak {np.max(np.abs(mix)):.6f} above {ceiling_db} dBFS")

    target = mastering.get("target_lufs", target_lufs)
    silent = set(mastering.get("silent_stems", []))
    guard = mastering.get("peak_guard_gain_db", 0.0)
    if target is not None and rate:
        meter = LoudnessMeter(rate)
        for i, samples in enumerate(stems):
            if samples is None or i in silent or len(samples) < meter.block:
                continue
            measured = meter.integrated_loudness(samples)
            if is_silence(measured) or abs(measured - (target + guard)) > LOUDNESS_TOLERANCE_LU:
                violations.append(f"stem {names[i]} loudness {measured:.2f} LUFS, expected {target + guard:.2f}")

    duration = len(mix) / rate if mix is not None and rate else None
    # MIDI sits on the quantized grid; audio adds the microtiming pad after it
    grid = meta.get("grid_s", meta.get("duration_s"))
    if duration is not None and grid is not None and duration < grid - DURATION_TOLERANCE_S:
        violations.append(f"audio lasts {duration:.3f} s, shorter than the {grid:.3f} s score")
    for i, name in enumerate(names):
        midi_rel = f"stems_midi/{name}.mid"
        notes_meta = stem_meta[i].get("num_notes")
        if notes_meta is None:
            violations.append(f"metadata for stem {name} has no note count")
            continue
        if midi_rel not in missing:
            try:
                midi_notes, length = read_midi_notes(track_dir / midi_rel)
            except DatasetError as e:
                violations.append(f"unreadable MIDI: {midi_rel} ({e})")
            else:
                if len(midi_notes) != notes_meta:
                    violations.append(f"{midi_rel}: {len(midi_notes)} notes, metadata lists {notes_meta}")
                if grid is not None and abs(length - grid) > DURATION_TOLERANCE_S:
                    violations.append(f"{midi_rel}: MIDI lasts {length:.3f} s, score {grid:.3f} s")
        expr_rel = f"expression/{name}.csv"
        if expr_rel not in missing:
            rows = count_csv_rows(track_dir / expr_rel)
            if rows != notes_meta:
                violations.append(f"{expr_rel}: {rows} expression records for {notes_meta} notes")

    return TrackReport(meta.get("track_id", track_dir.name), str(track_dir), violations)
