"""
MIDI-level augmentation: tempo, microtiming, timing in seconds, and orchestration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from score_core import NUM_STEPS, PARTS, STEPS_PER_MEASURE, ScoreNote

logger = logging.getLogger(__name__)

# ---------------- CONFIG ----------------
MIN_BPM_ALLOWED = 1
MAX_BPM_ALLOWED = 1000
MIN_NOTE_SECONDS = 0.001  # shortest note left by overlap repair
# ---------------------------------------


class AugmentError(ValueError):
    """Raised for invalid augmentation settings or inputs."""


class InstrumentId(str, Enum):
    VIOLIN = "violin"
    VIOLA = "viola"
    CELLO = "cello"
    DOUBLE_BASS = "double_bass"
    FLUTE = "flute"
    OBOE = "oboe"
    CLARINET = "clarinet"
    SAXOPHONE = "saxophone"
    BASSOON = "bassoon"
    TRUMPET = "trumpet"
    FRENCH_HORN = "french_horn"
    TROMBONE = "trombone"
    TUBA = "tuba"


# Written-at-concert-pitch playable ranges (MIDI).
DEFAULT_PLAYABLE_RANGES = {
    InstrumentId.VIOLIN: (55, 100),
    InstrumentId.VIOLA: (48, 88),
    InstrumentId.CELLO: (36, 76),
    InstrumentId.DOUBLE_BASS: (28, 67),
    InstrumentId.FLUTE: (60, 96),
    InstrumentId.OBOE: (58, 91),
    InstrumentId.CLARINET: (50, 91),
    InstrumentId.SAXOPHONE: (49, 81),
    InstrumentId.BASSOON: (34, 75),
    InstrumentId.TRUMPET: (54, 84),
    InstrumentId.FRENCH_HORN: (34, 77),
    InstrumentId.TROMBONE: (40, 72),
    InstrumentId.TUBA: (28, 65),
}


@dataclass(frozen=True)
class TempoConfig:
    min_bpm: int = 50
    max_bpm: int = 150

    def __post_init__(self):
        if self.min_bpm <= 0 or self.max_bpm <= 0:
            raise AugmentError("tempo bounds must be positive")
        if self.min_bpm > self.max_bpm:
            raise AugmentError(f"min_bpm {self.min_bpm} exceeds max_bpm {self.max_bpm}")


@dataclass(frozen=True)
class MicrotimingConfig:
    mu: float = 0.0
    sigma: float = 0.015
    bound: float = 0.050

    def __post_init__(self):
        if self.sigma <= 0:
            raise AugmentError("microtiming sigma must be positive")
        if self.bound <= 0:
            raise AugmentError("microtiming bound must be positive")
        if abs(self.mu) >= self.bound:
            raise AugmentError("microtiming mu must lie inside the bound")


@dataclass(frozen=True)
class EnsembleSpec:
    name: str
    pools: tuple  # one tuple of InstrumentId per SATB part
    stem_labels: tuple | None = None

    def __post_init__(self):
        if len(self.pools) != len(PARTS):
            raise AugmentError(f"{self.name}: need {len(PARTS)} part pools, got {len(self.pools)}")


ENSEMBLES = {
    "string": EnsembleSpec(
        "string",
        ((InstrumentId.VIOLIN,), (InstrumentId.VIOLIN,), (InstrumentId.VIOLA,), (InstrumentId.CELLO,)),
        stem_labels=("violin_1", "violin_2", "viola", "cello"),
    ),
    "brass": EnsembleSpec(
        "brass",
        ((InstrumentId.TRUMPET,), (InstrumentId.FRENCH_HORN,), (InstrumentId.TROMBONE,), (InstrumentId.TUBA,)),
    ),
    "woodwind": EnsembleSpec(
        "woodwind",
        ((InstrumentId.FLUTE,), (InstrumentId.OBOE,), (InstrumentId.CLARINET,), (InstrumentId.BASSOON,)),
    ),
    "random": EnsembleSpec(
        "random",
        (
            (InstrumentId.VIOLIN, InstrumentId.FLUTE, InstrumentId.TRUMPET, InstrumentId.CLARINET,
             InstrumentId.OBOE),
            (InstrumentId.VIOLIN, InstrumentId.VIOLA, InstrumentId.FLUTE, InstrumentId.CLARINET,
             InstrumentId.OBOE, InstrumentId.SAXOPHONE, InstrumentId.TRUMPET, InstrumentId.FRENCH_HORN),
            (InstrumentId.VIOLA, InstrumentId.CELLO, InstrumentId.CLARINET, InstrumentId.SAXOPHONE,
             InstrumentId.TROMBONE, InstrumentId.FRENCH_HORN),
            (InstrumentId.CELLO, InstrumentId.DOUBLE_BASS, InstrumentId.BASSOON, InstrumentId.TUBA),
        ),
    ),
}


@dataclass(frozen=True)
class PerformanceNote:
    part: int
    instrument: InstrumentId | None
    pitch: int
    onset_s: float
    offset_s: float
    quantized_onset_step: int
    quantized_duration_steps: int
    timing_offset_s: float

    def __post_init__(self):
        if not self.onset_s < self.offset_s:
            raise AugmentError(f"note onset {self.onset_s} must precede offset {self.offset_s}")

    @property
    def duration_s(self) -> float:
        return self.offset_s - self.onset_s


@dataclass(frozen=True)
class Orchestration:
    instruments: tuple  # InstrumentId per part
    stem_labels: tuple = field(default=())

    def __post_init__(self):
        if not self.stem_labels:
            object.__setattr__(self, "stem_labels", tuple(i.value for i in self.instruments))


def step_seconds(bpm: int) -> float:
    """Length of one sixteenth step in seconds."""
    return 60.0 / bpm / (STEPS_PER_MEASURE // 4)


def grid_seconds(bpm: int) -> float:
    return NUM_STEPS * step_seconds(bpm)


def sample_tempo(cfg: TempoConfig, rng: np.random.Generator) -> int:
    return int(rng.integers(cfg.min_bpm, cfg.max_bpm + 1))


def sample_microtiming(cfg: MicrotimingConfig, rng: np.random.Generator, size=None):
    """
    Draw from normal(mu, sigma) truncated to [-bound, +bound] by rejection.

    Returns a float for `size=None`, otherwise an array of the given size.
    """
    count = 1 if size is None else int(np.prod(size))
    out = rng.normal(cfg.mu, cfg.sigma, count)
    bad = np.abs(out) > cfg.bound
    while bad.any():
        out[bad] = rng.normal(cfg.mu, cfg.sigma, int(bad.sum()))
        bad = np.abs(out) > cfg.bound
    if size is None:
        return float(out[0])
    return out.reshape(size)


def realize_timing(notes, bpm: int, mt: MicrotimingConfig, rng: np.random.Generator,
                   orchestration: Orchestration | None = None,
                   end_s: float | None = None) -> list[PerformanceNote]:
    """
    Turn grid notes into timed performance notes with per-note microtiming.

    Each note moves by its own offset with its duration kept. Where a note
    would run into its successor, the shared boundary goes to the midpoint of
    the overlap. Onsets are clamped at 0 and offsets at `end_s`. When offsets
    exceed a step (fast tempos), onsets are first pushed back into grid order
    so every voice keeps its note count and sequence.

    Args:
        notes: ScoreNote list tiling the grid per part.
        bpm: tempo; one step lasts (60 / bpm) / 4 seconds.
        mt: microtiming distribution.
        rng: random generator; offsets are drawn in input order.
        orchestration: optional instrument per part to stamp on the notes.
        end_s: track end; defaults to the grid length plus `mt.bound`.

    Returns:
        list: PerformanceNote in input order.
    """
    if not MIN_BPM_ALLOWED <= bpm <= MAX_BPM_ALLOWED:
        raise AugmentError(f"bpm must be in [{MIN_BPM_ALLOWED}, {MAX_BPM_ALLOWED}], got {bpm}")
    notes = list(notes)
    step = step_seconds(bpm)
    if end_s is None:
        end_s = grid_seconds(bpm) + mt.bound
    offsets = sample_microtiming(mt, rng, size=len(notes)) if notes else np.zeros(0)

    onsets = np.array([n.onset_step * step for n in notes]) + offsets
    ends = np.array([(n.onset_step + n.duration_steps) * step for n in notes]) + offsets
    ends = np.minimum(ends, end_s)

    for part in range(len(PARTS)):
        order = sorted((i for i, n in enumerate(notes) if n.part == part), key=lambda i: notes[i].onset_step)
        # onsets keep grid order, at least MIN_NOTE_SECONDS apart, inside [0, end_s)
        floor = 0.0
        for i in order:
            onsets[i] = max(onsets[i], floor)
            floor = onsets[i] + MIN_NOTE_SECONDS
        ceiling = end_s
        for i in reversed(order):
            onsets[i] = min(onsets[i], ceiling - MIN_NOTE_SECONDS)
            ceiling = onsets[i]
        for i in order:
            ends[i] = max(ends[i], onsets[i] + MIN_NOTE_SECONDS)
        for k, (left, right) in enumerate(zip(order, order[1:])):
            if ends[left] <= onsets[right]:
                continue
            limit = onsets[order[k + 2]] if k + 2 < len(order) else end_s
            boundary = 0.5 * (ends[left] + onsets[right])
            boundary = min(boundary, min(ends[right], limit) - MIN_NOTE_SECONDS)
            boundary = max(boundary, onsets[right])
            ends[left] = boundary
            onsets[right] = boundary
    ends = np.minimum(ends, end_s)

    performed = []
    for i, n in enumerate(notes):
        instrument = orchestration.instruments[n.part] if orchestration is not None else None
        performed.append(PerformanceNote(
            part=n.part,
            instrument=instrument,
            pitch=n.pitch,
            onset_s=float(onsets[i]),
            offset_s=float(ends[i]),
            quantized_onset_step=n.onset_step,
            quantized_duration_steps=n.duration_steps,
            timing_offset_s=float(onsets[i] - n.onset_step * step),
        ))
    return performed


def assign_orchestration(spec: EnsembleSpec, rng: np.random.Generator) -> Orchestration:
    """Pick one instrument per SATB part; fixed ensembles never touch `rng`."""
    chosen = []
    for part, pool in zip(PARTS, spec.pools):
        if not pool:
            raise AugmentError(f"{spec.name}: empty instrument pool for {part}")
        if len(pool) == 1:
            chosen.append(InstrumentId(pool[0]))
        else:
            chosen.append(InstrumentId(pool[int(rng.integers(len(pool)))]))
    labels = spec.stem_labels or tuple(i.value for i in chosen)
    return Orchestration(tuple(chosen), tuple(labels))


def fit_register(notes, instrument: InstrumentId, playable_ranges=None) -> tuple[list, int]:
    """
    Octave-shift one part as a whole so it fits the instrument's playable range.

    Returns the (possibly shifted) notes and the shift in semitones. When no
    octave shift fits every note, the shift with the fewest notes outside the
    range wins, ties going to the smaller shift.
    """
    playable_ranges = playable_ranges or DEFAULT_PLAYABLE_RANGES
    lo, hi = playable_ranges[InstrumentId(instrument)]
    notes = list(notes)
    if not notes:
        return notes, 0
    pitches = np.array([n.pitch for n in notes])

    def outside(shift):
        p = pitches + shift
        return int(np.count_nonzero((p < lo) | (p > hi)))

    if outside(0) == 0:
        return notes, 0
    shifts = sorted(range(-48, 49, 12), key=lambda s: (outside(s), abs(s), s))
    best = shifts[0]
    shifted = [n._replace(pitch=n.pitch + best) if isinstance(n, ScoreNote) else replace(n, pitch=n.pitch + best)
               for n in notes]
    if any(not 0 <= n.pitch <= 127 for n in shifted):
        return notes, 0
    logger.debug("shifted %s part by %+d semitones", InstrumentId(instrument).value, best)
    return shifted, best
