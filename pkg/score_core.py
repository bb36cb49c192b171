"""
Four-part chorale scores on a sixteenth-note grid, and their generation by
blocked Gibbs sampling over a pluggable conditional note model.

A score is a 4 x 128 grid (SATB x 8 bars of 16 steps). Every cell holds a
MIDI pitch; there is no rest symbol.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, NamedTuple, Protocol, runtime_checkable

import mido
import numpy as np

logger = logging.getLogger(__name__)

# ---------------- CONFIG ----------------
PARTS = ("soprano", "alto", "tenor", "bass")
NUM_VOICES = 4
STEPS_PER_MEASURE = 16
NUM_MEASURES = 8
NUM_STEPS = NUM_MEASURES * STEPS_PER_MEASURE
STEP_DURATION = Fraction(1, STEPS_PER_MEASURE)  # of a 4/4 measure
DEFAULT_GIBBS_STEPS = 1024
DEFAULT_FINAL_MASK_FRACTION = 1 / 128
DEFAULT_RANGES = {
    "soprano": (60, 81),
    "alto": (53, 74),
    "tenor": (48, 69),
    "bass": (36, 64),
}
DEFAULT_MARGIN = 3
DEFAULT_MAX_ATTEMPTS = 100
# ---------------------------------------


class ScoreError(ValueError):
    """Raised for malformed rolls, masks or range tables."""


class ModelContractError(ScoreError):
    """Raised when a note model returns output that breaks its contract."""


class RejectionLimitExceeded(RuntimeError):
    """Raised when no sampled chorale passes the range check within the retry cap."""


def derive_seed(*keys: int) -> int:
    """Derive a 64-bit seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)
    return int(state[0])


# -------------------------
# Piano roll
# -------------------------
class PianoRoll:
    """Immutable 4 x 128 grid of MIDI pitches in SATB order."""

    __slots__ = ("_grid",)

    step_duration = STEP_DURATION

    def __init__(self, grid):
        arr = np.array(grid, dtype=np.int64, copy=True)
        if arr.shape != (NUM_VOICES, NUM_STEPS):
            raise ScoreError(f"piano roll must be {NUM_VOICES}x{NUM_STEPS}, got {arr.shape}")
        if arr.min() < 0 or arr.max() > 127:
            raise ScoreError("piano roll pitches must lie in [0, 127]")
        arr.setflags(write=False)
        self._grid = arr

    @classmethod
    def filled(cls, pitch: int) -> "PianoRoll":
        return cls(np.full((NUM_VOICES, NUM_STEPS), pitch, dtype=np.int64))

    @property
    def grid(self) -> np.ndarray:
        return self._grid

    def voice(self, index: int) -> np.ndarray:
        return self._grid[index]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PianoRoll):
            return NotImplemented
        return bool(np.array_equal(self._grid, other._grid))

    def __hash__(self) -> int:
        return hash(self._grid.tobytes())

    def __repr__(self) -> str:
        lows = self._grid.min(axis=1).tolist()
        highs = self._grid.max(axis=1).tolist()
        return f"PianoRoll(low={lows}, high={highs})"


class ScoreNote(NamedTuple):
    part: int
    pitch: int
    onset_step: int
    duration_steps: int


# -------------------------
# Configs
# -------------------------
def linear_anneal(num_steps: int, final_fraction: float = DEFAULT_FINAL_MASK_FRACTION) -> Callable[[int], float]:
    """Mask fraction falling linearly from 1.0 at step 0 to `final_fraction` at the last step."""
    def schedule(step: int) -> float:
        if num_steps <= 1:
            return 1.0
        t = min(max(step, 0), num_steps - 1) / (num_steps - 1)
        return 1.0 - (1.0 - final_fraction) * t
    return schedule


@dataclass(frozen=True)
class GibbsConfig:
    num_steps: int = DEFAULT_GIBBS_STEPS
    seed: int = 0
    mask_fraction_schedule: Callable[[int], float] | None = None

    def __post_init__(self):
        if int(self.num_steps) < 1:
            raise ScoreError(f"num_steps must be >= 1, got {self.num_steps}")
        if not 0 <= int(self.seed) < 2**64:
            raise ScoreError("seed must be a 64-bit unsigned integer")
        if self.mask_fraction_schedule is None:
            object.__setattr__(self, "mask_fraction_schedule", linear_anneal(self.num_steps))

    def mask_fraction(self, step: int) -> float:
        fraction = float(self.mask_fraction_schedule(step))
        if not 0.0 < fraction <= 1.0:
            raise ScoreError(f"mask fraction at step {step} must be in (0, 1], got {fraction}")
        return fraction

    def with_seed(self, seed: int) -> "GibbsConfig":
        return GibbsConfig(self.num_steps, seed, self.mask_fraction_schedule)


@dataclass(frozen=True)
class PitchRangeTable:
    """Per-part [min, max] pitch plus a rejection margin in semitones.

    With `inclusive` set, a pitch exactly `margin` semitones outside is still accepted.
    """

    ranges: dict = field(default_factory=lambda: dict(DEFAULT_RANGES))
    margin: int = DEFAULT_MARGIN
    inclusive: bool = True

    def __post_init__(self):
        missing = [p for p in PARTS if p not in self.ranges]
        if missing:
            raise ScoreError(f"range table is missing parts: {missing}")
        for part in PARTS:
            lo, hi = self.ranges[part]
            if not lo < hi:
                raise ScoreError(f"{part}: min_pitch {lo} must be below max_pitch {hi}")
        if self.margin < 0:
            raise ScoreError("margin must be >= 0")

    def bounds(self, part_index: int) -> tuple[int, int]:
        lo, hi = self.ranges[PARTS[part_index]]
        return int(lo), int(hi)

    def allowed(self, part_index: int) -> tuple[int, int]:
        """Lowest and highest accepted pitch for a part."""
        lo, hi = self.bounds(part_index)
        slack = self.margin if self.inclusive else self.margin - 1
        return lo - slack, hi + slack


class RangeCheck(NamedTuple):
    accepted: bool
    violations: list  # (voice, step, pitch)


# -------------------------
# Note models
# -------------------------
@runtime_checkable
class NoteModel(Protocol):
    def conditional_sample(self, roll: PianoRoll, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Return one pitch per masked cell, in `roll.grid[mask]` order."""
        ...


class ConstantNoteModel:
    """Point-mass model: every masked cell becomes `pitch`."""

    def __init__(self, pitch: int):
        self.pitch = int(pitch)

    def conditional_sample(self, roll, mask, rng):
        return np.full(int(np.count_nonzero(mask)), self.pitch, dtype=np.int64)


MAJOR_SCALE = (0, 2, 4, 5, 7, 9, 11)
CONSONANT = frozenset({0, 3, 4, 5, 7, 8, 9})
# log-weight of moving n diatonic steps between adjacent grid steps
STEP_WEIGHTS = np.log(np.array([0.70, 0.15, 0.06, 0.03, 0.03, 0.01, 0.005, 0.015]))
FAR_LEAP_WEIGHT = np.log(0.001)
UNREACHABLE = -1e9


class MarkovNoteModel:
    """Procedural voice-leading model over the diatonic pitches of one major key.

    The conditional score of a candidate pitch for a masked cell adds up:
    a Gaussian prior centred in the part's range, a first-order step-size
    preference towards the unmasked neighbours in time, consonance with the
    other voices at the same step, and penalties for crossing or doubling an
    adjacent voice. Cells are drawn jointly with the Gumbel-max trick.
    """

    def __init__(self, table: PitchRangeTable | None = None, tonic: int = 0,
                 temperature: float = 1.0, outside_penalty: float = 1.5,
                 consonance_bonus: float = 0.5, dissonance_penalty: float = 1.0,
                 crossing_penalty: float = 4.0, unison_penalty: float = 2.0):
        if temperature <= 0:
            raise ScoreError("temperature must be positive")
        self.table = table or PitchRangeTable()
        self.tonic = int(tonic) % 12
        self.temperature = float(temperature)
        self.outside_penalty = outside_penalty
        self.consonance_bonus = consonance_bonus
        self.dissonance_penalty = dissonance_penalty
        self.crossing_penalty = crossing_penalty
        self.unison_penalty = unison_penalty
        self.candidates = np.array([p for p in range(128) if (p - self.tonic) % 12 in MAJOR_SCALE])
        self._range_scores = np.stack([self._part_prior(v) for v in range(NUM_VOICES)])
        consonance = np.array([self.consonance_bonus if i in CONSONANT else -self.dissonance_penalty
                               for i in range(12)])
        self._consonance = consonance

    def _part_prior(self, voice: int) -> np.ndarray:
        lo, hi = self.table.bounds(voice)
        centre = (lo + hi) / 2.0
        sd = (hi - lo) / 4.0
        c = self.candidates.astype(float)
        score = -0.5 * ((c - centre) / sd) ** 2
        outside = np.maximum(0.0, np.maximum(lo - c, c - hi))
        score -= self.outside_penalty * outside
        window = self.table.margin + 4
        score[(c < lo - window) | (c > hi + window)] = UNREACHABLE
        return score

    def _degree(self, pitches: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.candidates, pitches)
        return np.clip(idx, 0, len(self.candidates) - 1)

    def _step_score(self, neighbour_pitch: np.ndarray) -> np.ndarray:
        dist = np.abs(np.arange(len(self.candidates))[None, :] - self._degree(neighbour_pitch)[:, None])
        out = np.full(dist.shape, FAR_LEAP_WEIGHT)
        near = dist < len(STEP_WEIGHTS)
        out[near] = STEP_WEIGHTS[dist[near]]
        return out

    def conditional_sample(self, roll, mask, rng):
        grid = roll.grid
        voices, steps = np.nonzero(mask)
        cand = self.candidates[None, :]
        scores = self._range_scores[voices].copy()

        for offset in (-1, 1):
            nb = steps + offset
            ok = (nb >= 0) & (nb < NUM_STEPS)
            ok[ok] &= ~mask[voices[ok], nb[ok]]
            if ok.any():
                scores[ok] += self._step_score(grid[voices[ok], nb[ok]])

        for other in range(NUM_VOICES):
            ok = (voices != other) & ~mask[other, steps]
            if not ok.any():
                continue
            theirs = grid[other, steps[ok]][:, None]
            interval = np.abs(cand - theirs) % 12
            scores[ok] += self._consonance[interval]
            above = (voices[ok] == other + 1)[:, None]   # other voice sits directly above
            below = (voices[ok] == other - 1)[:, None]
            scores[ok] -= self.crossing_penalty * ((above & (cand > theirs)) | (below & (cand < theirs)))
            scores[ok] -= self.unison_penalty * ((above | below) & (cand == theirs))

        gumbel = rng.gumbel(size=scores.shape)
        choice = np.argmax(scores / self.temperature + gumbel, axis=1)
        return self.candidates[choice]


class ExternalScoreModel:
    """Replays a pre-composed score: masked cells take the stored pitches."""

    def __init__(self, roll: PianoRoll):
        self.roll = roll

    @classmethod
    def from_midi(cls, path) -> "ExternalScoreModel":
        return cls(midi_to_pianoroll(path))

    def conditional_sample(self, roll, mask, rng):
        return self.roll.grid[mask].copy()


def list_score_files(directory) -> list[Path]:
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".mid", ".midi"))
    if not files:
        raise ScoreError(f"no MIDI scores found in {directory}")
    return files


def midi_to_pianoroll(path) -> PianoRoll:
    """Quantize a four-voice MIDI file onto the 4 x 128 grid.

    Voices come from the note-bearing tracks, or from channels when the file
    holds a single track. Rests hold the previous pitch; a leading rest takes
    the first pitch of the voice.
    """
    mid = mido.MidiFile(str(path))
    step_ticks = mid.ticks_per_beat / 4
    voices: dict = {}
    tracks = [t for t in mid.tracks if any(m.type == "note_on" for m in t)]
    by_channel = len(tracks) == 1
    for t_index, track in enumerate(tracks):
        now = 0
        active: dict = {}
        for msg in track:
            now += msg.time
            if msg.type not in ("note_on", "note_off"):
                continue
            key = msg.channel if by_channel else t_index
            if msg.type == "note_on" and msg.velocity > 0:
                active[(key, msg.note)] = now
            elif (key, msg.note) in active:
                start = active.pop((key, msg.note))
                voices.setdefault(key, []).append((start, now, msg.note))
    if len(voices) < NUM_VOICES:
        raise ScoreError(f"{path}: expected {NUM_VOICES} voices, found {len(voices)}")

    ordered = sorted(voices.values(), key=lambda notes: -np.mean([n[2] for n in notes]))[:NUM_VOICES]
    grid = np.zeros((NUM_VOICES, NUM_STEPS), dtype=np.int64)
    for v, notes in enumerate(ordered):
        notes.sort()
        current = notes[0][2]
        for step in range(NUM_STEPS):
            tick = step * step_ticks
            sounding = [pitch for start, end, pitch in notes if start <= tick < end]
            if sounding:
                current = max(sounding)
            grid[v, step] = current
    return PianoRoll(grid)


# -------------------------
# Sampling
# -------------------------
def gibbs_step(roll: PianoRoll, mask, model: NoteModel, rng: np.random.Generator) -> PianoRoll:
    """Resample the masked cells of `roll` from `model`; every other cell is kept."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != roll.grid.shape:
        raise ScoreError(f"mask shape {mask.shape} does not match roll {roll.grid.shape}")
    count = int(np.count_nonzero(mask))
    if count == 0:
        raise ScoreError("mask must select at least one cell")

    pitches = np.asarray(model.conditional_sample(roll, mask, rng))
    if pitches.shape != (count,):
        raise ModelContractError(
            f"{type(model).__name__} returned shape {pitches.shape} for {count} masked cells"
        )
    if not np.issubdtype(pitches.dtype, np.integer) or pitches.min() < 0 or pitches.max() > 127:
        raise ModelContractError(f"{type(model).__name__} returned pitches outside [0, 127]")

    grid = roll.grid.copy()
    grid[mask] = pitches
    return PianoRoll(grid)


def random_mask(fraction: float, rng: np.random.Generator) -> np.ndarray:
    cells = NUM_VOICES * NUM_STEPS
    count = min(cells, max(1, int(round(fraction * cells))))
    mask = np.zeros(cells, dtype=bool)
    mask[rng.choice(cells, size=count, replace=False)] = True
    return mask.reshape(NUM_VOICES, NUM_STEPS)


def sample_chorale(model: NoteModel, config: GibbsConfig) -> PianoRoll:
    """Run `config.num_steps` blocked Gibbs steps from a fully masked roll."""
    rng = np.random.default_rng(config.seed)
    roll = PianoRoll.filled(0)
    full = np.ones((NUM_VOICES, NUM_STEPS), dtype=bool)
    for step in range(config.num_steps):
        fraction = config.mask_fraction(step)
        mask = full if step == 0 else random_mask(fraction, rng)
        roll = gibbs_step(roll, mask, model, rng)
    return roll


def check_ranges(roll: PianoRoll, table: PitchRangeTable) -> RangeCheck:
    violations = []
    for v in range(NUM_VOICES):
        low, high = table.allowed(v)
        pitches = roll.voice(v)
        bad = np.nonzero((pitches < low) | (pitches > high))[0]
        violations.extend((v, int(s), int(pitches[s])) for s in bad)
    return RangeCheck(not violations, violations)


def sample_accepted_chorale(model_factory: Callable[[int], NoteModel], config: GibbsConfig,
                            table: PitchRangeTable,
                            max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> tuple[PianoRoll, int]:
    """
    Sample until a chorale passes `check_ranges`, with a fresh seed per attempt.

    Args:
        model_factory: builds the note model for a given attempt index.
        config: Gibbs settings; attempt `a` runs with seed derive_seed(config.seed, a).
        table: per-part ranges used for rejection.
        max_attempts: retry cap.

    Returns:
        tuple: (accepted roll, number of attempts used)
    """
    if max_attempts < 1:
        raise ScoreError("max_attempts must be >= 1")
    last = None
    for attempt in range(max_attempts):
        roll = sample_chorale(model_factory(attempt), config.with_seed(derive_seed(config.seed, attempt)))
        last = check_ranges(roll, table)
        if last.accepted:
            return roll, attempt + 1
        logger.debug("attempt %d rejected: %d cells out of range", attempt + 1, len(last.violations))
    raise RejectionLimitExceeded(
        f"no chorale within range after {max_attempts} attempts "
        f"(last sample had {len(last.violations)} violations)"
    )


def acceptance_rate(model_factory: Callable[[int], NoteModel], config: GibbsConfig, table: PitchRangeTable,
                    runs: int) -> float:
    """Fraction of `runs` independent samples that pass `check_ranges` on the first try."""
    if runs < 1:
        raise ScoreError("runs must be >= 1")
    accepted = 0
    for run in range(runs):
        roll = sample_chorale(model_factory(run), config.with_seed(derive_seed(config.seed, run)))
        accepted += check_ranges(roll, table).accepted
    rate = accepted / runs
    logger.info("acceptance rate %.3f over %d runs", rate, runs)
    return rate


# -------------------------
# Grid <-> notes
# -------------------------
def pianoroll_to_notes(roll: PianoRoll) -> list[ScoreNote]:
    """Merge runs of equal pitch in each voice into notes."""
    notes = []
    for v in range(NUM_VOICES):
        pitches = roll.voice(v)
        starts = np.concatenate(([0], np.nonzero(np.diff(pitches))[0] + 1))
        ends = np.concatenate((starts[1:], [NUM_STEPS]))
        notes.extend(ScoreNote(v, int(pitches[s]), int(s), int(e - s)) for s, e in zip(starts, ends))
    return notes


def notes_to_pianoroll(notes) -> PianoRoll:
    grid = np.full((NUM_VOICES, NUM_STEPS), -1, dtype=np.int64)
    for note in notes:
        grid[note.part, note.onset_step:note.onset_step + note.duration_steps] = note.pitch
    if (grid < 0).any():
        raise ScoreError("notes do not tile the grid")
    return PianoRoll(grid)
