"""
Per-note expression controls and their rendering into framewise synthesis
parameters (f0, amplitude, harmonic distribution, filtered-noise magnitudes),
including the per-note intonation correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np
from scipy import signal

from augment import InstrumentId, PerformanceNote

# ---------------- CONFIG ----------------
EXPRESSION_FIELDS = (
    "volume",
    "volume_fluctuation",
    "volume_peak_position",
    "vibrato",
    "brightness",
    "attack_noise",
)
PRIOR_CONCENTRATION = 20.0
# Prior means per instrument, in EXPRESSION_FIELDS order.
DEFAULT_PRIOR_MEANS = {
    InstrumentId.VIOLIN: (0.60, 0.25, 0.45, 0.55, 0.55, 0.25),
    InstrumentId.VIOLA: (0.55, 0.25, 0.45, 0.50, 0.45, 0.25),
    InstrumentId.CELLO: (0.60, 0.25, 0.40, 0.50, 0.40, 0.30),
    InstrumentId.DOUBLE_BASS: (0.60, 0.20, 0.35, 0.35, 0.30, 0.35),
    InstrumentId.FLUTE: (0.50, 0.30, 0.50, 0.35, 0.35, 0.45),
    InstrumentId.OBOE: (0.55, 0.20, 0.50, 0.30, 0.65, 0.30),
    InstrumentId.CLARINET: (0.50, 0.20, 0.45, 0.10, 0.40, 0.20),
    InstrumentId.SAXOPHONE: (0.60, 0.30, 0.50, 0.40, 0.60, 0.35),
    InstrumentId.BASSOON: (0.55, 0.20, 0.40, 0.20, 0.45, 0.30),
    InstrumentId.TRUMPET: (0.65, 0.20, 0.35, 0.15, 0.70, 0.50),
    InstrumentId.FRENCH_HORN: (0.55, 0.20, 0.45, 0.10, 0.35, 0.35),
    InstrumentId.TROMBONE: (0.60, 0.20, 0.40, 0.10, 0.55, 0.45),
    InstrumentId.TUBA: (0.60, 0.15, 0.40, 0.05, 0.30, 0.40),
}
# Relative weight of even harmonics; clarinet-like bores suppress them.
EVEN_HARMONIC_WEIGHT = {
    InstrumentId.CLARINET: 0.15,
}
# ---------------------------------------


class ExpressionError(ValueError):
    """Raised for invalid expressions, render settings or segment layouts."""


@dataclass(frozen=True)
class NoteExpression:
    volume: float
    volume_fluctuation: float
    volume_peak_position: float
    vibrato: float
    brightness: float
    attack_noise: float

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (0.0 <= value <= 1.0) or math.isnan(value):
                raise ExpressionError(f"{f.name} must lie in [0, 1], got {value}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in EXPRESSION_FIELDS])

    @classmethod
    def from_array(cls, values) -> "NoteExpression":
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class ExpressionPrior:
    """Beta prior per expression field; `means` follow EXPRESSION_FIELDS."""

    means: tuple
    concentration: float = PRIOR_CONCENTRATION

    def __post_init__(self):
        if len(self.means) != len(EXPRESSION_FIELDS):
            raise ExpressionError(f"prior needs {len(EXPRESSION_FIELDS)} means, got {len(self.means)}")
        if any(not 0.0 < m < 1.0 for m in self.means):
            raise ExpressionError("prior means must lie strictly inside (0, 1)")
        if self.concentration <= 0:
            raise ExpressionError("prior concentration must be positive")


DEFAULT_PRIORS = {inst: ExpressionPrior(means) for inst, means in DEFAULT_PRIOR_MEANS.items()}


@dataclass(frozen=True)
class RenderConfig:
    frame_rate: float = 250.0
    num_harmonics: int = 64
    num_noise_bands: int = 65
    vibrato_rate_hz: float = 5.5
    vibrato_depth_st: float = 0.5
    vibrato_delay: float = 0.25      # fraction of the note before vibrato starts
    vibrato_ramp_s: float = 0.2
    volume_range_db: float = 24.0    # volume=0 sits this far below volume=1
    fluctuation_rate_hz: float = 3.0
    fluctuation_depth: float = 0.5
    attack_s: float = 0.02
    release_s: float = 0.03
    envelope_floor: float = 0.6      # envelope level at note start/end relative to the apex
    tilt_dark: float = 2.5           # harmonic roll-off exponent at brightness 0
    tilt_bright: float = 0.5         # ... at brightness 1
    noise_floor: float = 0.002
    attack_noise_gain: float = 0.3
    attack_noise_window_s: float = 0.08
    crossfade_s: float = 0.01

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise ExpressionError("frame_rate must be positive")
        if self.num_harmonics < 1 or self.num_noise_bands < 2:
            raise ExpressionError("need at least 1 harmonic and 2 noise bands")
        if self.tilt_bright >= self.tilt_dark:
            raise ExpressionError("tilt_bright must be below tilt_dark")
        if not 0.0 <= self.envelope_floor <= 1.0 or not 0.0 <= self.fluctuation_depth < 1.0:
            raise ExpressionError("envelope_floor must be in [0, 1] and fluctuation_depth in [0, 1)")
        if self.noise_floor < 0 or self.attack_noise_gain < 0 or self.crossfade_s < 0:
            raise ExpressionError("noise and crossfade settings must be non-negative")


@dataclass(frozen=True)
class IntonationConfig:
    """Per-note f0 offset prior: a sharp-leaning bias plus a slow random walk."""

    bias_mean: float = 0.1
    bias_std: float = 0.1
    walk_std: float = 0.1
    walk_time_s: float = 0.3

    def __post_init__(self):
        if self.bias_std < 0 or self.walk_std < 0 or self.walk_time_s <= 0:
            raise ExpressionError("intonation spreads must be >= 0 and walk_time_s > 0")


@dataclass(frozen=True)
class SynthesisParams:
    frame_rate: float
    f0: np.ndarray                     # semitones, MIDI pitch space
    amplitude: np.ndarray              # linear gain
    harmonic_distribution: np.ndarray  # frames x K, rows sum to 1
    noise_magnitudes: np.ndarray       # frames x B
    start_frame: int = 0

    def __post_init__(self):
        n = len(self.f0)
        if self.frame_rate <= 0:
            raise ExpressionError("frame_rate must be positive")
        if len(self.amplitude) != n or len(self.harmonic_distribution) != n or len(self.noise_magnitudes) != n:
            raise ExpressionError("framewise arrays must share one length")
        if self.harmonic_distribution.ndim != 2 or self.noise_magnitudes.ndim != 2:
            raise ExpressionError("harmonic and noise arrays must be frames x bins")
        if not np.all(np.isfinite(self.f0)):
            raise ExpressionError("f0 must be finite")
        if (self.amplitude < 0).any() or (self.noise_magnitudes < 0).any() or (self.harmonic_distribution < 0).any():
            raise ExpressionError("amplitudes, harmonic weights and noise magnitudes must be non-negative")
        if n and not np.allclose(self.harmonic_distribution.sum(axis=1), 1.0, atol=1e-6):
            raise ExpressionError("harmonic distribution frames must sum to 1")

    @property
    def num_frames(self) -> int:
        return len(self.f0)

    @property
    def end_frame(self) -> int:
        return self.start_frame + self.num_frames

    @property
    def num_harmonics(self) -> int:
        return self.harmonic_distribution.shape[1]

    @property
    def num_noise_bands(self) -> int:
        return self.noise_magnitudes.shape[1]


class PitchCorrectionInputs:
    """f0^Note, the framewise predicted offset f̂0^Δ and the scaling α of one note."""

    def __init__(self, f0_note: int, f0_delta, alpha: float):
        if not 0.0 <= alpha <= 1.0:
            raise ExpressionError(f"alpha must lie in [0, 1], got {alpha}")
        self.f0_note = int(f0_note)
        self.f0_delta = np.asarray(f0_delta, dtype=float)
        self.alpha = float(alpha)

    @property
    def f0_delta_mean(self) -> float:
        if self.f0_delta.size == 0:
            raise ExpressionError("pitch correction needs at least one frame")
        return float(np.mean(self.f0_delta))


class RenderedNote(NamedTuple):
    params: SynthesisParams
    alpha: float
    f0_delta_mean: float
    corrected_mean_offset: float


def generate_expressions(notes, instrument, rng: np.random.Generator, priors=None) -> list[NoteExpression]:
    """Draw one NoteExpression per note from the instrument's Beta priors."""
    notes = list(notes)
    if not notes:
        raise ExpressionError("cannot generate expressions for an empty note list")
    priors = DEFAULT_PRIORS if priors is None else priors
    try:
        prior = priors[InstrumentId(instrument)]
    except (KeyError, ValueError):
        raise ExpressionError(f"no expression prior for instrument {instrument!r}") from None
    means = np.asarray(prior.means)
    a = means * prior.concentration
    b = (1.0 - means) * prior.concentration
    draws = rng.beta(a, b, size=(len(notes), len(EXPRESSION_FIELDS)))
    return [NoteExpression.from_array(row) for row in np.clip(draws, 0.0, 1.0)]


def note_frame_span(onset_s: float, offset_s: float, frame_rate: float) -> tuple[int, int]:
    start = int(round(onset_s * frame_rate))
    end = max(start + 1, int(round(offset_s * frame_rate)))
    return start, end


def harmonic_weights(brightness: float, instrument=None, config: RenderConfig = RenderConfig()) -> np.ndarray:
    k = np.arange(1, config.num_harmonics + 1, dtype=float)
    tilt = config.tilt_dark + (config.tilt_bright - config.tilt_dark) * brightness
    weights = k ** (-tilt)
    if instrument is not None:
        weights[1::2] *= EVEN_HARMONIC_WEIGHT.get(InstrumentId(instrument), 1.0)
    return weights / weights.sum()


def render_synthesis_params(note: PerformanceNote, expr: NoteExpression, frame_rate: float | None = None,
                            config: RenderConfig = RenderConfig()) -> SynthesisParams:
    """
    Rule-based rendering of one note into a synthesis-parameter segment.

    vibrato → sinusoidal f0 modulation after a delay; volume → peak level;
    volume_peak_position → apex of the envelope; volume_fluctuation → slow
    amplitude modulation; brightness → harmonic roll-off; attack_noise →
    decaying noise burst at the onset on top of the noise floor.
    """
    fr = config.frame_rate if frame_rate is None else frame_rate
    if fr <= 0:
        raise ExpressionError(f"frame_rate must be positive, got {fr}")
    start, end = note_frame_span(note.onset_s, note.offset_s, fr)
    n = end - start
    t = np.arange(n) / fr
    dur = n / fr

    f0 = np.full(n, float(note.pitch))
    if expr.vibrato > 0:
        delay = config.vibrato_delay * dur
        ramp = np.clip((t - delay) / config.vibrato_ramp_s, 0.0, 1.0)
        depth = config.vibrato_depth_st * expr.vibrato
        f0 += depth * ramp * np.sin(2 * np.pi * config.vibrato_rate_hz * np.maximum(t - delay, 0.0))

    peak = 10.0 ** (-config.volume_range_db * (1.0 - expr.volume) / 20.0)
    apex = expr.volume_peak_position * dur
    floor = config.envelope_floor
    rise = floor + (1.0 - floor) * t / max(apex, 1e-9)
    fall = 1.0 - (1.0 - floor) * (t - apex) / max(dur - apex, 1e-9)
    shape = np.where(t < apex, rise, fall)
    attack = np.minimum(1.0, (t + 1.0 / fr) / config.attack_s)
    release = np.minimum(1.0, (dur - t) / config.release_s)
    wobble = 1.0 + config.fluctuation_depth * expr.volume_fluctuation * np.sin(2 * np.pi * config.fluctuation_rate_hz * t)
    amplitude = np.clip(peak * shape * attack * release * wobble, 0.0, None)

    harmonics = np.tile(harmonic_weights(expr.brightness, note.instrument, config), (n, 1))

    bands = np.arange(config.num_noise_bands, dtype=float)
    band_shape = 1.0 / (1.0 + bands / (config.num_noise_bands / 8.0))
    window = config.attack_noise_window_s
    burst = np.where(t < window, np.exp(-t / (window / 3.0)), 0.0)
    level = config.noise_floor + config.attack_noise_gain * expr.attack_noise * burst
    noise = amplitude[:, None] * band_shape[None, :] * level[:, None]

    return SynthesisParams(fr, f0, amplitude, harmonics, noise, start_frame=start)


def sample_intonation(num_frames: int, frame_rate: float, rng: np.random.Generator,
                      cfg: IntonationConfig = IntonationConfig()) -> np.ndarray:
    """Framewise f0 offset in semitones: per-note bias plus a one-pole random walk."""
    bias = rng.normal(cfg.bias_mean, cfg.bias_std) if cfg.bias_std > 0 else cfg.bias_mean
    noise = rng.standard_normal(num_frames)
    if cfg.walk_std == 0 or num_frames == 0:
        return np.full(num_frames, bias)
    pole = math.exp(-1.0 / (cfg.walk_time_s * frame_rate))
    gain = math.sqrt(1.0 - pole * pole) * cfg.walk_std
    first = rng.normal(0.0, cfg.walk_std)
    walk, _ = signal.lfilter([gain], [1.0, -pole], noise, zi=[pole * first])
    return bias + walk


def apply_pitch_correction(inp: PitchCorrectionInputs) -> np.ndarray:
    """Return f0^Note + f̂0^Δ − α·f̄0^Δ framewise, in semitones."""
    if inp.f0_delta.size == 0:
        raise ExpressionError("pitch correction needs at least one frame")
    return inp.f0_note + inp.f0_delta - inp.alpha * inp.f0_delta_mean


def render_note(note: PerformanceNote, expr: NoteExpression, rng: np.random.Generator,
                config: RenderConfig = RenderConfig(), intonation: IntonationConfig = IntonationConfig(),
                alpha: float | None = None) -> RenderedNote:
    """
    Render a note, add natural intonation drift and apply pitch correction.

    α is drawn from U[0, 1] once per note; a fixed `alpha` replaces the draw
    but the draw is still consumed so other randomness stays aligned.
    """
    params = render_synthesis_params(note, expr, config=config)
    delta = (params.f0 - note.pitch) + sample_intonation(params.num_frames, params.frame_rate, rng, intonation)
    drawn = float(rng.uniform(0.0, 1.0))
    a = drawn if alpha is None else float(alpha)
    inp = PitchCorrectionInputs(note.pitch, delta, a)
    corrected = apply_pitch_correction(inp)
    return RenderedNote(
        params=replace(params, f0=corrected),
        alpha=a,
        f0_delta_mean=inp.f0_delta_mean,
        corrected_mean_offset=float(np.mean(corrected) - note.pitch),
    )


def stitch_note_segments(segments, track_duration_s: float, crossfade_s: float = 0.01) -> SynthesisParams:
    """
    Lay note segments onto one frame grid covering the whole track.

    Gaps get zero amplitude and noise while f0 and the harmonic distribution
    hold their last values. Contiguous notes blend linearly across a window of
    `crossfade_s` centred on the boundary; notes next to a gap fade in or out
    within their own frames.
    """
    segments = list(segments)
    if not segments:
        raise ExpressionError("need at least one segment to stitch")
    fr = segments[0].frame_rate
    K, B = segments[0].num_harmonics, segments[0].num_noise_bands
    for prev, cur in zip(segments, segments[1:]):
        if cur.frame_rate != fr or cur.num_harmonics != K or cur.num_noise_bands != B:
            raise ExpressionError("segments disagree on frame rate or bin counts")
        if cur.start_frame < prev.end_frame:
            raise ExpressionError(
                f"overlapping segments: frame {cur.start_frame} starts before {prev.end_frame}"
            )

    total = int(math.ceil(track_duration_s * fr - 1e-9))
    f0 = np.full(total, np.nan)
    amp = np.zeros(total)
    harm = np.full((total, K), np.nan)
    noise = np.zeros((total, B))
    xf = int(math.ceil(crossfade_s * fr - 1e-9))

    placed = []
    for seg in segments:
        lo, hi = seg.start_frame, min(seg.end_frame, total)
        if hi <= lo:
            continue
        n = hi - lo
        f0[lo:hi] = seg.f0[:n]
        amp[lo:hi] = seg.amplitude[:n]
        harm[lo:hi] = seg.harmonic_distribution[:n]
        noise[lo:hi] = seg.noise_magnitudes[:n]
        placed.append((lo, hi))

    if xf > 0:
        for i, (lo, hi) in enumerate(placed):
            joined_left = i > 0 and placed[i - 1][1] == lo
            joined_right = i + 1 < len(placed) and placed[i + 1][0] == hi
            m = min(xf, hi - lo)
            ramp = np.arange(1, m + 1) / (m + 1)
            if not joined_left:
                amp[lo:lo + m] *= ramp
                noise[lo:lo + m] *= ramp[:, None]
            if not joined_right:
                amp[hi - m:hi] *= ramp[::-1]
                noise[hi - m:hi] *= ramp[::-1, None]

        half = max(1, xf // 2)
        for (llo, boundary), (rlo, rhi) in zip(placed, placed[1:]):
            if boundary != rlo:
                continue
            h = min(half, boundary - llo, rhi - boundary)
            idx = np.arange(boundary - h, boundary + h)
            w = (idx - (boundary - h) + 0.5) / (2 * h)
            left_idx = np.minimum(idx, boundary - 1)
            right_idx = np.maximum(idx, boundary)
            for arr in (f0, amp):
                arr[idx] = (1 - w) * arr[left_idx] + w * arr[right_idx]
            for arr in (harm, noise):
                arr[idx] = (1 - w)[:, None] * arr[left_idx] + w[:, None] * arr[right_idx]

    # hold f0 and timbre through gaps; leading frames take the first note's values
    voiced = np.nonzero(~np.isnan(f0))[0]
    if voiced.size == 0:
        raise ExpressionError("no segment falls inside the track")
    fill = np.maximum.accumulate(np.where(np.isnan(f0), 0, np.arange(total)))
    fill[:voiced[0]] = voiced[0]
    f0 = f0[fill]
    harm = harm[fill]
    return SynthesisParams(fr, f0, amp, harm, noise, start_frame=0)
