"""
Stem mastering: BS.1770-4 integrated loudness, per-stem normalization,
summation to a mix, and a uniform peak guard on mix and stems.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from synth import AudioBuffer

logger = logging.getLogger(__name__)

# ---------------- CONFIG ----------------
TARGET_LUFS = -13.0
PEAK_CEILING_DB = -1.0
BLOCK_SECONDS = 0.4
BLOCK_OVERLAP = 0.75
ABSOLUTE_GATE_LUFS = -70.0
RELATIVE_GATE_LU = -10.0
LOUDNESS_OFFSET = -0.691
SILENCE = float("-inf")  # returned when every block sits below the absolute gate
NORMALIZE_TOLERANCE_LU = 0.01
NORMALIZE_ITERATIONS = 4
TRUE_PEAK_OVERSAMPLING = 4
REFERENCE_RATE = 48000
# ---------------------------------------


class MixdownError(ValueError):
    """Raised for buffers that cannot be measured or mixed."""


class SilentStemError(MixdownError):
    """Raised when a stem has no block above the absolute gate."""


def db_to_gain(db: float) -> float:
    return 10.0 ** (db / 20.0)


def gain_to_db(gain: float) -> float:
    return 20.0 * math.log10(gain)


def is_silence(lufs: float) -> bool:
    return lufs == SILENCE


def k_weighting_sos(sample_rate: int) -> np.ndarray:
    """
    K-weighting (shelving pre-filter + RLB high-pass) as second-order sections.

    Both stages come from their analog prototypes through the bilinear
    transform at `sample_rate`, which reproduces the 48 kHz coefficients
    tabulated in BS.1770-4.
    """
    # stage 1: high shelf
    f0, gain_db, q = 1681.974450955533, 3.999843853973347, 0.7071752369554196
    k = math.tan(math.pi * f0 / sample_rate)
    vh = 10.0 ** (gain_db / 20.0)
    vb = vh ** 0.4996667741545416
    a0 = 1.0 + k / q + k * k
    shelf = [
        (vh + vb * k / q + k * k) / a0,
        2.0 * (k * k - vh) / a0,
        (vh - vb * k / q + k * k) / a0,
        1.0,
        2.0 * (k * k - 1.0) / a0,
        (1.0 - k / q + k * k) / a0,
    ]
    # stage 2: RLB high-pass; the tabulated numerator is [1, -2, 1], so its
    # passband gain is pinned to the 48 kHz value at every rate
    f0, q = 38.13547087602444, 0.5003270373238773
    k = math.tan(math.pi * f0 / sample_rate)
    a0 = 1.0 + k / q + k * k
    k_ref = math.tan(math.pi * f0 / REFERENCE_RATE)
    g = (1.0 + k_ref / q + k_ref * k_ref) / a0
    highpass = [g, -2.0 * g, g, 1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0]
    return np.array([shelf, highpass])


class LoudnessMeter:
    """Gated integrated loudness of a mono buffer (BS.1770-4)."""

    def __init__(self, sample_rate: int, block_s: float = BLOCK_SECONDS, overlap: float = BLOCK_OVERLAP,
                 absolute_gate: float = ABSOLUTE_GATE_LUFS, relative_gate: float = RELATIVE_GATE_LU):
        self.sample_rate = sample_rate
        self.block = int(round(block_s * sample_rate))
        self.hop = int(round(self.block * (1.0 - overlap)))
        self.absolute_gate = absolute_gate
        self.relative_gate = relative_gate
        self.sos = k_weighting_sos(sample_rate)

    def block_powers(self, samples: np.ndarray) -> np.ndarray:
        if len(samples) < self.block:
            raise MixdownError(
                f"need at least {self.block} samples ({self.block / self.sample_rate:.1f} s) to measure loudness"
            )
        weighted = signal.sosfilt(self.sos, np.asarray(samples, dtype=float))
        squared = np.concatenate(([0.0], np.cumsum(weighted * weighted)))
        starts = np.arange(0, len(samples) - self.block + 1, self.hop)
        return (squared[starts + self.block] - squared[starts]) / self.block

    def integrated_loudness(self, samples: np.ndarray) -> float:
        z = self.block_powers(samples)
        with np.errstate(divide="ignore"):
            loudness = LOUDNESS_OFFSET + 10.0 * np.log10(z)
        above_abs = z[loudness > self.absolute_gate]
        if above_abs.size == 0:
            return SILENCE
        relative = LOUDNESS_OFFSET + 10.0 * math.log10(above_abs.mean()) + self.relative_gate
        gated = z[(loudness > self.absolute_gate) & (loudness > relative)]
        return LOUDNESS_OFFSET + 10.0 * math.log10(gated.mean())


def integrated_loudness(a: AudioBuffer) -> float:
    return LoudnessMeter(a.sample_rate).integrated_loudness(a.samples)


def normalize_to_lufs(a: AudioBuffer, target: float = TARGET_LUFS) -> tuple[AudioBuffer, float]:
    """Scale `a` to `target` LUFS; returns the scaled buffer and the applied gain in dB."""
    meter = LoudnessMeter(a.sample_rate)
    measured = meter.integrated_loudness(a.samples)
    if is_silence(measured):
        raise SilentStemError("stem is silent below the absolute gate")
    gain_db = 0.0
    # a gain can move blocks across the absolute gate, so re-measure until settled
    for _ in range(NORMALIZE_ITERATIONS):
        step = target - measured
        if abs(step) <= NORMALIZE_TOLERANCE_LU:
            break
        gain_db += step
        measured = meter.integrated_loudness(a.samples * db_to_gain(gain_db))
    if is_silence(measured) or abs(target - measured) > NORMALIZE_TOLERANCE_LU:
        raise MixdownError(f"loudness did not settle at {target} LUFS after {NORMALIZE_ITERATIONS} "
                           f"gain steps (last measured {measured:.3f})")
    return a.scaled(db_to_gain(gain_db)), gain_db


def peak_level(a: AudioBuffer, mode: str = "sample") -> float:
    if mode == "sample":
        return a.peak()
    if mode == "true":
        up = signal.resample_poly(a.samples, TRUE_PEAK_OVERSAMPLING, 1)
        return float(np.max(np.abs(up))) if len(up) else 0.0
    raise MixdownError(f"unknown peak mode {mode!r}")


@dataclass(eq=False)
class MixResult:
    mix: AudioBuffer
    stems: list
    stem_gains_db: list
    peak_guard_gain_db: float = 0.0
    stem_loudness: list = field(default_factory=list)
    silent_stems: list = field(default_factory=list)


def mix_stems(stems, ceiling_db: float = PEAK_CEILING_DB, peak_mode: str = "sample") -> MixResult:
    """
    Sum stems; if the mix peaks above `ceiling_db`, scale mix and stems by one
    gain so the mix peaks exactly at the ceiling.
    """
    stems = list(stems)
    if not stems:
        raise MixdownError("nothing to mix")
    rate = stems[0].sample_rate
    length = len(stems[0])
    for s in stems[1:]:
        if len(s) != length or s.sample_rate != rate:
            raise MixdownError("stems must share length and sample rate")
    mix = AudioBuffer(np.sum([s.samples for s in stems], axis=0), rate)
    peak = peak_level(mix, peak_mode)
    ceiling = db_to_gain(ceiling_db)
    guard_db = 0.0
    if peak > ceiling:
        gain = ceiling / peak
        guard_db = gain_to_db(gain)
        stems = [s.scaled(gain) for s in stems]
        mix = AudioBuffer(np.sum([s.samples for s in stems], axis=0), rate)
    return MixResult(mix, stems, [0.0] * len(stems), guard_db)


def master_stems(stems, target: float = TARGET_LUFS, ceiling_db: float = PEAK_CEILING_DB,
                 peak_mode: str = "sample") -> MixResult:
    """
    Normalize every stem to `target`, then mix with the peak guard.

    A stem that cannot be measured keeps unity gain and is listed in
    `silent_stems` instead of failing the track.
    """
    normalized, gains, loudness, silent = [], [], [], []
    for index, stem in enumerate(stems):
        try:
            scaled, gain_db = normalize_to_lufs(stem, target)
        except SilentStemError:
            logger.warning("stem %d is silent; keeping unity gain", index)
            scaled, gain_db = stem, 0.0
            silent.append(index)
            loudness.append(None)
        else:
            loudness.append(integrated_loudness(scaled))
        normalized.append(scaled)
        gains.append(gain_db)
    result = mix_stems(normalized, ceiling_db, peak_mode)
    result.stem_gains_db = gains
    result.stem_loudness = loudness
    result.silent_stems = silent
    return result
