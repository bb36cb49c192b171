"""
Harmonic-plus-noise synthesis of framewise synthesis parameters.

The harmonic part is a bank of K phase-accumulating oscillators at integer
multiples of f0; the noise part is white noise shaped per frame by a
linear-phase FIR filter (frequency-sampling design) and overlap-added with
a 50% Hann window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import signal

from expression import SynthesisParams

# ---------------- CONFIG ----------------
DEFAULT_SAMPLE_RATE = 16000
CHUNK_SAMPLES = 8192
# ---------------------------------------


class SynthError(ValueError):
    """Raised for invalid synthesis settings or control signals."""


@dataclass(eq=False)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise SynthError("audio buffers are mono (1-D)")
        if self.sample_rate <= 0:
            raise SynthError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise SynthError("audio contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def peak(self) -> float:
        return float(np.max(np.abs(self.samples))) if len(self.samples) else 0.0

    def scaled(self, gain: float) -> "AudioBuffer":
        return AudioBuffer(self.samples * gain, self.sample_rate)


@dataclass(frozen=True)
class SynthConfig:
    sample_rate: int = DEFAULT_SAMPLE_RATE
    frame_rate: float = 250.0
    num_harmonics: int = 64
    num_noise_bands: int = 65
    fir_taps: int = 257
    window: str = "hann"

    def __post_init__(self):
        if self.num_harmonics < 1:
            raise SynthError("num_harmonics must be >= 1")
        if self.num_noise_bands < 2:
            raise SynthError("num_noise_bands must be >= 2")
        if self.fir_taps < 3 or self.fir_taps % 2 == 0:
            raise SynthError("fir_taps must be odd and >= 3")
        hop_samples(self.sample_rate, self.frame_rate)

    @property
    def hop(self) -> int:
        return hop_samples(self.sample_rate, self.frame_rate)


class ControlSignals(NamedTuple):
    f0_hz: np.ndarray
    amplitude: np.ndarray
    harmonic_frames: np.ndarray  # frames x K, held for `hop` samples each
    hop: int
    sample_rate: int

    def harmonic_weights(self, lo: int, hi: int) -> np.ndarray:
        frames = np.arange(lo, hi) // self.hop
        return self.harmonic_frames[np.minimum(frames, len(self.harmonic_frames) - 1)]


def hop_samples(sample_rate: int, frame_rate: float) -> int:
    hop = sample_rate / frame_rate
    if frame_rate <= 0 or abs(hop - round(hop)) > 1e-9 or round(hop) < 1:
        raise SynthError(f"sample_rate {sample_rate} is not an integer multiple of frame_rate {frame_rate}")
    return int(round(hop))


def midi_to_hz(semitones):
    return 440.0 * 2.0 ** ((np.asarray(semitones, dtype=float) - 69.0) / 12.0)


def upsample_params(p: SynthesisParams, sample_rate: int = DEFAULT_SAMPLE_RATE) -> ControlSignals:
    """Frame → sample controls: f0 (Hz) and amplitude interpolated linearly, harmonic weights held."""
    hop = hop_samples(sample_rate, p.frame_rate)
    n = p.num_frames * hop
    frame_pos = np.arange(p.num_frames) * hop
    pos = np.arange(n)
    f0_hz = np.interp(pos, frame_pos, midi_to_hz(p.f0))
    amplitude = np.interp(pos, frame_pos, p.amplitude)
    return ControlSignals(f0_hz, amplitude, p.harmonic_distribution, hop, sample_rate)


def synthesize_harmonic(controls: ControlSignals, cfg: SynthConfig = SynthConfig()) -> AudioBuffer:
    """
    x[n] = A[n] · Σ_k c_k[n] · sin(k·φ[n]) with φ[n] = φ[n−1] + 2π·f0[n]/sr.

    Harmonics at or above Nyquist are dropped sample by sample and the
    surviving weights renormalized to sum to 1.
    """
    f0 = controls.f0_hz
    sr = controls.sample_rate
    if (f0 < 0).any():
        raise SynthError("f0 must be non-negative")
    K = controls.harmonic_frames.shape[1]
    k = np.arange(1, K + 1, dtype=float)
    phase = np.mod(np.cumsum(2.0 * np.pi * f0 / sr), 2.0 * np.pi)
    out = np.zeros(len(f0))
    for lo in range(0, len(f0), CHUNK_SAMPLES):
        hi = min(lo + CHUNK_SAMPLES, len(f0))
        weights = controls.harmonic_weights(lo, hi)
        audible = f0[lo:hi, None] * k[None, :] < sr / 2.0
        weights = np.where(audible, weights, 0.0)
        total = weights.sum(axis=1, keepdims=True)
        weights = np.divide(weights, total, out=np.zeros_like(weights), where=total > 0)
        partials = np.sin(k[None, :] * phase[lo:hi, None])
        out[lo:hi] = controls.amplitude[lo:hi] * np.einsum("nk,nk->n", weights, partials)
    return AudioBuffer(out, sr)


def band_interpolation_matrix(num_bands: int, num_bins: int) -> np.ndarray:
    """Linear interpolation from `num_bands` equally spaced bands (0..Nyquist) onto `num_bins` grid points."""
    return np.stack([np.interp(np.linspace(0, 1, num_bins), np.linspace(0, 1, num_bands), np.eye(num_bands)[b])
                     for b in range(num_bands)], axis=1)


def design_noise_filters(magnitudes: np.ndarray, numtaps: int, window: str = "hann") -> np.ndarray:
    """
    Frequency-sampling FIR design for every row of `magnitudes` at once.

    Row-for-row identical to ``scipy.signal.firwin2(numtaps, linspace(0, 1, B), row, window=window)``.
    """
    nfreqs = 1 + 2 ** int(math.ceil(math.log2(numtaps)))
    grid = magnitudes @ band_interpolation_matrix(magnitudes.shape[1], nfreqs).T
    x = np.linspace(0.0, 1.0, nfreqs)
    shift = np.exp(-(numtaps - 1) / 2.0 * 1j * np.pi * x)
    taps = np.fft.irfft(grid * shift[None, :], axis=1)[:, :numtaps]
    return taps * signal.get_window(window, numtaps, fftbins=False)[None, :]


def noise_generator(key=(0, 0)) -> np.random.Generator:
    """Counter-based stream keyed by (track seed, stem index)."""
    return np.random.Generator(np.random.Philox(key=np.array([int(k) % 2**64 for k in key], dtype=np.uint64)))


def synthesize_noise(noise_magnitudes: np.ndarray, cfg: SynthConfig = SynthConfig(), key=(0, 0)) -> AudioBuffer:
    """
    Filtered noise: one FIR per frame applied to unit-variance white noise,
    overlap-added with a periodic Hann window of two hops.
    """
    mags = np.asarray(noise_magnitudes, dtype=float)
    if mags.ndim != 2 or mags.shape[1] < 2:
        raise SynthError("noise magnitudes must be frames x bands with at least 2 bands")
    if (mags < 0).any():
        raise SynthError("noise magnitudes must be non-negative")
    hop = cfg.hop
    frames = mags.shape[0]
    n_out = frames * hop
    if frames == 0 or not mags.any():
        return AudioBuffer(np.zeros(n_out), cfg.sample_rate)

    # one extra frame either side so every output sample is covered by two windows
    padded = np.concatenate([mags[:1], mags, mags[-1:]])
    taps = design_noise_filters(padded, cfg.fir_taps, cfg.window)
    block = 2 * hop
    nfft = 1 << int(math.ceil(math.log2(block + cfg.fir_taps - 1)))
    white = noise_generator(key).standard_normal((len(padded) + 1) * hop)
    starts = np.arange(len(padded)) * hop
    blocks = white[starts[:, None] + np.arange(block)[None, :]] * signal.get_window("hann", block)[None, :]
    filtered = np.fft.irfft(np.fft.rfft(blocks, nfft, axis=1) * np.fft.rfft(taps, nfft, axis=1), nfft, axis=1)

    acc = np.zeros(starts[-1] + nfft)
    for start, row in zip(starts, filtered):
        acc[start:start + nfft] += row
    # window centre (hop) + half a hop puts frame i over samples [i*hop, (i+1)*hop); FIR delay is (taps-1)/2
    lead = hop + hop // 2 + (cfg.fir_taps - 1) // 2
    return AudioBuffer(acc[lead:lead + n_out], cfg.sample_rate)


def synthesize_stem(p: SynthesisParams, cfg: SynthConfig = SynthConfig(), key=(0, 0)) -> AudioBuffer:
    if p.num_harmonics != cfg.num_harmonics or p.num_noise_bands != cfg.num_noise_bands:
        raise SynthError(
            f"params carry {p.num_harmonics} harmonics / {p.num_noise_bands} bands, "
            f"config expects {cfg.num_harmonics} / {cfg.num_noise_bands}"
        )
    if p.frame_rate != cfg.frame_rate:
        raise SynthError(f"params frame rate {p.frame_rate} differs from config {cfg.frame_rate}")
    harmonic = synthesize_harmonic(upsample_params(p, cfg.sample_rate), cfg)
    noise = synthesize_noise(p.noise_magnitudes, cfg, key)
    return AudioBuffer(harmonic.samples + noise.samples, cfg.sample_rate)
