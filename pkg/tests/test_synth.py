import numpy as np
import pytest
from scipy import signal

from expression import SynthesisParams
from synth import (AudioBuffer, SynthConfig, SynthError, design_noise_filters, hop_samples, midi_to_hz,
                   synthesize_harmonic, synthesize_noise, synthesize_stem, upsample_params)

SR = 16000
FR = 250.0


def hz_to_midi(hz):
    return 69.0 + 12.0 * np.log2(hz / 440.0)


def constant_params(seconds, f0_hz=440.0, amplitude=0.5, harmonics=1, bands=65, noise=0.0, weights=None):
    n = int(round(seconds * FR))
    dist = np.tile(np.full(harmonics, 1.0 / harmonics) if weights is None else weights, (n, 1))
    return SynthesisParams(
        frame_rate=FR,
        f0=np.full(n, hz_to_midi(f0_hz)),
        amplitude=np.full(n, amplitude),
        harmonic_distribution=dist,
        noise_magnitudes=np.full((n, bands), noise),
    )


def magnitude_db(samples, hz):
    spectrum = np.abs(np.fft.rfft(samples))
    return 20 * np.log10(spectrum[int(round(hz * len(samples) / SR))] + 1e-20)


def test_pitch_to_hz():
    assert midi_to_hz(69) == pytest.approx(440.0)
    assert midi_to_hz(60) == pytest.approx(261.6256, abs=1e-3)


def test_constant_frames_upsample_to_constant_samples():
    controls = upsample_params(constant_params(0.2, f0_hz=300.0, amplitude=0.25))
    assert np.allclose(controls.f0_hz, 300.0)
    assert np.all(controls.amplitude == 0.25)
    assert len(controls.f0_hz) == 0.2 * SR


def test_pure_sine_rms():
    out = synthesize_harmonic(upsample_params(constant_params(1.0)))
    assert np.sqrt(np.mean(out.samples ** 2)) == pytest.approx(0.5 / np.sqrt(2), abs=1e-3)


def test_harmonics_above_nyquist_are_dropped():
    out = synthesize_harmonic(upsample_params(constant_params(1.0, f0_hz=3000.0, amplitude=1.0, harmonics=4)))
    peak = magnitude_db(out.samples, 3000.0)
    assert magnitude_db(out.samples, 6000.0) == pytest.approx(peak, abs=0.5)
    # 9 kHz and 12 kHz would fold back to 7 kHz and 4 kHz
    assert magnitude_db(out.samples, 7000.0) < peak - 60
    assert magnitude_db(out.samples, 4000.0) < peak - 60


def worst_alias_db(samples, f0_hz, harmonics, guard_s=0.1):
    """
    Loudest folded-partial level relative to each STFT column's peak.

    Columns near the moment a partial crosses Nyquist are skipped, as are
    alias frequencies within 400 Hz of a partial that should be there.
    """
    f, t, Z = signal.stft(samples, fs=SR, window="hann", nperseg=1024, noverlap=768, nfft=4096,
                          boundary=None, padded=False)
    mag = np.abs(Z)
    k = np.arange(1, harmonics + 1)
    audible = f0_hz[:, None] * k[None, :] < SR / 2
    crossings = np.nonzero(np.any(np.diff(audible, axis=0), axis=1))[0] / SR
    worst = -np.inf
    for j, centre in enumerate(t):
        if centre < guard_s or centre > len(samples) / SR - guard_s:
            continue
        if crossings.size and np.min(np.abs(crossings - centre)) < guard_s:
            continue
        partials = k * f0_hz[int(centre * SR)]
        legit = partials[partials < SR / 2]
        folded = partials[partials >= SR / 2]
        peak = mag[:, j].max()
        for alias in np.abs(folded - SR * np.round(folded / SR)):
            if np.min(np.abs(legit - alias)) < 400:
                continue
            band = np.abs(f - alias) < 150
            worst = max(worst, 20 * np.log10(mag[band, j].max() / peak + 1e-20))
    return worst


def test_no_aliasing_while_gliding_across_nyquist():
    base = constant_params(3.0, amplitude=1.0, harmonics=3)
    glide = SynthesisParams(FR, np.linspace(hz_to_midi(3000.0), hz_to_midi(5000.0), len(base.f0)), base.amplitude,
                            base.harmonic_distribution, base.noise_magnitudes)
    controls = upsample_params(glide)
    worst = worst_alias_db(synthesize_harmonic(controls).samples, controls.f0_hz, 3)
    assert np.isfinite(worst)
    assert worst < -60


def test_no_aliasing_under_vibrato():
    base = constant_params(2.0, amplitude=1.0, harmonics=3)
    t = np.arange(len(base.f0)) / FR
    vibrato = SynthesisParams(FR, hz_to_midi(4600.0 + 100.0 * np.sin(2 * np.pi * 5.5 * t)), base.amplitude,
                              base.harmonic_distribution, base.noise_magnitudes)
    controls = upsample_params(vibrato)
    worst = worst_alias_db(synthesize_harmonic(controls).samples, controls.f0_hz, 3)
    assert np.isfinite(worst)
    assert worst < -60


def test_uniform_harmonics_have_equal_peaks():
    out = synthesize_harmonic(upsample_params(constant_params(1.0, f0_hz=500.0, amplitude=0.8, harmonics=4)))
    peaks = [magnitude_db(out.samples, k * 500.0) for k in range(1, 5)]
    assert max(peaks) - min(peaks) < 0.5


def test_phase_stays_continuous_under_glide():
    n = int(FR)
    p = constant_params(1.0, amplitude=1.0)
    glide = SynthesisParams(FR, np.linspace(60.0, 84.0, n), p.amplitude, p.harmonic_distribution,
                            p.noise_magnitudes)
    out = synthesize_harmonic(upsample_params(glide)).samples
    f0_max = midi_to_hz(84.0)
    assert np.abs(np.diff(out)).max() <= 2 * np.pi * f0_max / SR + 1e-9


def test_zero_noise_is_silent():
    out = synthesize_noise(np.zeros((100, 65)))
    assert len(out) == 100 * hop_samples(SR, FR)
    assert not out.samples.any()


def test_noise_filters_match_firwin2():
    rng = np.random.default_rng(1)
    mags = rng.uniform(0, 1, size=(6, 65))
    ours = design_noise_filters(mags, 257, "hann")
    for row, taps in zip(mags, ours):
        reference = signal.firwin2(257, np.linspace(0, 1, 65), row, window="hann")
        assert np.allclose(taps, reference, atol=1e-10)


def test_flat_noise_has_flat_spectrum():
    out = synthesize_noise(np.full((2500, 65), 0.1), SynthConfig(), key=(3, 0))
    freqs, psd = signal.welch(out.samples, fs=SR, nperseg=256, detrend=False)
    band = (freqs > 0) & (freqs <= 0.9 * SR / 2)
    level = 10 * np.log10(psd[band])
    assert level.max() - np.median(level) < 1.5
    assert np.median(level) - level.min() < 1.5


def test_noise_power_scales_quadratically():
    mags = np.random.default_rng(2).uniform(0, 0.2, size=(500, 65))
    single = synthesize_noise(mags, key=(5, 1)).samples
    double = synthesize_noise(2 * mags, key=(5, 1)).samples
    assert np.mean(double ** 2) / np.mean(single ** 2) == pytest.approx(4.0, rel=0.01)


def test_noise_stream_is_keyed():
    mags = np.full((50, 65), 0.1)
    a = synthesize_noise(mags, key=(7, 0)).samples
    assert np.array_equal(a, synthesize_noise(mags, key=(7, 0)).samples)
    assert not np.array_equal(a, synthesize_noise(mags, key=(7, 1)).samples)


def test_negative_noise_rejected():
    with pytest.raises(SynthError):
        synthesize_noise(-np.ones((4, 65)))


def test_silent_stem():
    p = constant_params(2.0, amplitude=0.0, harmonics=64, noise=0.0)
    out = synthesize_stem(p)
    assert len(out) == 32000
    assert not out.samples.any()


def test_stem_is_harmonic_plus_noise():
    p = constant_params(0.5, f0_hz=220.0, amplitude=0.3, harmonics=64, noise=0.05)
    cfg = SynthConfig()
    stem = synthesize_stem(p, cfg, key=(1, 2)).samples
    harmonic = synthesize_harmonic(upsample_params(p, cfg.sample_rate), cfg).samples
    noise = synthesize_noise(p.noise_magnitudes, cfg, key=(1, 2)).samples
    assert np.allclose(stem, harmonic + noise)


def test_stem_checks_bin_counts():
    with pytest.raises(SynthError):
        synthesize_stem(constant_params(0.1, harmonics=8))


@pytest.mark.parametrize("kwargs", [{"fir_taps": 256}, {"num_harmonics": 0}, {"frame_rate": 300.0}])
def test_synth_config_validation(kwargs):
    with pytest.raises(SynthError):
        SynthConfig(**kwargs)


def test_audio_buffer_rejects_non_finite():
    with pytest.raises(SynthError):
        AudioBuffer(np.array([0.0, np.nan]))
    assert AudioBuffer(np.array([0.5, -0.75])).peak() == 0.75
