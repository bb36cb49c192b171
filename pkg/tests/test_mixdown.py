import numpy as np
import pyloudnorm as pyln
import pytest

from mixdown import (LoudnessMeter, MixdownError, SilentStemError, db_to_gain, integrated_loudness, is_silence,
                     master_stems, mix_stems, normalize_to_lufs, peak_level)
from synth import AudioBuffer

SR = 16000


def sine(hz, seconds=5.0, amplitude=1.0, rate=SR, phase=0.0):
    t = np.arange(int(seconds * rate)) / rate
    return amplitude * np.sin(2 * np.pi * hz * t + phase)


def noise(seconds=5.0, amplitude=0.1, rate=SR, seed=0):
    return amplitude * np.random.default_rng(seed).standard_normal(int(seconds * rate))


def oracle_signals(rate):
    signals = [sine(hz, amplitude=a, rate=rate) for hz in (60, 100, 250, 500, 1000, 4000, 8000, 12000)
               for a in (1.0, 0.1)]
    signals.append(noise(rate=rate, amplitude=0.3))
    signals.append(noise(rate=rate, amplitude=0.01, seed=1))
    # loud burst then quiet tail exercises the relative gate
    signals.append(np.concatenate([sine(1000, 2.0, 0.5, rate), sine(1000, 3.0, 0.005, rate)]))
    signals.append(sine(440, amplitude=0.5, rate=rate) * (1 + 0.5 * sine(2, amplitude=1.0, rate=rate)))
    return signals


def test_full_scale_sine_reference():
    meter = LoudnessMeter(48000)
    assert meter.integrated_loudness(sine(1000, rate=48000)) == pytest.approx(-3.01, abs=0.1)


@pytest.mark.parametrize("index", range(20))
def test_meter_agrees_with_reference_implementation(index):
    signal = oracle_signals(48000)[index]
    ours = LoudnessMeter(48000).integrated_loudness(signal)
    reference = pyln.Meter(48000).integrated_loudness(signal)
    assert ours == pytest.approx(reference, abs=0.1)


def test_silence_sentinel():
    assert is_silence(integrated_loudness(AudioBuffer(np.zeros(SR * 2), SR)))
    assert is_silence(integrated_loudness(AudioBuffer(sine(440, 2.0, 1e-5), SR)))


def test_short_buffer_rejected():
    with pytest.raises(MixdownError):
        integrated_loudness(AudioBuffer(np.zeros(SR // 4), SR))


@pytest.mark.parametrize("make", [lambda: sine(440, amplitude=0.2), lambda: noise(amplitude=0.05)])
def test_gain_shifts_loudness_linearly(make):
    signal = make()
    meter = LoudnessMeter(SR)
    shifted = meter.integrated_loudness(signal * db_to_gain(6.0))
    assert shifted - meter.integrated_loudness(signal) == pytest.approx(6.0, abs=0.05)


def test_normalize_from_minus_twenty():
    signal = sine(440, amplitude=0.3)
    signal *= db_to_gain(-20.0 - LoudnessMeter(SR).integrated_loudness(signal))
    out, gain_db = normalize_to_lufs(AudioBuffer(signal, SR), -13.0)
    assert gain_db == pytest.approx(7.0, abs=0.1)
    assert integrated_loudness(out) == pytest.approx(-13.0, abs=0.1)


def test_normalize_is_idempotent():
    first, _ = normalize_to_lufs(AudioBuffer(noise(amplitude=0.02), SR))
    second, gain_db = normalize_to_lufs(first)
    assert abs(gain_db) <= 0.1
    assert np.allclose(second.samples, first.samples, rtol=0.02)


def test_normalize_silent_stem():
    with pytest.raises(SilentStemError):
        normalize_to_lufs(AudioBuffer(np.zeros(SR), SR))


def stems_peaking_at(peak_db, count=4):
    # 100 Hz at 16 kHz hits the crest exactly on sample 40
    each = db_to_gain(peak_db) / count
    return [AudioBuffer(sine(100, 1.0, each), SR) for _ in range(count)]


def test_quiet_mix_is_untouched():
    stems = stems_peaking_at(-6.0)
    result = mix_stems(stems)
    assert result.peak_guard_gain_db == 0.0
    assert np.array_equal(result.mix.samples, np.sum([s.samples for s in stems], axis=0))


def test_peak_guard_scales_mix_and_stems():
    result = mix_stems(stems_peaking_at(2.5), ceiling_db=-1.0)
    assert result.peak_guard_gain_db == pytest.approx(-3.5, abs=1e-9)
    assert result.mix.peak() == pytest.approx(db_to_gain(-1.0), abs=1e-9)
    assert np.abs(result.mix.samples - np.sum([s.samples for s in result.stems], axis=0)).max() <= 1e-6


def test_true_peak_at_least_sample_peak():
    buf = AudioBuffer(sine(3000, 1.0, 0.5, phase=0.3), SR)
    assert peak_level(buf, "true") >= peak_level(buf, "sample") - 1e-9
    with pytest.raises(MixdownError):
        peak_level(buf, "loudest")


def test_mix_requires_matching_stems():
    with pytest.raises(MixdownError):
        mix_stems([AudioBuffer(np.zeros(10), SR), AudioBuffer(np.zeros(11), SR)])
    with pytest.raises(MixdownError):
        mix_stems([])


def test_master_stems_hits_target():
    stems = [AudioBuffer(sine(hz, 3.0, a), SR) for hz, a in ((523, 0.05), (392, 0.3), (262, 0.01), (131, 0.6))]
    result = master_stems(stems, target=-13.0)
    assert all(lufs == pytest.approx(-13.0, abs=0.1) for lufs in result.stem_loudness)
    guard = result.peak_guard_gain_db
    for stem in result.stems:
        assert integrated_loudness(stem) == pytest.approx(-13.0 + guard, abs=0.1)
    assert result.mix.peak() <= db_to_gain(-1.0) + 1e-9


def test_master_stems_flags_silent_stem():
    stems = [AudioBuffer(sine(440, 2.0, 0.2), SR), AudioBuffer(np.zeros(2 * SR), SR)]
    result = master_stems(stems)
    assert result.silent_stems == [1]
    assert result.stem_gains_db[1] == 0.0
    assert result.stem_loudness[1] is None


def test_normalize_gives_up_when_loudness_never_settles(monkeypatch):
    monkeypatch.setattr(LoudnessMeter, "integrated_loudness", lambda self, samples: -30.0)
    with pytest.raises(MixdownError) as info:
        normalize_to_lufs(AudioBuffer(sine(440, amplitude=0.3), SR), -13.0)
    assert not isinstance(info.value, SilentStemError)
    assert "did not settle" in str(info.value)


def test_master_stems_fails_on_unsettled_stem(monkeypatch):
    monkeypatch.setattr(LoudnessMeter, "integrated_loudness", lambda self, samples: -30.0)
    with pytest.raises(MixdownError):
        master_stems([AudioBuffer(sine(440, 2.0, 0.2), SR), AudioBuffer(sine(220, 2.0, 0.2), SR)])
