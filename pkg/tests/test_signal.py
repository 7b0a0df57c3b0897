import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avgen.signal import (
    DEFAULT_STFT,
    ComplexSpectrogram,
    SignalError,
    WavFormatError,
    Waveform,
    compress,
    decompress,
    energy,
    istft,
    mix_at_snr,
    read_wav,
    stft,
    write_wav,
)


def _rand_wave(rng, seconds):
    return Waveform(0.1 * rng.standard_normal(int(seconds * 16000)))


def test_stft_geometry():
    assert DEFAULT_STFT.n_bins == 256
    assert DEFAULT_STFT.frame_rate == 100.0
    s = stft(Waveform(np.zeros(16000)))
    assert s.shape == (256, 101)
    assert not s.compressed
    assert np.all(s.data == 0)


def test_stft_short_input_rejected():
    with pytest.raises(SignalError):
        stft(Waveform(np.ones(509)))


def test_stft_matches_direct_dft_on_one_frame():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(4000)
    m = 7  # interior frame, centred on sample 160 * m
    n = np.arange(510)
    seg = x[160 * m - 255 : 160 * m - 255 + 510]
    win = 0.5 - 0.5 * np.cos(2 * np.pi * n / 510)
    k = np.arange(256)[:, None]
    direct = (seg * win * np.exp(-2j * np.pi * k * n / 510)).sum(axis=1)
    np.testing.assert_allclose(stft(Waveform(x)).data[:, m], direct, rtol=0, atol=1e-10)


@pytest.mark.parametrize("b", [5, 40, 128, 200])
def test_sinusoid_peaks_at_its_bin(b):
    t = np.arange(16000) / 16000
    x = np.sin(2 * np.pi * b * 16000 / 510 * t)
    mag = np.abs(stft(Waveform(x)).data)
    assert np.all(np.argmax(mag[:, 3:-3], axis=0) == b)


def test_round_trip_random_lengths():
    rng = np.random.default_rng(0)
    for _ in range(5):
        w = _rand_wave(rng, rng.uniform(2, 12))
        back = istft(stft(w), len(w))
        err = np.linalg.norm(back.samples - w.samples) / np.linalg.norm(w.samples)
        assert err < 1e-4


def test_istft_zero_and_compressed():
    z = ComplexSpectrogram(np.zeros((256, 20), complex))
    assert np.all(istft(z, 3000).samples == 0)
    with pytest.raises(SignalError):
        istft(ComplexSpectrogram(np.zeros((256, 20), complex), compressed=True), 3000)


def test_single_frame_overlap_add_by_hand():
    n = np.arange(510)
    win = 0.5 - 0.5 * np.cos(2 * np.pi * n / 510)
    frame = np.sin(2 * np.pi * 0.01 * n)
    spec = np.zeros((256, 20), complex)
    m = 10
    spec[:, m] = np.fft.rfft(win * frame)
    out = istft(ComplexSpectrogram(spec), 19 * 160 + 1).samples
    # synthesis-normalisation denominator summed over every frame position
    norm = np.zeros(19 * 160 + 510)
    for j in range(20):
        norm[j * 160 : j * 160 + 510] += win**2
    expected = np.zeros_like(norm)
    expected[m * 160 : m * 160 + 510] = win * win * frame
    expected = np.divide(expected, norm, out=np.zeros_like(norm), where=norm > 1e-10)[255 : 255 + len(out)]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_compress_values_and_inverse():
    c = ComplexSpectrogram(np.array([[0.0, np.exp(1j * 0.7), -1.0]]))
    out = compress(c).data
    assert out[0, 0] == 0
    assert abs(abs(out[0, 1]) - 0.15) < 1e-15
    assert abs(np.angle(out[0, 1]) - 0.7) < 1e-12
    rng = np.random.default_rng(1)
    s = ComplexSpectrogram(rng.standard_normal((256, 30)) + 1j * rng.standard_normal((256, 30)))
    back = decompress(compress(s)).data
    assert np.max(np.abs(back - s.data) / np.abs(s.data)) < 1e-9


def test_double_compression_rejected():
    s = compress(ComplexSpectrogram(np.ones((256, 2), complex)))
    with pytest.raises(SignalError):
        compress(s)
    with pytest.raises(SignalError):
        decompress(decompress(s))


def test_flag_mismatch_in_arithmetic():
    a = ComplexSpectrogram(np.ones((256, 2), complex))
    with pytest.raises(SignalError):
        a + compress(a)
    assert np.all((a - a).data == 0)


def test_mix_gain_oracles():
    rng = np.random.default_rng(2)
    clean = Waveform(rng.standard_normal(16000))
    noise = rng.standard_normal(16000)
    noise *= np.sqrt(energy(clean.samples) / energy(noise))
    _, g0 = mix_at_snr(clean, Waveform(noise), 0.0, 0)
    _, g6 = mix_at_snr(clean, Waveform(noise), 6.0, 0)
    assert abs(g0 - 1.0) < 1e-12
    assert abs(g6 - 10 ** (-6 / 20)) < 1e-12
    assert abs(g6 - 0.5012) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.floats(-10, 20), st.integers(0, 2**32 - 1))
def test_mix_hits_requested_snr(snr, seed):
    rng = np.random.default_rng(seed)
    clean = Waveform(rng.standard_normal(3000))
    noise = Waveform(rng.standard_normal(5000))
    mixed, _ = mix_at_snr(clean, noise, snr, seed)
    resid = mixed.samples - clean.samples
    got = 10 * np.log10(energy(clean.samples) / energy(resid))
    assert abs(got - snr) < 1e-9


def test_mix_errors():
    w = Waveform(np.ones(100))
    with pytest.raises(SignalError):
        mix_at_snr(w, Waveform(np.ones(200)), float("inf"))
    with pytest.raises(SignalError):
        mix_at_snr(Waveform(np.zeros(100)), Waveform(np.ones(200)), 0.0)
    with pytest.raises(SignalError):
        mix_at_snr(w, Waveform(np.zeros(200)), 0.0)
    with pytest.raises(SignalError):
        mix_at_snr(w, Waveform(np.ones(50)), 0.0)


@settings(max_examples=10, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_stft_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(2000), rng.standard_normal(2000)
    lhs = stft(Waveform(a * x + b * y)).data
    rhs = a * stft(Waveform(x)).data + b * stft(Waveform(y)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_waveform_invariants():
    with pytest.raises(SignalError):
        Waveform(np.zeros(10), sample_rate=8000)
    with pytest.raises(SignalError):
        Waveform(np.zeros((2, 10)))
    with pytest.raises(SignalError):
        Waveform(np.zeros(0))


def test_wav_round_trip(tmp_path):
    q = np.array([-32768, -1, 0, 1, 32767], dtype=np.int16)
    w = Waveform(q / 32768.0)
    write_wav(tmp_path / "a.wav", w)
    assert np.array_equal(read_wav(tmp_path / "a.wav").samples, w.samples)


@pytest.mark.parametrize("channels,width,rate", [(2, 2, 16000), (1, 1, 16000), (1, 2, 44100)])
def test_wav_format_rejected(tmp_path, channels, width, rate):
    p = tmp_path / "bad.wav"
    with wave.open(str(p), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(width)
        fh.setframerate(rate)
        fh.writeframes(b"\x00" * (channels * width * 100))
    with pytest.raises(WavFormatError):
        read_wav(p)


def test_not_a_wav(tmp_path):
    p = tmp_path / "x.wav"
    p.write_bytes(b"hello")
    with pytest.raises(WavFormatError):
        read_wav(p)


def test_full_scale_overflow_rejected(tmp_path):
    with pytest.raises(SignalError):
        write_wav(tmp_path / "c.wav", Waveform(np.array([1.0])))
