"""Waveforms, STFT front-end, amplitude compression and SNR mixing."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000


class SignalError(ValueError):
    pass


class WavFormatError(SignalError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise SignalError(f"waveform must be mono, got shape {self.samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise SignalError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if len(self.samples) < 1:
            raise SignalError("waveform must contain at least one sample")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """STFT geometry: 510-point periodic Hann window, hop 160, 256 bins.

    Frames are centred: the signal is zero-padded by ``window_len // 2`` on
    both sides, so frame ``m`` is centred on sample ``hop * m`` and a clip of
    ``n`` samples yields ``n // hop + 1`` frames.
    """

    window_len: int = 510
    hop: int = 160
    fft_len: int = 510

    def __post_init__(self):
        if self.fft_len < self.window_len:
            raise SignalError("fft_len must be >= window_len")

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    @property
    def pad(self) -> int:
        return self.window_len // 2

    @property
    def frame_rate(self) -> float:
        return SAMPLE_RATE / self.hop

    def window(self) -> np.ndarray:
        n = np.arange(self.window_len)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.window_len)

    def n_frames(self, n_samples: int) -> int:
        return n_samples // self.hop + 1


DEFAULT_STFT = StftConfig()

# amplitude compression c -> beta * |c|**alpha * exp(i angle(c))
COMPRESS_EXPONENT = 0.5
COMPRESS_FACTOR = 0.15


@dataclass
class ComplexSpectrogram:
    data: np.ndarray
    compressed: bool = False
    frame_rate: float = field(default=DEFAULT_STFT.frame_rate)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise SignalError(f"spectrogram must be F x T, got shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def _check(self, other: "ComplexSpectrogram"):
        if not isinstance(other, ComplexSpectrogram):
            return NotImplemented
        if other.compressed != self.compressed:
            raise SignalError("cannot combine compressed and uncompressed spectrograms")
        if other.shape != self.shape:
            raise SignalError(f"shape mismatch {self.shape} vs {other.shape}")

    def __add__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return ComplexSpectrogram(self.data + other.data, self.compressed, self.frame_rate)

    def __sub__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return ComplexSpectrogram(self.data - other.data, self.compressed, self.frame_rate)

    def __mul__(self, scalar):
        if isinstance(scalar, ComplexSpectrogram):
            return NotImplemented
        return ComplexSpectrogram(self.data * scalar, self.compressed, self.frame_rate)

    __rmul__ = __mul__


def _frames(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    padded = np.pad(x, (cfg.pad, cfg.pad))
    n_frames = cfg.n_frames(len(x))
    view = np.lib.stride_tricks.sliding_window_view(padded, cfg.window_len)
    return view[: (n_frames - 1) * cfg.hop + 1 : cfg.hop]


def stft(w: Waveform, cfg: StftConfig = DEFAULT_STFT) -> ComplexSpectrogram:
    """Complex spectrogram of shape (256, n // hop + 1)."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if len(x) < cfg.window_len:
        raise SignalError(
            f"waveform of {len(x)} samples is shorter than the {cfg.window_len}-sample window"
        )
    frames = _frames(x, cfg) * cfg.window()
    spec = np.fft.rfft(frames, n=cfg.fft_len, axis=-1).T
    return ComplexSpectrogram(np.ascontiguousarray(spec), compressed=False, frame_rate=cfg.frame_rate)


def istft(s: ComplexSpectrogram, out_len: int, cfg: StftConfig = DEFAULT_STFT) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`, trimmed or zero-padded to ``out_len``."""
    if s.compressed:
        raise SignalError("istft requires an uncompressed spectrogram; decompress first")
    if out_len < 1:
        raise SignalError("out_len must be positive")
    data = s.data
    if data.shape[0] != cfg.n_bins:
        raise SignalError(f"expected {cfg.n_bins} frequency bins, got {data.shape[0]}")
    n_frames = data.shape[1]
    win = cfg.window()
    frames = np.fft.irfft(data.T, n=cfg.fft_len, axis=-1)[:, : cfg.window_len] * win
    total = (n_frames - 1) * cfg.hop + cfg.window_len
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = win**2
    for m in range(n_frames):
        start = m * cfg.hop
        out[start : start + cfg.window_len] += frames[m]
        norm[start : start + cfg.window_len] += wsq
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out = out[cfg.pad :]
    if len(out) >= out_len:
        out = out[:out_len]
    else:
        out = np.pad(out, (0, out_len - len(out)))
    return Waveform(out)


def compress(s: ComplexSpectrogram) -> ComplexSpectrogram:
    if s.compressed:
        raise SignalError("spectrogram is already compressed")
    mag = np.abs(s.data)
    out = COMPRESS_FACTOR * mag**COMPRESS_EXPONENT * np.exp(1j * np.angle(s.data))
    return ComplexSpectrogram(out, compressed=True, frame_rate=s.frame_rate)


def decompress(s: ComplexSpectrogram) -> ComplexSpectrogram:
    if not s.compressed:
        raise SignalError("spectrogram is not compressed")
    mag = (np.abs(s.data) / COMPRESS_FACTOR) ** (1.0 / COMPRESS_EXPONENT)
    out = mag * np.exp(1j * np.angle(s.data))
    return ComplexSpectrogram(out, compressed=False, frame_rate=s.frame_rate)


def energy(x: np.ndarray) -> float:
    return float(np.dot(x, x))


def snr_db(clean: np.ndarray, noise: np.ndarray) -> float:
    """10 log10 of the clean-to-noise energy ratio."""
    return float(10.0 * np.log10(energy(clean) / energy(noise)))


def mix_at_snr(
    clean: Waveform, noise: Waveform, snr_db: float, rng_seed: int | None = None
) -> tuple[Waveform, float]:
    """Add a random crop of ``noise`` scaled so the mixture has the requested SNR.

    Returns the mixture and the noise gain. The mixture is not renormalised.
    """
    if not np.isfinite(snr_db):
        raise SignalError("snr_db must be finite")
    n = len(clean)
    if len(noise) < n:
        raise SignalError(f"noise ({len(noise)} samples) shorter than clean ({n} samples)")
    p_clean = energy(clean.samples)
    if p_clean == 0.0:
        raise SignalError("clean signal has zero energy")
    rng = np.random.default_rng(rng_seed)
    offset = int(rng.integers(0, len(noise) - n + 1))
    crop = noise.samples[offset : offset + n]
    p_noise = energy(crop)
    if p_noise == 0.0:
        raise SignalError("noise crop has zero energy")
    gain = float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0))))
    return Waveform(clean.samples + gain * crop), gain


# -- WAV I/O ----------------------------------------------------------------

_PCM_SCALE = 32768.0


def to_pcm16(x: np.ndarray) -> np.ndarray:
    q = np.round(np.asarray(x, dtype=np.float64) * _PCM_SCALE)
    if q.size and (q.max() > 32767 or q.min() < -32768):
        raise SignalError("waveform exceeds 16-bit full scale")
    return q.astype("<i2")


def from_pcm16(q: np.ndarray) -> np.ndarray:
    return q.astype(np.float64) / _PCM_SCALE


def write_wav(path: str | Path, w: Waveform) -> None:
    write_pcm16(path, to_pcm16(w.samples))


def write_pcm16(path: str | Path, pcm: np.ndarray) -> None:
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(np.asarray(pcm, dtype="<i2").tobytes())


def read_pcm16(path: str | Path) -> np.ndarray:
    try:
        fh = wave.open(str(path), "rb")
    except wave.Error as exc:
        raise WavFormatError(f"{path}: not a PCM RIFF/WAVE file ({exc})") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: truncated WAV header") from exc
    with fh:
        if fh.getnchannels() != 1:
            raise WavFormatError(f"{path}: expected mono, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise WavFormatError(f"{path}: expected 16-bit samples, got {8 * fh.getsampwidth()}-bit")
        if fh.getframerate() != SAMPLE_RATE:
            raise WavFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {fh.getframerate()} Hz")
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").copy()


def read_wav(path: str | Path) -> Waveform:
    return Waveform(from_pcm16(read_pcm16(path)))
