"""Synthetic pseudo-phone speech, coloured noise, and the corpus directory layout.

Clean "speech" is a sequence of harmonic tone complexes, one symbol per
segment, with every segment a whole number of 40 ms label frames.  Each symbol
owns a fundamental frequency and two formant-like spectral bumps.  The
per-frame symbol track doubles as the ground truth for the mock visual
embeddings and for symbol-level WER.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .signal import SAMPLE_RATE, SignalError, Waveform

LABEL_RATE = 25
SAMPLES_PER_LABEL = SAMPLE_RATE // LABEL_RATE  # 640


@dataclass(frozen=True)
class Symbol:
    name: str
    f0: float
    formants: tuple[float, float]
    bandwidths: tuple[float, float]


@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 64
    n_test: int = 16
    min_duration: float = 2.0
    max_duration: float = 4.0
    alphabet_size: int = 12
    alphabet_seed: int = 0
    min_segment_frames: int = 2  # 80 ms
    max_segment_frames: int = 8  # 320 ms
    level_rms: float = 0.05
    snr_low: float = -6.0
    snr_high: float = 12.0
    noise_slope_low: float = -6.0  # dB per octave
    noise_slope_high: float = 0.0
    noise_bursts: int = 3
    embedding_layers: int = 12
    embedding_dim: int = 32
    embedding_noise: float = 0.3
    codebook_seed: int = 1234

    def __post_init__(self):
        if not 2.0 <= self.min_duration <= self.max_duration <= 12.0:
            raise SignalError("clip durations must lie within [2 s, 12 s]")
        if self.alphabet_size < 1:
            raise SignalError("alphabet_size must be >= 1")
        if not 1 <= self.min_segment_frames <= self.max_segment_frames:
            raise SignalError("invalid segment length range")
        if not self.snr_low <= self.snr_high:
            raise SignalError("snr_low must not exceed snr_high")


@dataclass(frozen=True)
class NoiseSpec:
    duration: float
    slope_db_per_octave: float = 0.0
    bursts: int = 0
    burst_gain: float = 2.0


@dataclass
class SegmentLabels:
    """Per-frame symbol indices at 25 Hz plus the alphabet they index."""

    frames: np.ndarray
    names: tuple[str, ...]
    frame_rate: int = LABEL_RATE

    def words(self) -> list[str]:
        return [self.names[i] for i in run_length_collapse(self.frames)]

    def transcript(self) -> str:
        return " ".join(self.words())

    def to_json(self) -> dict:
        return {
            "frame_rate": self.frame_rate,
            "alphabet": list(self.names),
            "frames": [int(v) for v in self.frames],
            "transcript": self.transcript(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SegmentLabels":
        return cls(np.asarray(obj["frames"], dtype=np.int64), tuple(obj["alphabet"]), obj["frame_rate"])


def run_length_collapse(seq) -> list:
    out = []
    for v in seq:
        if not out or out[-1] != v:
            out.append(v)
    return out


def make_alphabet(size: int, seed: int = 0) -> list[Symbol]:
    """Deterministic symbol inventory.

    Formant pairs are spread over a coarse (F1, F2) grid and shuffled so that
    neighbouring indices do not share envelopes; f0 is spread geometrically.
    """
    rng = np.random.default_rng(seed)
    f1_grid = np.linspace(300.0, 1000.0, 4)
    f2_grid = np.linspace(1300.0, 3400.0, max(3, int(np.ceil(size / 4))))
    pairs = [(a, b) for b in f2_grid for a in f1_grid]
    order = rng.permutation(len(pairs))[:size]
    f0s = 100.0 * (2.4 ** (np.arange(size) / max(size - 1, 1)))
    f0s = rng.permutation(f0s)
    symbols = []
    for i in range(size):
        f1, f2 = pairs[order[i]]
        symbols.append(
            Symbol(
                name=f"s{i:02d}",
                f0=float(f0s[i]),
                formants=(float(f1), float(f2)),
                bandwidths=(110.0 + 0.08 * f1, 160.0 + 0.05 * f2),
            )
        )
    return symbols


def symbol_envelope(sym: Symbol, freqs: np.ndarray) -> np.ndarray:
    (f1, f2), (b1, b2) = sym.formants, sym.bandwidths
    env = np.exp(-0.5 * ((freqs - f1) / b1) ** 2) + 0.6 * np.exp(-0.5 * ((freqs - f2) / b2) ** 2)
    return env + 0.02


def render_symbol(sym: Symbol, n_samples: int, rng: np.random.Generator, fade: int = 80) -> np.ndarray:
    """Harmonic tone complex shaped by the symbol's envelope, unit RMS."""
    t = np.arange(n_samples) / SAMPLE_RATE
    n_harm = int(5000.0 // sym.f0)
    harm = sym.f0 * np.arange(1, n_harm + 1)
    amps = symbol_envelope(sym, harm)
    phases = rng.uniform(0.0, 2.0 * np.pi, n_harm)
    x = (amps[:, None] * np.sin(2.0 * np.pi * harm[:, None] * t[None, :] + phases[:, None])).sum(0)
    fade = min(fade, n_samples // 2)
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        x[:fade] *= ramp
        x[-fade:] *= ramp[::-1]
    rms = np.sqrt(np.mean(x**2))
    return x / rms if rms > 0 else x


def _segment_lengths(n_frames: int, spec: CorpusSpec, rng: np.random.Generator) -> list[int]:
    """Segment lengths in label frames, each within [min, max], summing to ``n_frames``."""
    lo, hi = spec.min_segment_frames, spec.max_segment_frames
    if n_frames < lo:
        return [n_frames]
    lengths: list[int] = []
    remaining = n_frames
    while remaining > 0:
        k = int(rng.integers(lo, hi + 1))
        if 0 < remaining - k < lo:
            # never leave a tail too short to be a segment
            k = remaining if remaining <= hi else remaining - lo
        k = min(k, remaining)
        lengths.append(k)
        remaining -= k
    return lengths


def synth_clean(spec: CorpusSpec, rng_seed: int, duration: float | None = None) -> tuple[Waveform, SegmentLabels]:
    """Pseudo-phone clip and its 25 Hz label track.

    ``duration`` defaults to a uniform draw from the corpus duration range and is
    rounded to whole 40 ms frames.
    """
    rng = np.random.default_rng(rng_seed)
    if duration is None:
        duration = float(rng.uniform(spec.min_duration, spec.max_duration))
    if not 2.0 <= duration <= 12.0:
        raise SignalError(f"duration {duration} s outside [2 s, 12 s]")
    alphabet = make_alphabet(spec.alphabet_size, spec.alphabet_seed)
    n_frames = int(round(duration * LABEL_RATE))
    labels = np.empty(n_frames, dtype=np.int64)
    pieces = []
    prev = -1
    pos = 0
    for k in _segment_lengths(n_frames, spec, rng):
        choices = [i for i in range(len(alphabet)) if i != prev] or [0]
        sym_idx = int(choices[rng.integers(len(choices))])
        gain = 10.0 ** (rng.uniform(-3.0, 3.0) / 20.0)
        pieces.append(gain * render_symbol(alphabet[sym_idx], k * SAMPLES_PER_LABEL, rng))
        labels[pos : pos + k] = sym_idx
        pos += k
        prev = sym_idx
    x = np.concatenate(pieces)
    x *= spec.level_rms / np.sqrt(np.mean(x**2))
    return Waveform(x), SegmentLabels(labels, tuple(s.name for s in alphabet))


def synth_noise(spec: NoiseSpec, rng_seed: int) -> Waveform:
    """Gaussian noise with a power-law spectral tilt plus optional modulated bursts."""
    n = int(round(spec.duration * SAMPLE_RATE))
    if n < 1:
        raise SignalError("noise duration must be positive")
    rng = np.random.default_rng(rng_seed)
    white = rng.standard_normal(n)
    spec_w = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    ref = 1000.0
    # amplitude slope in dB/octave
    shape = np.ones_like(freqs)
    nz = freqs > 0
    shape[nz] = (np.maximum(freqs[nz], 50.0) / ref) ** (spec.slope_db_per_octave / (20.0 * np.log10(2.0)))
    shape[~nz] = 0.0 if spec.slope_db_per_octave != 0.0 else 1.0
    x = np.fft.irfft(spec_w * shape, n=n)
    for _ in range(spec.bursts):
        length = int(rng.uniform(0.1, 0.5) * SAMPLE_RATE)
        length = min(length, n)
        start = int(rng.integers(0, n - length + 1))
        env = np.hanning(length) * (1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(3, 8) * np.arange(length) / SAMPLE_RATE))
        x[start : start + length] *= 1.0 + spec.burst_gain * env
    x /= np.sqrt(np.mean(x**2))
    return Waveform(x)


# -- corpus on disk -----------------------------------------------------------


@dataclass
class CorpusItem:
    id: str
    split: str
    duration: float
    snr_db: float
    snr_target_db: float
    clean_seed: int
    noise_seed: int
    mix_seed: int
    noise_slope: float
    gain: float


@dataclass
class CorpusMeta:
    config_hash: str
    seed: int
    items: list[CorpusItem] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed, "items": [asdict(it) for it in self.items]}

    @classmethod
    def from_json(cls, obj: dict) -> "CorpusMeta":
        return cls(obj["config_hash"], obj["seed"], [CorpusItem(**it) for it in obj["items"]])

    def split(self, name: str) -> list[CorpusItem]:
        return [it for it in self.items if it.split == name]


def stratified_snrs(n: int, low: float, high: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` SNRs, each marginally uniform on [low, high], one per equal-width stratum."""
    strata = rng.permutation(n)
    return low + (high - low) * (strata + rng.uniform(0.0, 1.0, n)) / n


def read_meta(corpus_dir: str | Path) -> CorpusMeta:
    with open(Path(corpus_dir) / "meta.json") as fh:
        return CorpusMeta.from_json(json.load(fh))


def read_labels(path: str | Path) -> SegmentLabels:
    with open(path) as fh:
        return SegmentLabels.from_json(json.load(fh))
