"""SI-SDR, word error rate with S/D/I counts, log-spectral distance, and a symbol decoder."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .corpus import SAMPLES_PER_LABEL, Symbol, make_alphabet, render_symbol, run_length_collapse
from .signal import SAMPLE_RATE, Waveform, stft

SI_SDR_CAP = 100.0


class MetricError(ValueError):
    pass


def _samples(w) -> np.ndarray:
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


def si_sdr(ref, est) -> float:
    """Scale-invariant SDR in dB, capped at 100 dB."""
    r, e = _samples(ref), _samples(est)
    if r.shape != e.shape:
        raise MetricError(f"length mismatch {r.shape} vs {e.shape}")
    rr = float(np.dot(r, r))
    if rr == 0.0:
        raise MetricError("reference has zero energy")
    alpha = float(np.dot(e, r)) / rr
    target = alpha * r
    resid = target - e
    num, den = float(np.dot(target, target)), float(np.dot(resid, resid))
    if den == 0.0:
        return SI_SDR_CAP
    if num == 0.0:
        return -SI_SDR_CAP
    return float(np.clip(10.0 * np.log10(num / den), -SI_SDR_CAP, SI_SDR_CAP))


@dataclass(frozen=True)
class WerResult:
    wer: float
    S: int
    D: int
    I: int
    N: int


def edit_alignment(ref, hyp) -> tuple[int, int, int]:
    """Minimum-cost Levenshtein alignment; returns (S, D, I).

    Among cost-equal alignments the traceback prefers a substitution (or
    match), then an insertion, then a deletion.
    """
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ri = ref[i - 1]
        for j in range(1, m + 1):
            sub = cost[i - 1, j - 1] + (ri != hyp[j - 1])
            cost[i, j] = min(sub, cost[i, j - 1] + 1, cost[i - 1, j] + 1)
    S = D = I = 0
    i, j = n, m
    while i > 0 or j > 0:
        c = cost[i, j]
        if i > 0 and j > 0 and c == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and c == cost[i, j - 1] + 1:
            I += 1
            j -= 1
        else:
            D += 1
            i -= 1
    return int(S), int(D), int(I)


def wer(ref_words, hyp_words) -> WerResult:
    ref, hyp = list(ref_words), list(hyp_words)
    if not ref:
        raise MetricError("reference must contain at least one word")
    S, D, I = edit_alignment(ref, hyp)
    return WerResult((S + D + I) / len(ref), S, D, I, len(ref))


def log_spectral_distance(ref, est, floor: float = 1e-8) -> float:
    r, e = _samples(ref), _samples(est)
    if r.shape != e.shape:
        raise MetricError(f"length mismatch {r.shape} vs {e.shape}")
    a = np.maximum(np.abs(stft(Waveform(r)).data), floor)
    b = np.maximum(np.abs(stft(Waveform(e)).data), floor)
    d = 20.0 * (np.log10(a) - np.log10(b))
    return float(np.sqrt(np.mean(d**2)))


# -- symbol decoder ------------------------------------------------------------------

_N_BANDS = 24
_BAND_EDGES = np.geomspace(150.0, 5500.0, _N_BANDS + 1)


def band_features(x: np.ndarray) -> np.ndarray:
    """Unit-norm band power vectors, one row per 40 ms label frame.

    Linear power keeps low-level noise in the valleys from dominating the
    match the way it does in the log domain.
    """
    x = _samples(x)
    n = len(x) // SAMPLES_PER_LABEL
    if n < 1:
        raise MetricError("signal shorter than one label frame")
    frames = x[: n * SAMPLES_PER_LABEL].reshape(n, SAMPLES_PER_LABEL) * np.hanning(SAMPLES_PER_LABEL)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    freqs = np.fft.rfftfreq(SAMPLES_PER_LABEL, 1.0 / SAMPLE_RATE)
    band = np.searchsorted(_BAND_EDGES, freqs, side="right") - 1
    feats = np.empty((n, _N_BANDS))
    for b in range(_N_BANDS):
        feats[:, b] = power[:, band == b].sum(axis=1)
    if not np.all(np.isfinite(feats)):
        raise MetricError("non-finite band energies")
    norm = np.linalg.norm(feats, axis=1, keepdims=True)
    return feats / np.maximum(norm, 1e-30)


@lru_cache(maxsize=8)
def _templates(alphabet_size: int, alphabet_seed: int) -> np.ndarray:
    rng = np.random.default_rng(12345)
    rows = []
    for sym in make_alphabet(alphabet_size, alphabet_seed):
        x = render_symbol(sym, 8 * SAMPLES_PER_LABEL, rng, fade=0)
        rows.append(band_features(x).mean(axis=0))
    t = np.stack(rows)
    return t / np.linalg.norm(t, axis=1, keepdims=True)


def merge_isolated(labels: np.ndarray, sim: np.ndarray) -> np.ndarray:
    """Reassign single-frame runs to the better-matching neighbour.

    Real segments last at least two label frames, so a one-frame run is
    almost always classification flicker.
    """
    out = np.array(labels, copy=True)
    n = len(out)
    for i in range(n):
        left = out[i - 1] if i > 0 else None
        right = out[i + 1] if i + 1 < n else None
        if out[i] == left or out[i] == right:
            continue
        cands = [c for c in (left, right) if c is not None]
        if cands:
            out[i] = max(cands, key=lambda c: sim[i, c])
    return out


class SymbolDecoder:
    """Cosine nearest-template classification of 25 Hz band-power frames, then run-length merging."""

    def __init__(self, alphabet_size: int = 12, alphabet_seed: int = 0):
        self.templates = _templates(alphabet_size, alphabet_seed)
        self.names = [s.name for s in make_alphabet(alphabet_size, alphabet_seed)]

    def frame_labels(self, x) -> np.ndarray:
        sim = band_features(x) @ self.templates.T
        return merge_isolated(np.argmax(sim, axis=1), sim)

    def decode(self, x) -> list[str]:
        return [self.names[i] for i in run_length_collapse(self.frame_labels(x))]


def label_track_wer(ref_labels, decoded) -> WerResult:
    """WER between the reference symbol sequence and a decoded one.

    Both arguments may be per-frame label tracks (arrays of symbol indices,
    collapsed here) or already-collapsed word lists.
    """
    def words(v):
        if isinstance(v, np.ndarray) or (len(v) and not isinstance(v[0], str)):
            return [f"s{int(i):02d}" for i in run_length_collapse(v)]
        return list(v)

    return wer(words(ref_labels), words(decoded))
