"""Unified experiment configuration, corpus writing and evaluation reports."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .conditioner import mock_embeddings, write_embeddings
from .corpus import (
    CorpusItem,
    CorpusMeta,
    CorpusSpec,
    NoiseSpec,
    read_labels,
    read_meta,
    stratified_snrs,
    synth_clean,
    synth_noise,
)
from .metrics import SymbolDecoder, label_track_wer, log_spectral_distance, si_sdr
from .sampler import SamplerConfig
from .scorenet import ScoreNetShape
from .sde import SdeParams
from .signal import Waveform, from_pcm16, mix_at_snr, read_wav, snr_db, to_pcm16, write_pcm16
from .training import TrainConfig

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SNR_BINS = ((-6.0, -2.0), (-2.0, 2.0), (2.0, 6.0), (6.0, 12.0))
METRIC_KEYS = ("si_sdr", "lsd", "wer")


class ConfigError(ValueError):
    pass


# Desk-scale overrides for one CPU core: a smaller network, and fewer, smaller
# batches at a higher learning rate so both training runs, both enhancement
# passes and evaluation finish in about 25 minutes. Config sections layer
# over these.
DESK_NET = {"channels": (8, 16, 32)}
DESK_TRAIN = {"learning_rate": 4e-3, "steps": 1200, "max_tokens": 450}


def _build(cls, obj: dict | None, preset: dict | None = None):
    obj = {**(preset or {}), **(obj or {})}
    known = {f.name for f in fields(cls)}
    extra = set(obj) - known
    if extra:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(extra)}")
    for k, v in obj.items():
        if isinstance(v, list):
            obj[k] = tuple(v)
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    sde: SdeParams = field(default_factory=SdeParams)
    net: ScoreNetShape = field(default_factory=lambda: ScoreNetShape(**DESK_NET))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**DESK_TRAIN))
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0

    def __post_init__(self):
        c, n = self.corpus, self.net
        if (c.embedding_layers, c.embedding_dim) != (n.emb_layers, n.emb_dim):
            raise ConfigError("corpus embedding size does not match the network's conditioner input")

    def to_json(self) -> dict:
        d = asdict(self)
        # the worker count changes scheduling, never results, so it stays out of the hash
        del d["train"]["workers"]
        for part in ("corpus", "net", "sampler"):
            d[part] = {k: list(v) if isinstance(v, tuple) else v for k, v in d[part].items()}
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        extra = set(obj) - {"corpus", "sde", "net", "train", "sampler", "seed"}
        if extra:
            raise ConfigError(f"unknown config sections: {sorted(extra)}")
        return cls(
            corpus=_build(CorpusSpec, obj.get("corpus")),
            sde=_build(SdeParams, obj.get("sde")),
            net=_build(ScoreNetShape, obj.get("net"), DESK_NET),
            train=_build(TrainConfig, obj.get("train"), DESK_TRAIN),
            sampler=_build(SamplerConfig, obj.get("sampler")),
            seed=int(obj.get("seed", 0)),
        )

    def canonical(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def with_overrides(self, seed=None, train_steps=None, sampler_steps=None, corrector=None, mode=None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed), train=replace(cfg.train, seed=int(seed)), sampler=replace(cfg.sampler, seed=int(seed)))
        if train_steps is not None:
            cfg = replace(cfg, train=replace(cfg.train, steps=int(train_steps)))
        if sampler_steps is not None:
            cfg = replace(cfg, sampler=replace(cfg.sampler, steps=int(sampler_steps)))
        if corrector is not None:
            cfg = replace(cfg, sampler=replace(cfg.sampler, corrector_steps=int(corrector)))
        if mode is not None:
            cfg = replace(cfg, train=replace(cfg.train, mode=mode))
        return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return ExperimentConfig.from_json(obj)


def dump_json(path: str | Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- corpus ----------------------------------------------------------------------------


def _prepare_dir(out_dir: Path, force: bool, subdirs=()) -> None:
    if out_dir.exists() and not out_dir.is_dir():
        raise FileExistsError(f"{out_dir} exists and is not a directory")
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise FileExistsError(f"{out_dir} is not empty (use --force to overwrite)")
    out_dir.mkdir(parents=True, exist_ok=True)
    for s in subdirs:
        (out_dir / s).mkdir(exist_ok=True)


def _make_pair(spec: CorpusSpec, clean_seed: int, noise_seed: int, mix_seed: int, duration: float, slope: float, snr: float):
    """Quantised clean/noisy int16 pair with the realised SNR measured on the stored samples."""
    clean, labels = synth_clean(spec, clean_seed, duration)
    q_clean = to_pcm16(clean.samples)
    noise = synth_noise(NoiseSpec(clean.duration + 1.0, slope, spec.noise_bursts), noise_seed)
    noisy, gain = mix_at_snr(Waveform(from_pcm16(q_clean)), noise, snr, mix_seed)
    peak = float(np.max(np.abs(noisy.samples)))
    if peak > 0.99:
        # shrink the pair jointly; SNR is unchanged up to quantisation
        scale = 0.99 / peak
        q_clean = to_pcm16(from_pcm16(q_clean) * scale)
        noisy, gain = mix_at_snr(Waveform(from_pcm16(q_clean)), noise, snr, mix_seed)
    q_noisy = to_pcm16(noisy.samples)
    c, y = from_pcm16(q_clean), from_pcm16(q_noisy)
    return q_clean, q_noisy, labels, gain, snr_db(c, y - c)


def write_corpus(cfg: ExperimentConfig, out_dir: str | Path, force: bool = False) -> CorpusMeta:
    spec, out_dir = cfg.corpus, Path(out_dir)
    _prepare_dir(out_dir, force, ("clean", "noisy", "labels", "emb"))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    meta = CorpusMeta(cfg.hash, cfg.seed)
    splits = [("train", spec.n_train, rng.uniform(spec.snr_low, spec.snr_high, spec.n_train))]
    # test SNRs are stratified so every reporting bin is populated
    splits.append(("test", spec.n_test, stratified_snrs(spec.n_test, spec.snr_low, spec.snr_high, rng)))
    for split_no, (split, n, snrs) in enumerate(splits):
        for i in range(n):
            ss = np.random.SeedSequence([cfg.seed, 1 + split_no, i])
            clean_seed, noise_seed, mix_seed, emb_seed = (int(v) for v in ss.generate_state(4))
            item_rng = np.random.default_rng(ss.spawn(1)[0])
            duration = float(item_rng.uniform(spec.min_duration, spec.max_duration))
            slope = float(item_rng.uniform(spec.noise_slope_low, spec.noise_slope_high))
            q_clean, q_noisy, labels, gain, realised = _make_pair(spec, clean_seed, noise_seed, mix_seed, duration, slope, float(snrs[i]))
            item_id = f"{split}_{i:04d}"
            write_pcm16(out_dir / "clean" / f"{item_id}.wav", q_clean)
            write_pcm16(out_dir / "noisy" / f"{item_id}.wav", q_noisy)
            dump_json(out_dir / "labels" / f"{item_id}.json", labels.to_json())
            emb = mock_embeddings(labels, spec.embedding_layers, spec.embedding_dim, spec.codebook_seed, spec.embedding_noise, emb_seed)
            write_embeddings(out_dir / "emb" / f"{item_id}.ave", emb)
            meta.items.append(
                CorpusItem(item_id, split, len(q_clean) / 16000.0, realised, float(snrs[i]), clean_seed, noise_seed, mix_seed, slope, gain)
            )
    dump_json(out_dir / "meta.json", meta.to_json())
    return meta


# -- evaluation ------------------------------------------------------------------------


def snr_bin(snr: float) -> str:
    """Label of the reporting bin; the top bin is closed and values outside the range go to the edge bins."""
    labels = _bin_labels()
    for (_, hi), label in zip(SNR_BINS[:-1], labels):
        if snr < hi:
            return label
    return labels[-1]


def _bin_labels() -> list[str]:
    *head, (lo, hi) = SNR_BINS
    return [f"[{a:g},{b:g})" for a, b in head] + [f"[{lo:g},{hi:g}]"]


def evaluate_file(item: CorpusItem, corpus_dir: Path, est_dir: Path, decoder: SymbolDecoder) -> dict:
    ref = read_wav(corpus_dir / "clean" / f"{item.id}.wav")
    est = read_wav(est_dir / f"{item.id}.wav")
    if len(est) != len(ref):
        raise ValueError(f"{item.id}: estimate has {len(est)} samples, reference {len(ref)}")
    labels = read_labels(corpus_dir / "labels" / f"{item.id}.json")
    w = label_track_wer(labels.words(), decoder.decode(est))
    return {
        "id": item.id,
        "snr_db": item.snr_db,
        "si_sdr": si_sdr(ref, est),
        "lsd": log_spectral_distance(ref, est),
        "wer": w.wer,
        "S": w.S,
        "D": w.D,
        "I": w.I,
        "N": w.N,
    }


def _summary(rows: list[dict]) -> tuple[dict, dict]:
    mean = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_KEYS}
    std = {k: float(np.std([r[k] for r in rows])) for k in METRIC_KEYS}
    return mean, std


def evaluate_dirs(
    corpus_dir: str | Path, est_dir: str | Path, split: str = "test", config_hash: str = "", workers: int = 1, alphabet=(12, 0)
) -> dict:
    """Score every estimate in ``est_dir`` against the corpus references of ``split``."""
    corpus_dir, est_dir = Path(corpus_dir), Path(est_dir)
    items = sorted(read_meta(corpus_dir).split(split), key=lambda it: it.id)
    if not items:
        raise ValueError(f"no items in split {split!r}")
    decoder = SymbolDecoder(*alphabet)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(lambda it: evaluate_file(it, corpus_dir, est_dir, decoder), items))
    else:
        rows = [evaluate_file(it, corpus_dir, est_dir, decoder) for it in items]
    mean, std = _summary(rows)
    edits = sum(r["S"] + r["D"] + r["I"] for r in rows)
    by_bin = {}
    for label in _bin_labels():
        sel = [r for r in rows if snr_bin(r["snr_db"]) == label]
        # empty bins keep the same keys, with null means
        entry = {"count": len(sel), **dict.fromkeys(METRIC_KEYS)}
        if sel:
            entry.update(_summary(sel)[0])
        by_bin[label] = entry
    return {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config_hash,
        "split": split,
        "per_file": rows,
        "mean": mean,
        "std": std,
        "pooled_wer": edits / sum(r["N"] for r in rows),
        "by_snr_bin": by_bin,
    }
