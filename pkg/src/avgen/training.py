"""Denoising score matching, Adam, token-bucketed batching and the training loop."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sde as S
from .conditioner import ConditioningSet, LayerEmbeddings, align_full, align_full_backward, read_embeddings
from .corpus import read_meta
from .layers import ParamTable
from .scorenet import ScoreNet, ScoreNetShape
from .signal import compress, read_wav, stft

log = logging.getLogger(__name__)

MODES = ("av", "audio_only", "shuffled_emb")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_tokens: int = 2000
    steps: int = 2000
    seed: int = 0
    init_seed: int = 0
    mode: str = "av"
    workers: int = 1
    dtype: str = "float32"
    val_draws: int = 4
    val_seed: int = 9999

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if self.mode not in MODES:
            raise TrainingError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_tokens < 1 or self.steps < 0 or self.workers < 1:
            raise TrainingError("max_tokens, steps and workers must be positive")


@dataclass
class TrainItem:
    id: str
    x0: np.ndarray  # compressed clean spectrogram
    y: np.ndarray  # compressed noisy spectrogram
    emb: LayerEmbeddings

    @property
    def tokens(self) -> int:
        return self.y.shape[1]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int, dtype=np.float32) -> "AdamState":
        return cls(np.zeros(size, dtype=dtype), np.zeros(size, dtype=dtype), 0)


# -- objective ----------------------------------------------------------------------


def dsm_loss(score_out: np.ndarray, z: np.ndarray, sigma: float):
    """Mean over bins of |s + z / sigma|^2 and its gradient w.r.t. ``s``."""
    if sigma <= 0:
        raise TrainingError("sigma must be positive")
    if np.shape(score_out) != np.shape(z):
        raise TrainingError(f"shape mismatch {np.shape(score_out)} vs {np.shape(z)}")
    r = np.asarray(score_out) + np.asarray(z) / sigma
    count = r.size
    loss = float(np.sum(r.real**2 + r.imag**2) / count)
    return loss, 2.0 * r / count


def sample_t(rng: np.random.Generator, params: S.SdeParams) -> float:
    return float(rng.uniform(params.t_eps, params.T))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, cfg: TrainConfig, lr: float | None = None) -> None:
    """In-place Adam update with bias correction."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise TrainingError("parameter, gradient and moment shapes differ")
    bad = ~np.isfinite(grads)
    if bad.any():
        raise TrainingError(
            f"non-finite gradient at step {state.step + 1}: {int(bad.sum())} entries, first index {int(np.argmax(bad))}"
        )
    lr = cfg.learning_rate if lr is None else lr
    state.step += 1
    g = grads.astype(state.m.dtype, copy=False)
    state.m *= cfg.beta1
    state.m += (1.0 - cfg.beta1) * g
    state.v *= cfg.beta2
    state.v += (1.0 - cfg.beta2) * g * g
    m_hat = state.m / (1.0 - cfg.beta1**state.step)
    v_hat = state.v / (1.0 - cfg.beta2**state.step)
    params -= (lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(params.dtype, copy=False)


# -- batching ----------------------------------------------------------------------


def bucket_batches(items, max_tokens: int, rng_seed: int = 0, n_buckets: int = 4) -> list[list]:
    """Greedy token-bounded batches over length buckets.

    ``items`` is a sequence of ``(id, token_count)``.  Items are shuffled,
    stably sorted into ``n_buckets`` coarse length buckets, packed greedily in
    that order, and the resulting batches are shuffled.
    """
    items = list(items)
    for item_id, n in items:
        if n > max_tokens:
            raise TrainingError(f"item {item_id!r} has {n} tokens, more than max_tokens={max_tokens}")
    if not items:
        return []
    rng = np.random.default_rng(rng_seed)
    order = [items[i] for i in rng.permutation(len(items))]
    lengths = np.array([n for _, n in order], dtype=float)
    lo, hi = lengths.min(), lengths.max()
    width = (hi - lo) / n_buckets if hi > lo else 1.0
    bucket = np.minimum(((lengths - lo) / width).astype(int), n_buckets - 1)
    order = [order[i] for i in np.argsort(bucket, kind="stable")]
    batches, current, used = [], [], 0
    for item_id, n in order:
        if current and used + n > max_tokens:
            batches.append(current)
            current, used = [], 0
        current.append(item_id)
        used += n
    batches.append(current)
    return [batches[i] for i in rng.permutation(len(batches))]


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 2:
        raise TrainingError("shuffled_emb needs at least two items")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


# -- per-item work -------------------------------------------------------------------


def conditioning_for(item_emb: LayerEmbeddings | None, params: ParamTable, shape: ScoreNetShape, n_frames: int, dtype):
    levels = shape.level_shapes(n_frames)
    if item_emb is None:
        feats = [np.zeros((l.channels, l.frames), dtype=dtype) for l in levels]
        return ConditioningSet(feats, shape.factors), None
    return align_full(item_emb, params, levels, dtype=dtype)


def item_loss_and_grad(net: ScoreNet, params: ParamTable, item: TrainItem, emb, sde: S.SdeParams, rng, with_grad=True):
    t = sample_t(rng, sde)
    x_t, z, sigma = S.sample_forward(item.x0, item.y, t, sde, rng)
    cond, ccache = conditioning_for(emb, params, net.shape, item.tokens, net.dtype)
    score, cache = net.forward(params, x_t, item.y, cond, sigma, float(S.mean_weight(t, sde)))
    loss, dscore = dsm_loss(score, z, sigma)
    if not with_grad:
        return loss, None
    grads = params.zeros_like()
    dfeats = net.backward(dscore, cache, grads)
    if ccache is not None:
        align_full_backward(dfeats, ccache, grads)
    return loss, grads


def _item_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


# -- data ------------------------------------------------------------------------------


def load_items(corpus_dir: str | Path, split: str = "train") -> list[TrainItem]:
    corpus_dir = Path(corpus_dir)
    meta = read_meta(corpus_dir)
    items = []
    for it in meta.split(split):
        try:
            clean = read_wav(corpus_dir / "clean" / f"{it.id}.wav")
            noisy = read_wav(corpus_dir / "noisy" / f"{it.id}.wav")
            emb = read_embeddings(corpus_dir / "emb" / f"{it.id}.ave")
        except (OSError, ValueError) as exc:
            raise TrainingError(f"item {it.id}: {exc}") from exc
        items.append(TrainItem(it.id, compress(stft(clean)).data, compress(stft(noisy)).data, emb))
    if not items:
        raise TrainingError(f"no items in split {split!r} of {corpus_dir}")
    return items


def embeddings_for_mode(items: list[TrainItem], mode: str, rng: np.random.Generator | None = None) -> list:
    """Per-item conditioning embeddings under the given ablation mode."""
    if mode == "audio_only":
        return [None] * len(items)
    if mode == "av":
        return [it.emb for it in items]
    perm = derangement(len(items), rng if rng is not None else np.random.default_rng(0))
    return [items[j].emb.fit_frames(it.emb.n_frames) for it, j in zip(items, perm)]


# -- loops --------------------------------------------------------------------------


@dataclass
class Trainer:
    shape: ScoreNetShape
    sde: S.SdeParams
    cfg: TrainConfig
    params: ParamTable
    state: AdamState
    epoch: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.net = ScoreNet(self.shape, np.dtype(self.cfg.dtype))

    def _batch_grads(self, batch_items, batch_embs, rngs):
        def work(args):
            item, emb, rng = args
            return item_loss_and_grad(self.net, self.params, item, emb, self.sde, rng)

        jobs = list(zip(batch_items, batch_embs, rngs))
        if self.cfg.workers > 1:
            with ThreadPoolExecutor(self.cfg.workers) as pool:
                results = list(pool.map(work, jobs))
        else:
            results = [work(j) for j in jobs]
        total = np.zeros_like(self.params.flat)
        losses = []
        for loss, grads in results:  # fixed-order reduction
            total += grads.flat
            losses.append(loss)
        total /= len(results)
        return float(np.mean(losses)), total

    def train_epoch(self, items: list[TrainItem], max_steps: int | None = None, log_fh=None) -> dict:
        cfg = self.cfg
        by_id = {it.id: i for i, it in enumerate(items)}
        plan = bucket_batches([(it.id, it.tokens) for it in items], cfg.max_tokens, rng_seed=cfg.seed * 100003 + self.epoch)
        embs = embeddings_for_mode(items, cfg.mode, _item_rng(cfg.seed, 7, self.epoch))
        losses, t_start = [], time.perf_counter()
        for batch in plan:
            if max_steps is not None and self.state.step >= max_steps:
                break
            t0 = time.perf_counter()
            idx = [by_id[i] for i in batch]
            rngs = [_item_rng(cfg.seed, self.state.step, i) for i in idx]
            try:
                loss, grad = self._batch_grads([items[i] for i in idx], [embs[i] for i in idx], rngs)
            except (ValueError, FloatingPointError) as exc:
                raise TrainingError(f"batch {batch}: {exc}") from exc
            adam_step(self.params.flat, grad, self.state, cfg)
            losses.append(loss)
            record = {
                "step": self.state.step,
                "epoch": self.epoch,
                "loss": loss,
                "lr": cfg.learning_rate,
                "tokens": int(sum(items[i].tokens for i in idx)),
                "wall_ms": round(1000.0 * (time.perf_counter() - t0), 3),
            }
            self.history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
        self.epoch += 1
        return {
            "epoch": self.epoch,
            "mean_loss": float(np.mean(losses)) if losses else float("nan"),
            "batches": len(losses),
            "seconds": time.perf_counter() - t_start,
        }

    def fit(self, items: list[TrainItem], log_fh=None) -> list[dict]:
        stats = []
        while self.state.step < self.cfg.steps:
            s = self.train_epoch(items, max_steps=self.cfg.steps, log_fh=log_fh)
            log.info("epoch %d: loss %.4g over %d batches (%.1fs)", s["epoch"], s["mean_loss"], s["batches"], s["seconds"])
            stats.append(s)
        return stats


def new_trainer(shape: ScoreNetShape, sde: S.SdeParams, cfg: TrainConfig) -> Trainer:
    from .scorenet import init_params

    params = init_params(shape, cfg.init_seed, dtype=np.dtype(cfg.dtype))
    return Trainer(shape, sde, cfg, params, AdamState.zeros(params.size, params.flat.dtype))


def validate(items: list[TrainItem], params: ParamTable, shape: ScoreNetShape, sde: S.SdeParams, cfg: TrainConfig) -> float:
    """Mean DSM loss on fixed (t, z) draws, comparable across checkpoints."""
    if not items:
        raise TrainingError("empty validation set")
    net = ScoreNet(shape, np.dtype(cfg.dtype))
    embs = embeddings_for_mode(items, cfg.mode, _item_rng(cfg.val_seed, 7))
    losses = []
    for i, (item, emb) in enumerate(zip(items, embs)):
        for j in range(cfg.val_draws):
            loss, _ = item_loss_and_grad(net, params, item, emb, sde, _item_rng(cfg.val_seed, i, j), with_grad=False)
            losses.append(loss)
    return float(np.mean(losses))
