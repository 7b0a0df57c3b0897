"""Layer-embedding aggregation and temporal alignment of conditioning features.

For every score-network level k the conditioning feature is::

    f_k = TempAlign_k( sum_l w_kl e_l ),   w_k = softmax(logits_k)

TempAlign_k linearly interpolates the 25 Hz embeddings up to the 100 Hz
audio frame rate, then (for d_k > 1) applies a depthwise strided Conv1D
with kernel size = stride = d_k, then a pointwise D -> C_k channel adapter.
The result is cropped or hold-padded to the network's level-k time extent.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import SegmentLabels
from .layers import ParamTable, linear_backward, linear_forward, softmax_rows, softmax_rows_backward

EMBEDDING_RATE = 25
AUDIO_PER_VIDEO = 4  # 100 Hz / 25 Hz

AVE_MAGIC = b"AVEM"
AVE_VERSION = 1
_AVE_HEADER = struct.Struct("<4sIIII")
_AVE_MAX_VALUES = 1 << 31


class ConditionerError(ValueError):
    pass


class AveFormatError(ConditionerError):
    pass


@dataclass
class LayerEmbeddings:
    """L x T_v x D embeddings at 25 Hz."""

    data: np.ndarray
    frame_rate: int = EMBEDDING_RATE

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ConditionerError(f"embeddings must be non-empty L x T_v x D, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ConditionerError("embeddings contain non-finite values")

    @property
    def n_layers(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def fit_frames(self, n_frames: int) -> "LayerEmbeddings":
        """Crop, or tile cyclically, along time to exactly ``n_frames``."""
        idx = np.arange(n_frames) % self.n_frames
        return LayerEmbeddings(self.data[:, idx], self.frame_rate)


@dataclass
class AggregatorWeights:
    logits: np.ndarray  # K x L

    @property
    def weights(self) -> np.ndarray:
        return softmax_rows(np.asarray(self.logits, dtype=np.float64))


@dataclass(frozen=True)
class LevelShape:
    channels: int
    frames: int
    factor: int


@dataclass
class ConditioningSet:
    features: list  # K arrays, C_k x T_k
    factors: tuple

    def __len__(self):
        return len(self.features)

    def zeros_like(self) -> "ConditioningSet":
        return ConditioningSet([np.zeros_like(f) for f in self.features], self.factors)


# -- elementary operations ----------------------------------------------------------


def aggregate(e: LayerEmbeddings, w, k: int) -> np.ndarray:
    """Convex combination of the layers with row ``k`` of the simplex weights; returns T_v x D."""
    weights = w.weights if isinstance(w, AggregatorWeights) else np.asarray(w)
    if not 0 <= k < weights.shape[0]:
        raise ConditionerError(f"level {k} out of range for {weights.shape[0]} levels")
    row = weights[k]
    if row.shape[0] != e.n_layers:
        raise ConditionerError(f"{row.shape[0]} weights for {e.n_layers} layers")
    return np.tensordot(row, e.data.astype(np.float64), axes=(0, 0))


def _interp_index(n_in: int, factor: int):
    pos = np.arange(n_in * factor) / factor
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = np.where(lo == n_in - 1, 0.0, pos - lo)
    return lo, hi, frac


def temp_align_up(x: np.ndarray, factor: int = AUDIO_PER_VIDEO) -> np.ndarray:
    """Linear interpolation along the last axis; input frame v lands on output frame factor*v.

    Output has ``factor * T`` frames; values past the last anchor hold the last input frame.
    """
    x = np.asarray(x)
    if x.shape[-1] < 1:
        raise ConditionerError("cannot upsample an empty series")
    if factor < 1 or int(factor) != factor:
        raise ConditionerError("upsampling factor must be a positive integer")
    lo, hi, frac = _interp_index(x.shape[-1], int(factor))
    return x[..., lo] * (1.0 - frac) + x[..., hi] * frac


def temp_align_up_backward(dout: np.ndarray, n_in: int, factor: int = AUDIO_PER_VIDEO) -> np.ndarray:
    lo, hi, frac = _interp_index(n_in, factor)
    dx = np.zeros(dout.shape[:-1] + (n_in,), dtype=dout.dtype)
    np.add.at(dx, (..., lo), dout * (1.0 - frac))
    np.add.at(dx, (..., hi), dout * frac)
    return dx


def temp_align_down(x: np.ndarray, d: int, kernel: np.ndarray) -> np.ndarray:
    """Non-overlapping strided Conv1D (kernel size = stride = d) along the last axis.

    ``kernel`` is either shape (d,) shared by all channels or (C, d) depthwise.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    if d < 2:
        raise ConditionerError("downsampling factor must be >= 2")
    if kernel.shape[-1] != d:
        raise ConditionerError(f"kernel size {kernel.shape[-1]} must equal stride {d}")
    n_out = x.shape[-1] // d
    if n_out < 1:
        raise ConditionerError(f"series of length {x.shape[-1]} shorter than factor {d}")
    blocks = x[..., : n_out * d].reshape(x.shape[:-1] + (n_out, d))
    if kernel.ndim == 1:
        return blocks @ kernel
    return np.einsum("ctd,cd->ct", blocks, kernel)


def temp_align_down_backward(dout: np.ndarray, x: np.ndarray, d: int, kernel: np.ndarray):
    n_out = dout.shape[-1]
    blocks = x[..., : n_out * d].reshape(x.shape[:-1] + (n_out, d))
    dkernel = np.einsum("ct,ctd->cd", dout, blocks)
    dblocks = dout[..., None] * kernel[:, None, :]
    dx = np.zeros_like(x, dtype=dout.dtype)
    dx[..., : n_out * d] = dblocks.reshape(x.shape[:-1] + (n_out * d,))
    return dx, dkernel


def fit_length(x: np.ndarray, n: int) -> np.ndarray:
    """Crop, or hold-pad with the last frame, along the last axis."""
    if x.shape[-1] >= n:
        return x[..., :n]
    pad = np.repeat(x[..., -1:], n - x.shape[-1], axis=-1)
    return np.concatenate([x, pad], axis=-1)


def fit_length_backward(dout: np.ndarray, n_in: int) -> np.ndarray:
    dx = np.zeros(dout.shape[:-1] + (n_in,), dtype=dout.dtype)
    keep = min(n_in, dout.shape[-1])
    dx[..., :keep] = dout[..., :keep]
    if dout.shape[-1] > n_in:
        dx[..., -1] += dout[..., n_in:].sum(axis=-1)
    return dx


# -- trainable aligner ---------------------------------------------------------------


def conditioner_param_shapes(n_layers: int, dim: int, channels, factors) -> "OrderedDict[str, tuple]":
    shapes = OrderedDict()
    shapes["agg.logits"] = (len(channels), n_layers)
    for k, (c, d) in enumerate(zip(channels, factors)):
        if d > 1:
            shapes[f"align{k}.kernel"] = (dim, d)
        shapes[f"align{k}.adapter.w"] = (c, dim)
        shapes[f"align{k}.adapter.b"] = (c,)
    return shapes


def init_conditioner_params(params: ParamTable, factors, rng: np.random.Generator) -> None:
    params["agg.logits"][...] = 0.0
    for k, d in enumerate(factors):
        if d > 1:
            params[f"align{k}.kernel"][...] = 1.0 / d
        w = params[f"align{k}.adapter.w"]
        w[...] = rng.standard_normal(w.shape) / np.sqrt(w.shape[1])
        params[f"align{k}.adapter.b"][...] = 0.0


def align_full(e: LayerEmbeddings, params: ParamTable, net_shape, dtype=np.float64):
    """Build one conditioning feature per network level.

    ``net_shape`` is a sequence of :class:`LevelShape`.  Returns the
    :class:`ConditioningSet` and a cache for :func:`align_full_backward`.
    """
    logits = params["agg.logits"]
    if logits.shape != (len(net_shape), e.n_layers):
        raise ConditionerError(f"logits shape {logits.shape} does not match {len(net_shape)} levels x {e.n_layers} layers")
    weights = softmax_rows(logits.astype(dtype))
    emb = e.data.astype(dtype, copy=False)
    feats = []
    caches = []
    for k, lvl in enumerate(net_shape):
        agg = np.tensordot(weights[k], emb, axes=(0, 0)).T  # D x T_v
        up = temp_align_up(agg, AUDIO_PER_VIDEO)
        if lvl.factor > 1:
            kernel = params[f"align{k}.kernel"].astype(dtype)
            down = temp_align_down(up, lvl.factor, kernel)
        else:
            kernel = None
            down = up
        adapted, lin_cache = linear_forward(down, params[f"align{k}.adapter.w"], params[f"align{k}.adapter.b"])
        if adapted.shape[0] != lvl.channels:
            raise ConditionerError(f"level {k}: adapter gives {adapted.shape[0]} channels, need {lvl.channels}")
        feats.append(fit_length(adapted, lvl.frames))
        caches.append((up, kernel, down.shape[-1], lin_cache))
    cond = ConditioningSet(feats, tuple(l.factor for l in net_shape))
    return cond, (e, weights, emb, net_shape, caches)


def align_full_backward(dfeats, cache, grads: ParamTable) -> None:
    """Accumulate gradients of the conditioner parameters into ``grads``."""
    e, weights, emb, net_shape, caches = cache
    dweights = np.zeros_like(weights)
    for k, lvl in enumerate(net_shape):
        up, kernel, n_down, lin_cache = caches[k]
        dadapted = fit_length_backward(dfeats[k], n_down)
        ddown, dw, db = linear_backward(dadapted, lin_cache)
        grads.accumulate(f"align{k}.adapter.w", dw)
        grads.accumulate(f"align{k}.adapter.b", db)
        if lvl.factor > 1:
            dup, dkernel = temp_align_down_backward(ddown, up, lvl.factor, kernel)
            grads.accumulate(f"align{k}.kernel", dkernel)
        else:
            dup = ddown
        dagg = temp_align_up_backward(dup, e.n_frames, AUDIO_PER_VIDEO)  # D x T_v
        dweights[k] = np.einsum("ltd,dt->l", emb, dagg)
    grads.accumulate("agg.logits", softmax_rows_backward(dweights, weights))


# -- mock embedding provider ---------------------------------------------------------


def make_codebook(n_symbols: int, n_layers: int, dim: int, seed: int) -> np.ndarray:
    """L x A x D codewords with unit RMS entries; independent per layer."""
    rng = np.random.default_rng(seed)
    cb = rng.standard_normal((n_layers, n_symbols, dim))
    cb /= np.sqrt(np.mean(cb**2, axis=-1, keepdims=True))
    return cb


def mock_embeddings(
    labels: SegmentLabels,
    n_layers: int = 12,
    dim: int = 32,
    codebook_seed: int = 1234,
    noise_level: float = 0.3,
    rng_seed: int = 0,
) -> LayerEmbeddings:
    """Stand-in for a visual speech encoder: a noisy per-layer codeword per label frame."""
    frames = np.asarray(labels.frames)
    n_sym = len(labels.names)
    if frames.size == 0:
        raise ConditionerError("empty label track")
    if frames.min() < 0 or frames.max() >= n_sym:
        raise ConditionerError(f"label index outside alphabet of size {n_sym}")
    cb = make_codebook(n_sym, n_layers, dim, codebook_seed)
    rng = np.random.default_rng(rng_seed)
    data = cb[:, frames, :] + noise_level * rng.standard_normal((n_layers, len(frames), dim))
    return LayerEmbeddings(data.astype(np.float32))


# -- .ave file format -----------------------------------------------------------------


def write_embeddings(path: str | Path, e: LayerEmbeddings) -> None:
    L, T, D = e.data.shape
    with open(path, "wb") as fh:
        fh.write(_AVE_HEADER.pack(AVE_MAGIC, AVE_VERSION, L, T, D))
        fh.write(np.ascontiguousarray(e.data, dtype="<f4").tobytes())


def read_embeddings(path: str | Path) -> LayerEmbeddings:
    raw = Path(path).read_bytes()
    if len(raw) < _AVE_HEADER.size:
        raise AveFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, L, T, D = _AVE_HEADER.unpack_from(raw)
    if magic != AVE_MAGIC:
        raise AveFormatError(f"{path}: bad magic {magic!r}, expected {AVE_MAGIC!r}")
    if version != AVE_VERSION:
        raise AveFormatError(f"{path}: unsupported version {version}")
    count = L * T * D
    if count == 0 or count > _AVE_MAX_VALUES:
        raise AveFormatError(f"{path}: dimensions {L}x{T}x{D} out of range")
    need = _AVE_HEADER.size + 4 * count
    if len(raw) < need:
        raise AveFormatError(f"{path}: truncated, header promises {need} bytes, file has {len(raw)}")
    if len(raw) > need:
        raise AveFormatError(f"{path}: {len(raw) - need} trailing bytes")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=_AVE_HEADER.size).reshape(L, T, D)
    return LayerEmbeddings(data.astype(np.float32))
