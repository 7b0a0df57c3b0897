"""Toy multi-resolution conditional score network s(x_t, y, f, t).

Encoder levels run at time/frequency downsampling factors d_k; level k
concatenates its conditioning feature f_k (broadcast over frequency) before
its convolution and adds a projection of the noise-level embedding.  A
mirrored decoder with skip connections returns two real channels ``F``.

How ``F`` and the inputs are scaled depends on ``preconditioning``:

* ``"none"``: inputs raw, score = F / sigma.
* ``"sigma"``: x_t enters as x_t / sigma, score = F / sigma.
* ``"denoiser"``: the state is x_t = y + w (x0 - y) + sigma z with mean
  weight w.  With s_d = ``sigma_data`` the typical size of x0 - y and
  n^2 = (w s_d)^2 + sigma^2, both x_t and y enter scaled by 1 / n and

      score = -(x_t - y) / n^2 + w s_d / (sigma n) * F

  At F = 0 this is the exact score for Gaussian x0 - y of variance s_d^2.
  For sigma << w s_d it reduces to the "sigma" form; for sigma >> w s_d the
  net only corrects the Gaussian prior score, so score errors stay small
  relative to the score itself.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .conditioner import (
    ConditioningSet,
    LevelShape,
    conditioner_param_shapes,
    init_conditioner_params,
)
from .layers import ParamTable

N_INPUT_CHANNELS = 4
PRECONDITIONINGS = ("denoiser", "residual", "sigma", "none")


class ScoreNetError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreNetShape:
    channels: tuple = (16, 32, 64)
    factors: tuple = (1, 2, 4)
    temb_dim: int = 32
    emb_layers: int = 12
    emb_dim: int = 32
    n_freq: int = 256
    preconditioning: str = "denoiser"  # "denoiser", "sigma" or "none"; see module docstring
    sigma_data: float = 0.1  # typical |x0 - y| of compressed spectrograms, used by "denoiser"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "factors", tuple(int(d) for d in self.factors))
        if len(self.channels) != len(self.factors) or not self.channels:
            raise ScoreNetError("channels and factors must be non-empty and equally long")
        if self.factors[0] != 1:
            raise ScoreNetError("first level must have factor 1")
        for a, b in zip(self.factors, self.factors[1:]):
            if b <= a or b % a or (b & (b - 1)):
                raise ScoreNetError("factors must be strictly increasing powers of two")
        if self.n_freq % self.factors[-1]:
            raise ScoreNetError("frequency bins must be divisible by the largest factor")
        if self.temb_dim % 2:
            raise ScoreNetError("temb_dim must be even")
        if self.preconditioning not in PRECONDITIONINGS:
            raise ScoreNetError(f"preconditioning must be one of {PRECONDITIONINGS}, got {self.preconditioning!r}")
        if not self.sigma_data > 0:
            raise ScoreNetError("sigma_data must be positive")

    def scalings(self, sigma: float, weight: float = 1.0) -> tuple[float, float, float, float]:
        """(x_t input gain, y input gain, output gain, prior coefficient) at noise level sigma.

        score = output_gain * F - prior * (x_t - y)
        """
        if self.preconditioning in ("denoiser", "residual"):
            n2 = (weight * self.sigma_data) ** 2 + sigma**2
            c_in = 1.0 / np.sqrt(n2)
            if self.preconditioning == "residual":
                return c_in, c_in, 1.0 / sigma, 1.0 / n2
            return c_in, c_in, weight * self.sigma_data / (sigma * np.sqrt(n2)), 1.0 / n2
        x_gain = 1.0 / sigma if self.preconditioning == "sigma" else 1.0
        return x_gain, 1.0, 1.0 / sigma, 0.0

    @property
    def n_levels(self) -> int:
        return len(self.channels)

    def padded_frames(self, n_frames: int) -> int:
        d = self.factors[-1]
        return -(-n_frames // d) * d

    def level_shapes(self, n_frames: int) -> list[LevelShape]:
        t = self.padded_frames(n_frames)
        return [LevelShape(c, t // d, d) for c, d in zip(self.channels, self.factors)]


def param_shapes(shape: ScoreNetShape) -> "OrderedDict[str, tuple]":
    C, K, H = shape.channels, shape.n_levels, shape.temb_dim
    s = OrderedDict()
    s["temb.w"] = (H, H)
    s["temb.b"] = (H,)
    s["in.w"] = (C[0], N_INPUT_CHANNELS, 3, 3)
    s["in.b"] = (C[0],)
    for k in range(K):
        if k > 0:
            r = shape.factors[k] // shape.factors[k - 1]
            s[f"down{k}.w"] = (C[k], C[k - 1], r, r)
            s[f"down{k}.b"] = (C[k],)
        s[f"enc{k}.w"] = (C[k], 2 * C[k], 3, 3)
        s[f"enc{k}.b"] = (C[k],)
        s[f"enc{k}.t"] = (C[k], H)
    for k in range(K - 2, -1, -1):
        s[f"up{k}.w"] = (C[k], C[k + 1], 3, 3)
        s[f"up{k}.b"] = (C[k],)
        s[f"dec{k}.w"] = (C[k], 2 * C[k], 3, 3)
        s[f"dec{k}.b"] = (C[k],)
    s["out.w"] = (2, C[0], 3, 3)
    s["out.b"] = (2,)
    s.update(conditioner_param_shapes(shape.emb_layers, shape.emb_dim, C, shape.factors))
    return s


def init_params(shape: ScoreNetShape, rng_seed: int = 0, dtype=np.float32) -> ParamTable:
    """Fan-in scaled normal init; the output layer starts at zero so the initial score is 0."""
    rng = np.random.default_rng(rng_seed)
    params = ParamTable(param_shapes(shape), dtype=dtype)
    for name, shp in params.shapes.items():
        if name.startswith(("agg.", "align")):
            continue
        view = params[name]
        if name.endswith(".b") or name.startswith("out."):
            view[...] = 0.0
        elif name.endswith(".t"):
            view[...] = rng.standard_normal(shp) * (0.5 / np.sqrt(shp[1]))
        else:
            fan_in = int(np.prod(shp[1:]))
            view[...] = rng.standard_normal(shp) * np.sqrt(2.0 / fan_in)
    init_conditioner_params(params, shape.factors, rng)
    return params


def count_params(shape: ScoreNetShape) -> int:
    return ParamTable(param_shapes(shape)).size


def noise_features(sigma: float, dim: int) -> np.ndarray:
    """Sinusoidal features of log(sigma)."""
    freqs = np.geomspace(0.25, 16.0, dim // 2)
    arg = np.log(sigma) * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)])


class ScoreNet:
    """Stateless wrapper: ``forward`` returns the score and a cache for ``backward``."""

    def __init__(self, shape: ScoreNetShape, dtype=np.float32):
        self.shape = shape
        self.dtype = np.dtype(dtype)

    def forward(self, params: ParamTable, x_t: np.ndarray, y: np.ndarray, cond: ConditioningSet, sigma: float, weight: float = 1.0):
        """Score at noise std ``sigma``; ``weight`` is the clean-signal weight of the state mean."""
        shape, dt = self.shape, self.dtype
        if x_t.shape != y.shape:
            raise ScoreNetError(f"x_t {x_t.shape} and y {y.shape} differ")
        n_freq, n_frames = x_t.shape
        if n_freq != shape.n_freq:
            raise ScoreNetError(f"expected {shape.n_freq} frequency bins, got {n_freq}")
        if sigma <= 0 or not 0 < weight <= 1:
            raise ScoreNetError("sigma must be positive and weight in (0, 1]")
        levels = shape.level_shapes(n_frames)
        if len(cond.features) != shape.n_levels:
            raise ScoreNetError(f"{len(cond.features)} conditioning features for {shape.n_levels} levels")
        for k, (f, lvl) in enumerate(zip(cond.features, levels)):
            if f.shape != (lvl.channels, lvl.frames):
                raise ScoreNetError(f"level {k}: conditioning {f.shape}, expected {(lvl.channels, lvl.frames)}")
        P = {name: params[name].astype(dt, copy=False) for name in params.names()}
        t_pad = levels[0].frames
        inp = np.zeros((N_INPUT_CHANNELS, n_freq, t_pad), dtype=dt)
        # without normalisation layers the net cannot learn sigma-dependent gains itself
        x_gain, y_gain, out_gain, prior = shape.scalings(sigma, weight)
        inp[0, :, :n_frames] = x_t.real * x_gain
        inp[1, :, :n_frames] = x_t.imag * x_gain
        inp[2, :, :n_frames] = y.real * y_gain
        inp[3, :, :n_frames] = y.imag * y_gain

        cache = {"n_frames": n_frames, "sigma": sigma, "weight": weight, "P": P}
        feats = noise_features(sigma, shape.temb_dim).astype(dt)
        a, cache["temb_lin"] = L.linear_forward(feats, P["temb.w"], P["temb.b"])
        temb, cache["temb_act"] = L.silu_forward(a)
        cache["temb"] = temb

        h, cache["in"] = L.conv2d_forward(inp, P["in.w"], P["in.b"])
        skips = []
        for k in range(shape.n_levels):
            if k > 0:
                r = shape.factors[k] // shape.factors[k - 1]
                h, cache[f"down{k}"] = L.conv2d_forward(h, P[f"down{k}.w"], P[f"down{k}.b"], stride=r)
            # conv over concat(h, f_k broadcast over frequency), without materialising the broadcast
            a, cache[f"enc{k}"] = L.broadcast_conv_forward(h, cond.features[k], P[f"enc{k}.w"], P[f"enc{k}.b"])
            a += (P[f"enc{k}.t"] @ temb)[:, None, None]
            h, cache[f"enc{k}.act"] = L.silu_forward(a)
            skips.append(h)
        for k in range(shape.n_levels - 2, -1, -1):
            r = shape.factors[k + 1] // shape.factors[k]
            u, cache[f"ups{k}"] = L.upsample_forward(h, r)
            a, cache[f"up{k}"] = L.conv2d_forward(u, P[f"up{k}.w"], P[f"up{k}.b"])
            del u
            u, cache[f"up{k}.act"] = L.silu_forward(a)
            hc = np.concatenate([u, skips[k]], axis=0)
            a, cache[f"dec{k}"] = L.conv2d_forward(hc, P[f"dec{k}.w"], P[f"dec{k}.b"])
            del hc
            h, cache[f"dec{k}.act"] = L.silu_forward(a)
        out, cache["out"] = L.conv2d_forward(h, P["out.w"], P["out.b"])
        out = out[:, :, :n_frames]
        score = (out[0].astype(np.float64) + 1j * out[1].astype(np.float64)) * out_gain
        if prior:
            score -= prior * (x_t - y)
        return score, cache

    def backward(self, dscore: np.ndarray, cache, grads: ParamTable) -> list:
        """Accumulate parameter gradients into ``grads``.

        ``dscore`` is dL/d(Re s) + i dL/d(Im s).  Returns the gradients with
        respect to the conditioning features so the caller can push them
        through :func:`avgen.conditioner.align_full_backward`.
        """
        if cache is None or "out" not in cache:
            raise ScoreNetError("backward called without a forward cache")
        shape, dt = self.shape, self.dtype
        P = cache["P"]
        sigma, n_frames = cache["sigma"], cache["n_frames"]
        t_pad = shape.padded_frames(n_frames)
        dout = np.zeros((2, shape.n_freq, t_pad), dtype=dt)
        out_gain = shape.scalings(sigma, cache["weight"])[2]
        dout[0, :, :n_frames] = dscore.real * out_gain
        dout[1, :, :n_frames] = dscore.imag * out_gain

        dh, dw, db = L.conv2d_backward(dout, cache["out"])
        grads.accumulate("out.w", dw)
        grads.accumulate("out.b", db)
        dskips = [None] * shape.n_levels
        dtemb = np.zeros(shape.temb_dim, dtype=dt)
        dfeats = [None] * shape.n_levels
        for k in range(shape.n_levels - 1):
            da = L.silu_backward(dh, cache[f"dec{k}.act"])
            dhc, dw, db = L.conv2d_backward(da, cache[f"dec{k}"])
            grads.accumulate(f"dec{k}.w", dw)
            grads.accumulate(f"dec{k}.b", db)
            c = shape.channels[k]
            du, dskips[k] = dhc[:c], dhc[c:]
            da = L.silu_backward(du, cache[f"up{k}.act"])
            du, dw, db = L.conv2d_backward(da, cache[f"up{k}"])
            grads.accumulate(f"up{k}.w", dw)
            grads.accumulate(f"up{k}.b", db)
            dh = L.upsample_backward(du, cache[f"ups{k}"])
        temb = cache["temb"]
        for k in range(shape.n_levels - 1, -1, -1):
            if dskips[k] is not None:
                dh = dh + dskips[k]
            da = L.silu_backward(dh, cache[f"enc{k}.act"])
            dsum = da.sum(axis=(1, 2))
            grads.accumulate(f"enc{k}.t", np.outer(dsum, temb))
            dtemb += P[f"enc{k}.t"].T @ dsum
            dh, dfeats[k], dw, db = L.broadcast_conv_backward(da, cache[f"enc{k}"])
            grads.accumulate(f"enc{k}.w", dw)
            grads.accumulate(f"enc{k}.b", db)
            if k > 0:
                dh, dw, db = L.conv2d_backward(dh, cache[f"down{k}"])
                grads.accumulate(f"down{k}.w", dw)
                grads.accumulate(f"down{k}.b", db)
        _, dw, db = L.conv2d_backward(dh, cache["in"])
        grads.accumulate("in.w", dw)
        grads.accumulate("in.b", db)
        da = L.silu_backward(dtemb, cache["temb_act"])
        _, dw, db = L.linear_backward(da, cache["temb_lin"])
        grads.accumulate("temb.w", dw)
        grads.accumulate("temb.b", db)
        return dfeats
