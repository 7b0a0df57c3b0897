"""Reverse-SDE sampling: Euler-Maruyama predictor with an optional Langevin corrector.

A score function here is any callable ``score_fn(x, t) -> array``.  The time
grid is uniform from T down to t_eps with N predictor steps; at each grid
point the corrector runs first, then the predictor, so one run costs
exactly ``N * (1 + corrector_steps)`` score evaluations.  Noise is kept on
every step, the last one included.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import sde as S
from .conditioner import LayerEmbeddings, align_full
from .layers import ParamTable
from .scorenet import ScoreNet
from .signal import ComplexSpectrogram, Waveform, compress, decompress, istft, stft


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 30
    corrector_steps: int = 1
    snr: float = 0.5
    seed: int = 0
    max_states: int = 1000

    def __post_init__(self):
        if self.steps < 1 or self.corrector_steps < 0 or self.snr <= 0:
            raise SamplerError("need steps >= 1, corrector_steps >= 0, snr > 0")


def _check_finite(x, what: str, t: float):
    if not np.all(np.isfinite(x)):
        raise SamplerError(f"non-finite state after {what} at t={t:.6g}")


def predictor_step(x, y, score, t: float, dt: float, params: S.SdeParams, rng):
    """One reverse Euler-Maruyama step from t to t - dt (dt > 0).

    x <- x + [-gamma (y - x) + g(t)^2 score] dt + g(t) sqrt(dt) z
    """
    if dt <= 0:
        raise SamplerError("dt must be positive")
    if t - dt < params.t_eps - 1e-9:
        raise SamplerError(f"step would go below t_eps ({t - dt} < {params.t_eps})")
    g = float(S.diffusion(t, params))
    z = S.standard_noise(rng, np.shape(x), x)
    out = x + (-params.gamma * (y - x) + g * g * score) * dt + g * np.sqrt(dt) * z
    _check_finite(out, "predictor", t)
    return out


def corrector_step(x, y, score_fn, t: float, r: float, params: S.SdeParams, rng):
    """One Langevin step at fixed t with step size 2 (r |z| / |s|)^2.

    A zero score skips the step and returns ``x`` unchanged.
    """
    if r <= 0:
        raise SamplerError("corrector snr must be positive")
    s = score_fn(x, t)
    z = S.standard_noise(rng, np.shape(x), x)
    s_norm = np.linalg.norm(np.ravel(s))
    if s_norm == 0.0:
        return x
    eps = 2.0 * (r * np.linalg.norm(np.ravel(z)) / s_norm) ** 2
    out = x + eps * s + np.sqrt(2.0 * eps) * z
    _check_finite(out, "corrector", t)
    return out


class CountingScore:
    """Wraps a score function and counts evaluations."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, x, t):
        self.calls += 1
        return self.fn(x, t)


def time_grid(params: S.SdeParams, n_steps: int) -> np.ndarray:
    return np.linspace(params.T, params.t_eps, n_steps + 1)


def reverse_trajectory(y, score_fn, params: S.SdeParams, cfg: SamplerConfig, x_init=None, keep_states=True, rng=None):
    """Run the sampler; returns the list of states x_T, ..., x_{t_eps}.

    With ``keep_states=False`` only the final state is kept (list of one).
    ``x_init`` overrides the default start x_T ~ N(y, sigma(T)^2).
    """
    if keep_states and cfg.steps + 1 > cfg.max_states:
        raise SamplerError(f"{cfg.steps + 1} states exceed max_states={cfg.max_states}")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    y = np.asarray(y)
    if x_init is None:
        x = y + float(S.marginal_std(params.T, params)) * S.standard_noise(rng, y.shape, y)
    else:
        x = np.array(x_init, dtype=y.dtype, copy=True)
    states = [x] if keep_states else []
    grid = time_grid(params, cfg.steps)
    for i in range(cfg.steps):
        t, dt = grid[i], grid[i] - grid[i + 1]
        for _ in range(cfg.corrector_steps):
            x = corrector_step(x, y, score_fn, t, cfg.snr, params, rng)
        x = predictor_step(x, y, score_fn(x, t), t, dt, params, rng)
        if keep_states:
            states.append(x)
    return states if keep_states else [x]


def sample(y, score_fn, params: S.SdeParams, cfg: SamplerConfig, x_init=None, rng=None):
    return reverse_trajectory(y, score_fn, params, cfg, x_init=x_init, keep_states=False, rng=rng)[0]


def network_score_fn(net: ScoreNet, params: ParamTable, y: np.ndarray, emb: LayerEmbeddings | None, sde: S.SdeParams):
    """Score callable for a trained network; conditioning is computed once per clip."""
    levels = net.shape.level_shapes(y.shape[1])
    if emb is None:
        from .conditioner import ConditioningSet

        cond = ConditioningSet([np.zeros((l.channels, l.frames), dtype=net.dtype) for l in levels], net.shape.factors)
    else:
        cond, _ = align_full(emb, params, levels, dtype=net.dtype)

    def fn(x, t):
        sigma = float(S.marginal_std(t, sde))
        return net.forward(params, x, y, cond, sigma, float(S.mean_weight(t, sde)))[0]

    return fn


def check_embedding_length(n_samples: int, emb: LayerEmbeddings) -> None:
    expected = n_samples / 640.0
    if abs(emb.n_frames - expected) > 1.0:
        raise SamplerError(f"embeddings cover {emb.n_frames} frames, audio needs {expected:.1f} (tolerance 1)")


def enhance_spectrogram(y_spec: np.ndarray, score_fn, sde: S.SdeParams, cfg: SamplerConfig, keep_states=False):
    counting = CountingScore(score_fn)
    t0 = time.perf_counter()
    states = reverse_trajectory(y_spec, counting, sde, cfg, keep_states=keep_states)
    report = {"nfe": counting.calls, "seconds": time.perf_counter() - t0, "steps": cfg.steps, "corrector_steps": cfg.corrector_steps}
    return states, report


def enhance(y: Waveform, emb: LayerEmbeddings | None, params: ParamTable, net: ScoreNet, sde: S.SdeParams, cfg: SamplerConfig):
    """Enhance a noisy waveform; returns ``(waveform, report)``.

    ``emb=None`` runs the network with zero conditioning (audio-only).
    """
    if emb is not None:
        check_embedding_length(len(y), emb)
    Y = compress(stft(y))
    fn = network_score_fn(net, params, Y.data, emb, sde)
    states, report = enhance_spectrogram(Y.data, fn, sde, cfg)
    X = decompress(ComplexSpectrogram(states[-1], compressed=True))
    return istft(X, len(y)), report
