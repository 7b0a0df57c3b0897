"""On-demand oracle suites: perturbation kernel, gradient check, sampler recovery.

Each suite returns ``{"kind", "passed", "checks": [...]}`` where every
check carries its measured value and tolerance.
"""

from __future__ import annotations

import numpy as np
from scipy import stats

from . import sde as S
from .conditioner import LayerEmbeddings, align_full, align_full_backward
from .sampler import SamplerConfig, reverse_trajectory
from .scorenet import ScoreNet, ScoreNetShape, init_params

KINDS = ("kernel", "gradcheck", "sampler-oracle")


def _check(name: str, value: float, tol: float, ok: bool | None = None) -> dict:
    return {"name": name, "value": float(value), "tol": float(tol), "passed": bool(value < tol if ok is None else ok)}


def _report(kind: str, checks: list) -> dict:
    return {"kind": kind, "passed": all(c["passed"] for c in checks), "checks": checks}


def kernel_suite(params: S.SdeParams | None = None, n_paths: int = 10_000, n_steps: int = 1000, seed: int = 0, times=(0.25, 0.5, 1.0)) -> dict:
    """Closed-form mean/std against Euler-Maruyama Monte Carlo (scalar state)."""
    params = params or S.SdeParams()
    x0, y = 1.0, 0.0
    checks = []
    for i, t in enumerate(times):
        rng = np.random.default_rng([seed, i])
        xs = S.euler_maruyama_forward(x0, y, params, n_steps, n_paths, t, rng)
        k = S.marginal(np.array([x0]), np.array([y]), t, params)
        mean, std = float(k.mean[0]), k.std
        checks.append(_check(f"mean_rel_err@t={t:g}", abs(xs.mean() - mean) / abs(mean), 0.02))
        checks.append(_check(f"std_rel_err@t={t:g}", abs(xs.std() - std) / std, 0.02))
    return _report("kernel", checks)


GRADCHECK_SHAPE = ScoreNetShape(channels=(2, 3, 4), factors=(1, 2, 4), temb_dim=4, emb_layers=3, emb_dim=5, n_freq=8)


def _central_difference(objective, p, i: int, h: float) -> float:
    """Five-point stencil; truncation error is O(h^4) rather than O(h^2)."""
    vals = {}
    for k in (-2, -1, 1, 2):
        q = p.copy()
        q.flat[i] += k * h
        vals[k] = objective(q)[0]
    return (8.0 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12.0 * h)


def gradcheck_suite(
    seed: int = 0, n_params: int = 64, step: float = 1e-3, n_frames: int = 7, shape: ScoreNetShape = GRADCHECK_SHAPE, jitter: float = 0.1
) -> dict:
    """Backprop against fourth-order central differences in double precision.

    Every parameter tensor gets at least one probe; the remaining probes are
    drawn uniformly over the flat vector.  Relative errors use a denominator
    floor of 1e-6 times the objective magnitude so entries that are zero up
    to cancellation noise are not divided by themselves.
    """
    rng = np.random.default_rng(seed)
    p = init_params(shape, seed, dtype=np.float64)
    p.flat[:] += jitter * rng.standard_normal(p.size)  # move off the zero output init
    net = ScoreNet(shape, np.float64)
    F, T = shape.n_freq, n_frames
    # compressed spectrogram bins sit around 0.1-0.3 in magnitude
    x_t = 0.2 * (rng.standard_normal((F, T)) + 1j * rng.standard_normal((F, T)))
    y = 0.2 * (rng.standard_normal((F, T)) + 1j * rng.standard_normal((F, T)))
    emb = LayerEmbeddings(rng.standard_normal((shape.emb_layers, 3, shape.emb_dim)))
    upstream = rng.standard_normal((F, T)) + 1j * rng.standard_normal((F, T))
    levels = shape.level_shapes(T)

    def objective(q):
        cond, ccache = align_full(emb, q, levels, dtype=np.float64)
        s, cache = net.forward(q, x_t, y, cond, 0.3, 0.7)
        return float(np.sum(s.real * upstream.real + s.imag * upstream.imag)), cache, ccache

    f0, cache, ccache = objective(p)
    floor = 1e-6 * max(abs(f0), 1.0)
    grads = p.zeros_like()
    align_full_backward(net.backward(upstream, cache, grads), ccache, grads)

    first = [p.offsets[n][0] + int(rng.integers(p.offsets[n][1])) for n in p.names()]
    rest = rng.choice(p.size, max(0, n_params - len(first)), replace=False)
    probes = sorted(set(first) | set(int(i) for i in rest))
    owner = {}
    for n in p.names():
        off, size = p.offsets[n]
        owner.update({i: n for i in probes if off <= i < off + size})
    worst = {}
    for i in probes:
        fd = _central_difference(objective, p, i, step)
        err = abs(fd - grads.flat[i]) / max(abs(fd), abs(grads.flat[i]), floor)
        name = owner[i]
        worst[name] = max(worst.get(name, 0.0), err)
    checks = [_check(f"rel_err[{n}]", e, 1e-5) for n, e in worst.items()]
    return _report("gradcheck", checks)


def _analytic_fn(x0, y, params):
    return lambda x, t: S.analytic_score(x, x0, y, t, params)


def sampler_oracle_suite(seed: int = 0, steps: int = 100, n_scalar: int = 5000, corrector_steps: int = 1) -> dict:
    """Reverse sampling with the exact single-point score.

    Spectrogram case: unit-scale random complex x0 and y = x0 + 0.5 noise;
    the terminal state must be within 5% relative L2 of x0.  Scalar case:
    5000 independent chains run as one vector must match
    N(mu(t_eps), sigma(t_eps)^2) with KS statistic below 0.05.
    """
    params = S.SdeParams()
    rng = np.random.default_rng(seed)
    shape = (256, 100)
    x0 = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(0.5)
    y = x0 + 0.5 * S.standard_noise(rng, shape, x0)
    cfg = SamplerConfig(steps=steps, corrector_steps=corrector_steps, seed=seed + 1)
    final = reverse_trajectory(y, _analytic_fn(x0, y, params), params, cfg, keep_states=False)[0]
    rel = np.linalg.norm(final - x0) / np.linalg.norm(x0)
    checks = [_check("spectrogram_rel_err", rel, 0.05)]

    x0s, ys = np.full(n_scalar, 1.0), np.zeros(n_scalar)
    scfg = SamplerConfig(steps=steps, corrector_steps=corrector_steps, seed=seed + 2)
    out = reverse_trajectory(ys, _analytic_fn(x0s, ys, params), params, scfg, keep_states=False)[0]
    k = S.marginal(x0s[:1], ys[:1], params.t_eps, params)
    ks = stats.kstest(out, "norm", args=(float(k.mean[0]), k.std)).statistic
    checks.append(_check("scalar_ks_statistic", ks, 0.05))
    return _report("sampler-oracle", checks)


def run(kind: str, seed: int = 0) -> dict:
    if kind == "kernel":
        return kernel_suite(seed=seed)
    if kind == "gradcheck":
        return gradcheck_suite(seed=seed)
    if kind == "sampler-oracle":
        return sampler_oracle_suite(seed=seed)
    raise ValueError(f"unknown diagnostic kind {kind!r}; expected one of {KINDS}")
