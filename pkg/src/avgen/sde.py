"""Ornstein-Uhlenbeck SDE with a variance-exploding diffusion schedule.

Forward process::

    dx = gamma * (y - x) dt + g(t) dw,   g(t) = s_min * (s_max/s_min)**t * sqrt(2 ln(s_max/s_min))

The state may be a real array (real Wiener process) or a complex array.  In
the complex case the noise is circularly symmetric with E|z|^2 = 1, so
``marginal_std(t)**2`` is the per-bin complex variance and the score is
``-(x - mean) / std**2`` in both cases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal import ComplexSpectrogram, SignalError

_T_SLACK = 1e-9


class SdeError(ValueError):
    pass


@dataclass(frozen=True)
class SdeParams:
    gamma: float = 1.5
    sigma_min: float = 0.05
    sigma_max: float = 0.5
    T: float = 1.0
    t_eps: float = 0.03

    def __post_init__(self):
        if self.gamma < 0:
            raise SdeError("gamma must be >= 0")
        if not 0 < self.sigma_min < self.sigma_max:
            raise SdeError("need 0 < sigma_min < sigma_max")
        if not 0 < self.t_eps < self.T:
            raise SdeError("need 0 < t_eps < T")

    @property
    def log_ratio(self) -> float:
        return float(np.log(self.sigma_max / self.sigma_min))


@dataclass
class PerturbationKernel:
    mean: object
    std: float


def _check_t(t, params: SdeParams):
    ta = np.asarray(t, dtype=np.float64)
    if np.any(ta < -_T_SLACK) or np.any(ta > params.T + _T_SLACK):
        raise SdeError(f"t={t} outside [0, {params.T}]")


def _unwrap(*xs):
    """Return raw arrays and a rewrapper honouring ComplexSpectrogram flags."""
    specs = [x for x in xs if isinstance(x, ComplexSpectrogram)]
    if specs:
        flag = specs[0].compressed
        for s in specs[1:]:
            if s.compressed != flag:
                raise SignalError("compression flags differ")
        rate = specs[0].frame_rate
        wrap = lambda a: ComplexSpectrogram(a, flag, rate)  # noqa: E731
    else:
        wrap = lambda a: a  # noqa: E731
    raw = [x.data if isinstance(x, ComplexSpectrogram) else x for x in xs]
    shapes = {np.shape(r) for r in raw}
    if len(shapes) > 1:
        raise SdeError(f"shape mismatch: {sorted(shapes)}")
    return raw, wrap


def drift(x, y, params: SdeParams):
    (xr, yr), wrap = _unwrap(x, y)
    return wrap(params.gamma * (yr - xr))


def diffusion(t, params: SdeParams):
    """g(t); accepts scalars or arrays."""
    _check_t(t, params)
    lr = params.log_ratio
    return params.sigma_min * (params.sigma_max / params.sigma_min) ** np.asarray(t) * np.sqrt(2.0 * lr)


def marginal_var(t, params: SdeParams):
    """Closed-form solution of dv/dt = -2 gamma v + g(t)^2 with v(0) = 0."""
    _check_t(t, params)
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, params.T)
    lam = params.log_ratio
    g = params.gamma
    r2t = np.exp(2.0 * lam * t)
    return params.sigma_min**2 * lam * (r2t - np.exp(-2.0 * g * t)) / (g + lam)


def marginal_std(t, params: SdeParams):
    return np.sqrt(marginal_var(t, params))


def mean_weight(t, params: SdeParams):
    """e^{-gamma t}: weight of x0 in the marginal mean."""
    return np.exp(-params.gamma * np.asarray(t, dtype=np.float64))


def marginal(x0, y, t: float, params: SdeParams) -> PerturbationKernel:
    _check_t(t, params)
    (x0r, yr), wrap = _unwrap(x0, y)
    mean = yr + (x0r - yr) * np.exp(-params.gamma * t)
    return PerturbationKernel(mean=wrap(mean), std=float(marginal_std(t, params)))


def standard_noise(rng, shape, like) -> np.ndarray:
    """N(0, 1) for real states; circular complex with unit total variance otherwise."""
    if np.iscomplexobj(like):
        z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        return z * np.sqrt(0.5)
    return rng.standard_normal(shape)


def sample_forward(x0, y, t: float, params: SdeParams, rng_seed=None):
    """Draw x_t from the perturbation kernel.

    Returns ``(x_t, z, std)`` with ``x_t = mean + std * z``.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    kernel = marginal(x0, y, t, params)
    (mean,), wrap = _unwrap(kernel.mean)
    z = standard_noise(rng, np.shape(mean), mean)
    return wrap(mean + kernel.std * z), z, kernel.std


def analytic_score(x_t, x0, y, t: float, params: SdeParams):
    """Exact score of p_t(x_t | y) when the data distribution is the single point x0."""
    kernel = marginal(x0, y, t, params)
    if kernel.std == 0.0:
        raise SdeError("score undefined at zero marginal std (t = 0)")
    (xr, mr), wrap = _unwrap(x_t, kernel.mean)
    return wrap(-(xr - mr) / kernel.std**2)


def euler_maruyama_forward(x0, y, params: SdeParams, n_steps: int, n_paths: int, t_end: float, rng) -> np.ndarray:
    """Simulate the forward SDE for scalar real x0/y; returns the states at ``t_end``."""
    dt = t_end / n_steps
    x = np.full(n_paths, float(x0))
    for i in range(n_steps):
        t = i * dt
        x = x + params.gamma * (y - x) * dt + diffusion(t, params) * np.sqrt(dt) * rng.standard_normal(n_paths)
    return x
