"""Noise schedule, closed-form forward process and deterministic DDIM sampler."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError
from .nn import forward as net_forward
from .seeding import rng_for

# T scaled down from 1000 to 200 with beta multiplied by 5 keeps the
# alpha_bar curve of the classic 1e-4 -> 0.02 / T=1000 linear schedule.
DEFAULT_T = 200
DEFAULT_BETA_START = 5e-4
DEFAULT_BETA_END = 0.1


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        ext = np.concatenate([[1.0], self.alpha_bar])
        ext.setflags(write=False)
        object.__setattr__(self, "_abar_ext", ext)

    def abar(self, t):
        """alpha_bar at timestep(s) ``t`` with the convention alpha_bar[0] = 1."""
        return self._abar_ext[np.asarray(t)]

    def to_dict(self):
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_schedule(T=DEFAULT_T, beta_start=DEFAULT_BETA_START, beta_end=DEFAULT_BETA_END):
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([float(beta_start)])
    alpha = 1.0 - beta
    alpha_bar = np.empty(T)
    acc = 1.0
    for i in range(T):
        acc = acc * alpha[i]
        alpha_bar[i] = acc
    if not np.all(np.diff(alpha_bar) < 0) or alpha_bar[-1] <= 0:
        raise ConfigError("schedule does not give a strictly decreasing positive alpha_bar")
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), beta, alpha, alpha_bar)


def _check_t(t, sched, lo=1):
    t = np.asarray(t)
    if np.any(t < lo) or np.any(t > sched.T):
        raise UsageError(f"timestep out of range [{lo}, {sched.T}]: {t}")
    return t


def forward_diffuse(z0, t, eps, sched):
    """``z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; ``t`` may be per-row."""
    t = _check_t(t, sched)
    ab = sched.abar(t)
    if np.ndim(ab):
        ab = ab[..., None]
    return np.sqrt(ab) * np.asarray(z0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def ddim_step(z_t, eps_pred, t, t_prev, sched):
    """Deterministic DDIM move from ``t`` to ``t_prev`` (abar_0 = 1)."""
    if t_prev >= t:
        raise UsageError(f"t_prev ({t_prev}) must be < t ({t})")
    _check_t(t, sched)
    _check_t(t_prev, sched, lo=0)
    ab_t = sched.abar(t)
    ab_prev = sched.abar(t_prev)
    z0_pred = (z_t - np.sqrt(1.0 - ab_t) * eps_pred) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * z0_pred + np.sqrt(1.0 - ab_prev) * eps_pred


def ddim_ladder(T, num_steps):
    """Evenly spaced decreasing integer timesteps ``T = t_0 > ... > t_n = 0``."""
    if num_steps < 1 or num_steps > T:
        raise ConfigError(f"num_steps must be in [1, {T}], got {num_steps}")
    return [int(x) for x in np.round(np.linspace(T, 0, num_steps + 1))]


def ddim_sample_batch(net, cond, sched, num_steps, z_T):
    """Run the DDIM ladder from the given ``z_T`` rows; ``cond`` is one
    embedding or one per row."""
    ladder = ddim_ladder(sched.T, num_steps)
    z = np.array(z_T, dtype=np.float64, ndmin=2)
    for t, t_prev in zip(ladder[:-1], ladder[1:]):
        eps = net_forward(net, z, t, cond)
        z = ddim_step(z, eps, t, t_prev, sched)
    return z


def initial_noise(seed, n, dim):
    keys = seed if isinstance(seed, (tuple, list)) else (seed,)
    return rng_for(*keys).standard_normal((n, dim))


def ddim_sample(net, cond, sched, num_steps, seed):
    """One deterministic sample: z_T ~ N(0, I) from ``seed``, then DDIM to 0."""
    z_T = initial_noise(seed, 1, net.arch.data_dim)
    return ddim_sample_batch(net, cond, sched, num_steps, z_T)[0]


def sample_training_timestep(t_range, rng, size=None):
    lo, hi = int(t_range[0]), int(t_range[1])
    if lo < 1 or hi < lo:
        raise ConfigError(f"empty or invalid timestep range [{lo}, {hi}]")
    return rng.integers(lo, hi + 1, size=size)
