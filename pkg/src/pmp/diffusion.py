"""Continuous-noise diffusion: geometric sigma schedule, denoiser
preconditioning, score-matching loss weight, and the deterministic few-step
DDIM sampler (Euler form of the probability-flow ODE)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Exponential (geometric) knot spacing between sigma_max and sigma_min."""

    sigma_min: float = 0.001
    sigma_max: float = 80.0
    n_steps: int = 4

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ValueError(f"need 0 < sigma_min < sigma_max, got [{self.sigma_min}, {self.sigma_max}]")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")


@dataclass(frozen=True)
class Preconditioner:
    """Scaling coefficients around the raw network, parameterized by the
    assumed data standard deviation."""

    sigma_data: float = 0.5

    def __post_init__(self):
        if self.sigma_data <= 0:
            raise ValueError(f"sigma_data must be positive, got {self.sigma_data}")

    def c_skip(self, sigma):
        sd2 = self.sigma_data**2
        return sd2 / (np.asarray(sigma) ** 2 + sd2)

    def c_out(self, sigma):
        sigma = np.asarray(sigma)
        return sigma * self.sigma_data / np.sqrt(sigma**2 + self.sigma_data**2)

    def c_in(self, sigma):
        return 1.0 / np.sqrt(np.asarray(sigma) ** 2 + self.sigma_data**2)

    def c_noise(self, sigma):
        return np.log(np.asarray(sigma)) / 4.0

    def loss_weight(self, sigma):
        """lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2."""
        sigma = np.asarray(sigma)
        return (sigma**2 + self.sigma_data**2) / (sigma * self.sigma_data) ** 2


def make_schedule(cfg: NoiseSchedule) -> np.ndarray:
    """Knot list [sigma_0 .. sigma_{n-1}, 0], geometrically spaced."""
    n = cfg.n_steps
    if n == 1:
        knots = np.array([cfg.sigma_max])
    else:
        i = np.arange(n, dtype=np.float64)
        knots = cfg.sigma_max * (cfg.sigma_min / cfg.sigma_max) ** (i / (n - 1))
    return np.concatenate([knots, [0.0]])


def sample_sigma_train(rng: np.random.Generator, cfg: NoiseSchedule, size=None) -> np.ndarray:
    """Training noise levels: ln(sigma) uniform on [ln s_min, ln s_max]."""
    lo, hi = np.log(cfg.sigma_min), np.log(cfg.sigma_max)
    return np.exp(rng.uniform(lo, hi, size=size))


def precondition_denoise(net, x_noisy: np.ndarray, sigma, pre: Preconditioner) -> np.ndarray:
    """D(x, sigma) = c_skip * x + c_out * F(c_in * x; c_noise).

    ``net(x_scaled, c_noise) -> raw output`` is the unconditioned network
    call; observation conditioning is closed over by the caller. ``sigma``
    is a scalar or one value per leading batch row.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("precondition_denoise: sigma must be positive")
    bshape = sigma.shape + (1,) * (x_noisy.ndim - sigma.ndim)
    c_skip = pre.c_skip(sigma).reshape(bshape)
    c_out = pre.c_out(sigma).reshape(bshape)
    c_in = pre.c_in(sigma).reshape(bshape)
    f = net(c_in * x_noisy, pre.c_noise(sigma))
    return c_skip * x_noisy + c_out * f


def ddim_sample(denoise, shape, schedule: np.ndarray, rng: np.random.Generator,
                clamp: bool = True) -> np.ndarray:
    """Euler steps of d(a)/d(sigma) = (a - D(a, sigma)) / sigma.

    Starts from a ~ Normal(0, sigma_0^2 I) and walks consecutive schedule
    knots; ``denoise(x, sigma)`` is evaluated once per positive knot (so
    exactly n_steps network calls). The result is clamped to [-1, 1] unless
    disabled.
    """
    x = rng.standard_normal(shape) * schedule[0]
    for s_cur, s_next in zip(schedule[:-1], schedule[1:]):
        d = denoise(x, s_cur)
        x = x + (s_next - s_cur) * (x - d) / s_cur
    if clamp:
        x = np.clip(x, -1.0, 1.0)
    return x
