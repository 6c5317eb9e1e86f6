"""Optimal x0 estimation for conditionally Gaussian data.

Data follow ``x0 = mu(c) + sigma(c) * eps``. The plain noisy observation is
``x_t = sqrt(abar) x0 + sqrt(1 - abar) eps'``; with a linear adapter of
strength ``r`` it becomes ``x_t = (sqrt(abar) + r) x0 + sqrt(1 - abar) eps'``.
Both admit a linear-Gaussian conditional mean, so the minimum squared error
has a closed form, and :func:`mc_error` checks it by simulation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ToyModel:
    means: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        sigmas = np.broadcast_to(np.asarray(self.sigmas, dtype=np.float64), (means.shape[0],)).copy()
        if np.any(sigmas <= 0):
            raise ValueError("sigma(c) must be positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "sigmas", sigmas)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    def mu(self, c) -> np.ndarray:
        return self.means[c]

    def sigma(self, c):
        return self.sigmas[c]

    def sample(self, c, rng: np.random.Generator) -> np.ndarray:
        c = np.asarray(c)
        eps = rng.standard_normal(c.shape + (self.dim,))
        s = self.sigmas[c]
        return self.means[c] + (s[..., None] if np.ndim(s) else s) * eps


def _check(sigma_c, alpha_bar, d, r=0.0):
    if not sigma_c > 0:
        raise ValueError("sigma_c must be > 0")
    if not 0.0 <= alpha_bar <= 1.0:
        raise ValueError("alpha_bar must lie in [0, 1]")
    if d < 1:
        raise ValueError("d must be >= 1")
    if r < 0:
        raise ValueError("r must be >= 0")


def ddpm_optimal_error(sigma_c: float, alpha_bar: float, d: int) -> float:
    """``d sigma^2 (1 - abar) / (abar sigma^2 + 1 - abar)``."""
    _check(sigma_c, alpha_bar, d)
    s2 = sigma_c ** 2
    return d * s2 * (1.0 - alpha_bar) / (alpha_bar * s2 + 1.0 - alpha_bar)


def contextdiff_optimal_error(sigma_c: float, alpha_bar: float, r: float, d: int) -> float:
    """``d sigma^2 (1 - abar) / (1 - abar + (r + sqrt(abar))^2 sigma^2)``."""
    _check(sigma_c, alpha_bar, d, r)
    s2 = sigma_c ** 2
    g = r + np.sqrt(alpha_bar)
    return d * s2 * (1.0 - alpha_bar) / (1.0 - alpha_bar + g * g * s2)


def optimal_estimator(x_t, mu, sigma_c: float, alpha_bar: float, r: float = 0.0) -> np.ndarray:
    """Conditional mean ``E[x0 | x_t, c]`` for the (possibly adapted) observation."""
    g = r + np.sqrt(alpha_bar)
    s2 = sigma_c ** 2
    gain = s2 * g / (1.0 - alpha_bar + g * g * s2)
    return mu - gain * (g * mu - x_t)


def mc_error(model: ToyModel, c: int, alpha_bar: float, r: float, n: int,
             rng: np.random.Generator) -> tuple[float, float]:
    """Empirical squared error of the optimal estimator and its standard error."""
    if n < 1:
        raise ValueError("n must be >= 1")
    mu, s = model.mu(c), float(model.sigma(c))
    d = model.dim
    eps = rng.standard_normal((n, d))
    eps2 = rng.standard_normal((n, d))
    x0 = mu + s * eps
    x_t = (np.sqrt(alpha_bar) + r) * x0 + np.sqrt(1.0 - alpha_bar) * eps2
    est = optimal_estimator(x_t, mu, s, alpha_bar, r)
    err = np.sum((x0 - est) ** 2, axis=1)
    se = float(err.std(ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    return float(err.mean()), se
