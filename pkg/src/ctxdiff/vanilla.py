"""Plain DDPM/DDIM formulas with no context bias.

Written directly from the standard textbook forms and sharing no code with
:mod:`ctxdiff.forward` or :mod:`ctxdiff.reverse`, so the zero-adapter path of
those modules can be compared against it bit for bit.
"""
from __future__ import annotations

import numpy as np


class VanillaDDPM:
    """Standard diffusion arithmetic over a ``betas`` array indexed ``1..T``
    (entry 0 is ignored and treated as a no-noise step)."""

    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        self.T = len(betas) - 1
        self.betas = betas.copy()
        self.betas[0] = 0.0
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def _col(self, arr, t):
        v = arr[t]
        return v[:, None] if np.ndim(v) else v

    def q_sample(self, x0, t, eps):
        ab = self._col(self.alpha_bars, t)
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    def posterior(self, x_t, x0, t):
        ab, ab_prev = self.alpha_bars[t], self.alpha_bars[t - 1]
        beta = self.betas[t]
        w0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
        wt = np.sqrt(self.alphas[t]) * (1.0 - ab_prev) / (1.0 - ab)
        return w0 * x0 + wt * x_t, (1.0 - ab_prev) * beta / (1.0 - ab)

    def ddpm_step(self, x_t, t, predict_x0, rng):
        x0_hat = predict_x0(x_t, t)
        if t == 1:
            return x0_hat
        mean, var = self.posterior(x_t, x0_hat, t)
        return mean + np.sqrt(var) * rng.standard_normal(np.shape(mean))

    def ddim_step(self, x_t, t, t_prev, predict_x0, eta, rng):
        ab, ab_prev = self.alpha_bars[t], self.alpha_bars[t_prev]
        x0_hat = predict_x0(x_t, t)
        sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev)
        eps_hat = (x_t - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)
        x_prev = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev - sigma ** 2) * eps_hat
        if sigma == 0:
            return x_prev
        return x_prev + np.sqrt(sigma ** 2) * rng.standard_normal(np.shape(x_prev))

    def x0_loss(self, x0, predict_x0, rng):
        """Mean squared x0 error with ``t ~ U{1..T}`` drawn before the noise."""
        n, d = x0.shape
        t = rng.integers(1, self.T + 1, size=n)
        eps = rng.standard_normal((n, d))
        x_t = self.q_sample(x0, t, eps)
        err = predict_x0(x_t, t) - x0
        return float(np.mean(np.sum(err * err, axis=-1)))
