"""Textbook DDPM/DDIM used as the reduction oracle for the zero adapter.

Nothing here imports the package's forward/reverse/schedule code; the noise
schedule is rebuilt from its defining formula.
"""
import math

import numpy as np


def linear_betas(T, b0, b1):
    return np.array([0.0] + [b0 + (t - 1) / (T - 1) * (b1 - b0) for t in range(1, T + 1)])


def cosine_betas(T, s=0.008):
    f = np.array([math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2 for t in range(T + 1)])
    abar = f / f[0]
    return np.concatenate([[0.0], np.clip(1.0 - abar[1:] / abar[:-1], 0.0, 0.999)])


class Reference:
    def __init__(self, betas):
        self.betas = np.asarray(betas, dtype=np.float64)
        self.T = len(self.betas) - 1
        self.alphas = 1.0 - self.betas
        self.abar = np.cumprod(self.alphas)

    def col(self, v):
        return v[:, None] if np.ndim(v) else v

    def q_sample(self, x0, t, eps):
        a = self.col(self.abar[t])
        return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps

    def posterior(self, x_t, x0, t):
        a, ap, b = self.abar[t], self.abar[t - 1], self.betas[t]
        mean = np.sqrt(ap) * b / (1.0 - a) * x0 + np.sqrt(self.alphas[t]) * (1.0 - ap) / (1.0 - a) * x_t
        return mean, (1.0 - ap) * b / (1.0 - a)

    def ddpm_step(self, x_t, t, f, rng):
        x0 = f(x_t, t)
        if t == 1:
            return x0
        mean, var = self.posterior(x_t, x0, t)
        return mean + np.sqrt(var) * rng.standard_normal(mean.shape)

    def ddim_step(self, x_t, t, s, f, eta, rng):
        a, ap = self.abar[t], self.abar[s]
        x0 = f(x_t, t)
        sig = eta * np.sqrt((1 - ap) / (1 - a)) * np.sqrt(1 - a / ap)
        eps = (x_t - np.sqrt(a) * x0) / np.sqrt(1 - a)
        out = np.sqrt(ap) * x0 + np.sqrt(1 - ap - sig ** 2) * eps
        if sig == 0:
            return out
        return out + np.sqrt(sig ** 2) * rng.standard_normal(out.shape)

    def draw(self, x0, rng):
        """Timesteps then noise, the order the training loss consumes them."""
        t = rng.integers(1, self.T + 1, size=len(x0))
        eps = rng.standard_normal(x0.shape)
        return t, self.q_sample(x0, t, eps)

    def x0_loss(self, x0, f, rng):
        t, x_t = self.draw(x0, rng)
        err = f(x_t, t) - x0
        return float(np.mean(np.sum(err * err, axis=-1)))
