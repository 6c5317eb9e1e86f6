"""Contextualized forward process.

All kernels are isotropic Gaussians. Inputs are single vectors of shape
``(d,)`` or row batches of shape ``(n, d)``; ``t`` may be a scalar or a
length-``n`` integer array, in which case ``var`` is per-row.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import faults
from .adapter import ContextAdapter, bias
from .report import CheckReport
from .schedule import NoiseSchedule, coef

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GaussianParams:
    mean: np.ndarray
    var: float | np.ndarray

    @property
    def degenerate(self) -> bool:
        return bool(np.any(np.asarray(self.var) == 0))

    def logpdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        d = x.shape[-1]
        var = np.asarray(self.var, dtype=np.float64)
        sq = np.sum((x - self.mean) ** 2, axis=-1)
        return -0.5 * (d * (LOG_2PI + np.log(var)) + sq / var)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal(np.shape(self.mean))
        return self.mean + _std(self.var, self.mean) * eps


@dataclass
class NoisySample:
    x_t: np.ndarray
    t: int | np.ndarray
    c: int | np.ndarray
    x0_id: int | np.ndarray | None = None


def _std(var, like):
    s = np.sqrt(var)
    if np.ndim(s) and np.ndim(like) == 2:
        return s[:, None]
    return s


def _check_t(schedule: NoiseSchedule, t, lo: int = 1) -> None:
    ta = np.asarray(t)
    if np.any(ta < lo) or np.any(ta > schedule.T):
        raise IndexError(f"t must lie in [{lo}, {schedule.T}], got {t!r}")


def marginal_params(x0, c, t, adapter: ContextAdapter, schedule: NoiseSchedule) -> GaussianParams:
    """``q(x_t | x0, c)``: mean ``sqrt(abar_t) x0 + b_t``, variance ``1 - abar_t``."""
    _check_t(schedule, t)
    x0 = np.asarray(x0, dtype=np.float64)
    mean = coef(np.sqrt(schedule.alpha_bars), t) * x0 + bias(adapter, schedule, x0, c, t)
    return GaussianParams(mean, 1.0 - schedule.alpha_bars[t])


def sample_marginal(x0, c, t, adapter: ContextAdapter, schedule: NoiseSchedule,
                    rng: np.random.Generator) -> NoisySample:
    """Reparameterized draw ``x_t = mean + sqrt(var) * eps``."""
    q = marginal_params(x0, c, t, adapter, schedule)
    return NoisySample(q.sample(rng), t, c)


def transition_params(x_prev, x0, c, t, adapter: ContextAdapter, schedule: NoiseSchedule) -> GaussianParams:
    """``q(x_t | x_{t-1}, x0, c)``."""
    _check_t(schedule, t)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    sa = coef(np.sqrt(schedule.alphas), t)
    mean = sa * x_prev + bias(adapter, schedule, x0, c, t)
    if not faults.active(faults.DROP_TRANSITION_PREV_BIAS):
        mean = mean - sa * bias(adapter, schedule, x0, c, np.asarray(t) - 1)
    return GaussianParams(mean, schedule.betas[t])


def posterior_coefficients(schedule: NoiseSchedule, t):
    """``(x0 coefficient, x_t coefficient, variance)`` of the forward posterior."""
    ab, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[np.asarray(t) - 1]
    beta, alpha = schedule.betas[t], schedule.alphas[t]
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    var = (1.0 - ab_prev) * beta / (1.0 - ab)
    return c0, ct, var


def posterior_from_bias(x_t, x0, b_t, b_prev, t, schedule: NoiseSchedule) -> GaussianParams:
    """Posterior mean/variance given precomputed biases at ``t`` and ``t - 1``."""
    c0, ct, var = posterior_coefficients(schedule, t)
    if np.ndim(c0) and np.ndim(x0) == 2:
        c0, ct = c0[:, None], ct[:, None]
    mean = c0 * x0 + ct * (x_t - b_t)
    if not faults.active(faults.DROP_POSTERIOR_PREV_BIAS):
        mean = mean + b_prev
    return GaussianParams(mean, var)


def posterior_params(x_t, x0, c, t, adapter: ContextAdapter, schedule: NoiseSchedule) -> GaussianParams:
    """``q(x_{t-1} | x_t, x0, c)``. At ``t = 1`` the variance is zero."""
    _check_t(schedule, t)
    x_t = np.asarray(x_t, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    b_t = bias(adapter, schedule, x0, c, t)
    b_prev = bias(adapter, schedule, x0, c, np.asarray(t) - 1)
    return posterior_from_bias(x_t, x0, b_t, b_prev, t, schedule)


def verify_composition(x0, c, adapter: ContextAdapter, schedule: NoiseSchedule,
                       tolerance: float = 1e-10) -> CheckReport:
    """Push the transition kernels' moments through ``t = 1..T`` and compare
    with the closed-form marginal at every step.

    The transition is linear-Gaussian in ``x_{t-1}`` for fixed ``(x0, c)``, so
    evaluating its mean at the running mean gives the composed mean exactly.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    mean = x0.copy()
    var = 0.0
    max_mean = max_var = 0.0
    for t in range(1, schedule.T + 1):
        step = transition_params(mean, x0, c, t, adapter, schedule)
        mean = step.mean
        var = schedule.alphas[t] * var + step.var
        target = marginal_params(x0, c, t, adapter, schedule)
        max_mean = max(max_mean, float(np.max(np.abs(mean - target.mean))))
        max_var = max(max_var, abs(var - target.var) / target.var)
    return CheckReport.compare(
        "transition_composition", max(max_mean, max_var), tolerance,
        max_mean_deviation=max_mean, max_rel_var_deviation=max_var,
        schedule=schedule.to_spec(), adapter=adapter.variant,
    )


def verify_bayes_identity(x0, c, t, adapter: ContextAdapter, schedule: NoiseSchedule,
                          x_prev, x_t, tolerance: float = 1e-8) -> CheckReport:
    """Check ``log q(x_{t-1}|x0) + log q(x_t|x_{t-1}, x0)
    = log q(x_t|x0) + log q(x_{t-1}|x_t, x0)`` at each probe pair."""
    if np.any(np.asarray(t) < 2):
        raise ValueError("the Bayes identity check needs t >= 2")
    _check_t(schedule, t, lo=2)
    t_prev = np.asarray(t) - 1
    lhs = (marginal_params(x0, c, t_prev, adapter, schedule).logpdf(x_prev)
           + transition_params(x_prev, x0, c, t, adapter, schedule).logpdf(x_t))
    rhs = (marginal_params(x0, c, t, adapter, schedule).logpdf(x_t)
           + posterior_params(x_t, x0, c, t, adapter, schedule).logpdf(x_prev))
    dev = float(np.max(np.abs(lhs - rhs)))
    return CheckReport.compare("bayes_identity", dev, tolerance,
                               n_probes=int(np.size(lhs)), adapter=adapter.variant,
                               schedule=schedule.to_spec())


def random_bayes_probes(x0, c, t, adapter: ContextAdapter, schedule: NoiseSchedule,
                        rng: np.random.Generator):
    """Draw ``x_{t-1}`` from its marginal and ``x_t`` from the transition."""
    t_prev = np.asarray(t) - 1
    if np.any(t_prev < 1):
        raise ValueError("probes need t >= 2")
    x_prev = marginal_params(x0, c, t_prev, adapter, schedule).sample(rng)
    x_t = transition_params(x_prev, x0, c, t, adapter, schedule).sample(rng)
    return x_prev, x_t
