"""Context-aware sampling: DDPM and DDIM steps with adapter-shifted means."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import faults, nn
from .adapter import ContextAdapter, _per_row, bias
from .forward import GaussianParams, marginal_params, posterior_from_bias
from .report import CheckReport
from .schedule import NoiseSchedule

DenoiserFn = Callable[[np.ndarray, object, int], np.ndarray]


class Denoiser:
    """x0-predicting MLP ``f(x_t, c, t)``.

    Input is ``[x_t, class embedding, sinusoidal features of t/T]``. With
    ``precondition`` on, the network output is mixed with a skip connection,
    ``x0_hat = skip_t * x_t + out_t * net(...)``, using the variance-preserving
    coefficients for data of scale ``data_std``.
    """

    def __init__(self, params: nn.ParamSet, dim: int, n_classes: int, alpha_bars: np.ndarray,
                 hidden: int = 64, depth: int = 2, cond_dim: int = 8, time_dim: int = 16,
                 precondition: bool = True, data_std: float = 1.0):
        self.params = params
        self.dim = int(dim)
        self.n_classes = int(n_classes)
        self.alpha_bars = np.asarray(alpha_bars, dtype=np.float64)
        self.T = len(self.alpha_bars) - 1
        self.hidden, self.depth = int(hidden), int(depth)
        self.cond_dim, self.time_dim = int(cond_dim), int(time_dim)
        self.precondition = bool(precondition)
        self.data_std = float(data_std)

    @classmethod
    def init(cls, dim: int, n_classes: int, schedule: NoiseSchedule, rng: np.random.Generator,
             hidden: int = 64, depth: int = 2, cond_dim: int = 8, time_dim: int = 16,
             precondition: bool = True, data_std: float = 1.0) -> "Denoiser":
        p = nn.ParamSet()
        nn.init_embedding(p, "class_embed", n_classes, cond_dim, rng)
        sizes = [dim + cond_dim + time_dim] + [hidden] * depth + [dim]
        nn.init_mlp(sizes, rng, prefix="mlp", params=p)
        return cls(p, dim, n_classes, schedule.alpha_bars, hidden, depth, cond_dim,
                   time_dim, precondition, data_std)

    def skip_out(self, t):
        ab = self.alpha_bars[t]
        s2 = self.data_std ** 2
        denom = ab * s2 + 1.0 - ab
        return np.sqrt(ab) * s2 / denom, self.data_std * np.sqrt((1.0 - ab) / denom)

    def on_tape(self, x_t: nn.Node, c, t) -> nn.Node:
        n = x_t.shape[0]
        if x_t.shape[-1] != self.dim:
            raise ValueError(f"denoiser expects dimension {self.dim}, got {x_t.shape[-1]}")
        c = _per_row(c, n)
        t = _per_row(t, n)
        tape = x_t.tape
        emb = nn.embedding(tape.param(self.params, "class_embed"), c)
        tfeat = tape.const(nn.timestep_features(t, self.T, self.time_dim))
        h = nn.forward_mlp(self.params, nn.concat([x_t, emb, tfeat]), prefix="mlp")
        if not self.precondition:
            return h
        skip, out = self.skip_out(t)
        return nn.add(nn.mul(x_t, skip[:, None]), nn.mul(h, out[:, None]))

    def __call__(self, x_t, c, t) -> np.ndarray:
        x = np.asarray(x_t, dtype=np.float64)
        single = x.ndim == 1
        tape = nn.Tape()
        out = self.on_tape(tape.const(np.atleast_2d(x)), c, t).value
        return out[0] if single else out

    def to_spec(self) -> dict:
        return {"dim": self.dim, "n_classes": self.n_classes, "hidden": self.hidden,
                "depth": self.depth, "cond_dim": self.cond_dim, "time_dim": self.time_dim,
                "precondition": self.precondition, "data_std": self.data_std}


def denoiser_from_spec(spec: dict, schedule: NoiseSchedule, params: nn.ParamSet | None = None,
                       rng: np.random.Generator | None = None) -> Denoiser:
    kw = {k: spec[k] for k in ("hidden", "depth", "cond_dim", "time_dim", "precondition", "data_std")
          if k in spec}
    if params is None:
        if rng is None:
            raise ValueError("need params or an rng to initialise the denoiser")
        return Denoiser.init(spec["dim"], spec["n_classes"], schedule, rng, **kw)
    return Denoiser(params, spec["dim"], spec["n_classes"], schedule.alpha_bars, **kw)


@dataclass
class SamplerConfig:
    mode: str = "ddpm"
    stride: int = 1
    eta: float = 0.0
    seed: int = 0
    clip: tuple[float, float] | None = None
    timesteps: Sequence[int] | None = field(default=None)

    def __post_init__(self):
        if self.mode not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")

    def sequence(self, T: int) -> list[int]:
        if self.timesteps is not None:
            seq = [int(t) for t in self.timesteps]
        elif self.mode == "ddpm":
            seq = list(range(T, 0, -1))
        else:
            seq = list(range(T, 0, -self.stride))
            if seq[-1] != 1:
                seq.append(1)
        if not seq:
            raise ValueError("empty timestep sequence")
        if seq[-1] != 1 or any(a <= b for a, b in zip(seq, seq[1:])):
            raise ValueError("timesteps must be strictly decreasing and end at 1")
        if self.mode == "ddpm" and any(a - b != 1 for a, b in zip(seq, seq[1:])):
            raise ValueError("ddpm sampling needs adjacent timesteps")
        return seq


def _predict(denoiser: DenoiserFn, x_t, c, t, clip=None) -> np.ndarray:
    x0_hat = np.asarray(denoiser(x_t, c, t), dtype=np.float64)
    if clip is not None:
        x0_hat = np.clip(x0_hat, clip[0], clip[1])
    return x0_hat


def ddpm_step_params(x_t, c, t: int, denoiser: DenoiserFn, adapter: ContextAdapter,
                     schedule: NoiseSchedule, clip=None) -> tuple[np.ndarray, GaussianParams]:
    """Return ``(x0_hat, kernel)``: the forward posterior with ``x0_hat`` inserted."""
    if not 1 <= t <= schedule.T:
        raise IndexError(f"t must lie in [1, {schedule.T}], got {t}")
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_hat = _predict(denoiser, x_t, c, t, clip)
    b_t = bias(adapter, schedule, x0_hat, c, t)
    b_prev = bias(adapter, schedule, x0_hat, c, t - 1)
    return x0_hat, posterior_from_bias(x_t, x0_hat, b_t, b_prev, t, schedule)


def ddpm_step(x_t, c, t: int, denoiser: DenoiserFn, adapter: ContextAdapter,
              schedule: NoiseSchedule, rng: np.random.Generator, clip=None) -> np.ndarray:
    """One ancestral step; at ``t = 1`` the prediction is returned directly."""
    x0_hat, kernel = ddpm_step_params(x_t, c, t, denoiser, adapter, schedule, clip)
    if t == 1:
        return x0_hat
    return kernel.sample(rng)


def ddim_sigma(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t_prev]
    return float(eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev))


def ddim_kernel(x_t, x0, b_t, b_prev, t: int, t_prev: int, sigma2: float,
                schedule: NoiseSchedule) -> GaussianParams:
    """Generalized DDIM posterior with the adapter shift replacement."""
    if not 0 <= t_prev < t <= schedule.T:
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    ab, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t_prev]
    rest = 1.0 - ab_prev - sigma2
    if rest < 0:
        raise ValueError("sigma_t^2 exceeds 1 - alpha_bar_{t_prev}")
    direction = np.sqrt(rest)
    eps_hat = (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
    x_tilde = np.sqrt(ab_prev) * x0 + direction * eps_hat
    mean = x_tilde - direction * (b_t / np.sqrt(1.0 - ab))
    if not faults.active(faults.DROP_POSTERIOR_PREV_BIAS):
        mean = mean + b_prev
    return GaussianParams(mean, sigma2)


def ddim_step_params(x_t, c, t: int, t_prev: int, denoiser: DenoiserFn, adapter: ContextAdapter,
                     schedule: NoiseSchedule, eta: float = 0.0,
                     clip=None) -> tuple[np.ndarray, GaussianParams]:
    if not 1 <= t_prev < t <= schedule.T:
        raise ValueError(f"need 1 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_hat = _predict(denoiser, x_t, c, t, clip)
    sigma = ddim_sigma(schedule, t, t_prev, eta)
    b_t = bias(adapter, schedule, x0_hat, c, t)
    b_prev = bias(adapter, schedule, x0_hat, c, t_prev)
    return x0_hat, ddim_kernel(x_t, x0_hat, b_t, b_prev, t, t_prev, sigma * sigma, schedule)


def ddim_step(x_t, c, t: int, t_prev: int, denoiser: DenoiserFn, adapter: ContextAdapter,
              schedule: NoiseSchedule, eta: float, rng: np.random.Generator | None,
              clip=None) -> np.ndarray:
    """Contextualized DDIM update; deterministic (no rng draw) at ``eta = 0``."""
    _, kernel = ddim_step_params(x_t, c, t, t_prev, denoiser, adapter, schedule, eta, clip)
    if kernel.var == 0:
        return kernel.mean
    return kernel.mean + np.sqrt(kernel.var) * rng.standard_normal(np.shape(kernel.mean))


def sample_chain(n: int, c, denoiser: DenoiserFn, adapter: ContextAdapter, schedule: NoiseSchedule,
                 config: SamplerConfig, dim: int | None = None) -> np.ndarray:
    """Draw ``n`` samples, starting from ``x_T ~ N(0, I)``."""
    seq = config.sequence(schedule.T)
    dim = adapter.dim if dim is None else dim
    rng = np.random.default_rng(config.seed)
    c = _per_row(c, n) if n else np.zeros(0, dtype=np.int64)
    x = rng.standard_normal((n, dim))
    if n == 0:
        return x
    for i, t in enumerate(seq):
        if t == 1:
            return _predict(denoiser, x, c, 1, config.clip)
        t_prev = seq[i + 1]
        if config.mode == "ddpm":
            x = ddpm_step(x, c, t, denoiser, adapter, schedule, rng, config.clip)
        else:
            x = ddim_step(x, c, t, t_prev, denoiser, adapter, schedule, config.eta, rng, config.clip)
    raise AssertionError("unreachable: sequence ends at 1")


def verify_ddim_marginals(x0, c, adapter: ContextAdapter, schedule: NoiseSchedule, eta: float,
                          tolerance: float = 1e-8, sigma2_override: float | None = None) -> CheckReport:
    """Propagate moments backward through the DDIM posterior from ``t = T``
    using the true ``x0`` and compare with the closed-form marginal at each
    ``t - 1``."""
    if eta <= 0 and sigma2_override is None:
        raise ValueError("eta must be > 0")
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    q = marginal_params(x0, c, schedule.T, adapter, schedule)
    mean, var = q.mean, float(q.var)
    max_mean = max_var = 0.0
    for t in range(schedule.T, 1, -1):
        if sigma2_override is None:
            sigma2 = ddim_sigma(schedule, t, t - 1, eta) ** 2
        else:
            sigma2 = sigma2_override
        b_t = bias(adapter, schedule, x0, c, t)
        b_prev = bias(adapter, schedule, x0, c, t - 1)
        kernel = ddim_kernel(mean, x0, b_t, b_prev, t, t - 1, sigma2, schedule)
        a = np.sqrt(1.0 - schedule.alpha_bars[t - 1] - sigma2) / np.sqrt(1.0 - schedule.alpha_bars[t])
        mean = kernel.mean
        var = a * a * var + sigma2
        target = marginal_params(x0, c, t - 1, adapter, schedule)
        max_mean = max(max_mean, float(np.max(np.abs(mean - target.mean))))
        max_var = max(max_var, abs(var - target.var) / target.var)
    return CheckReport.compare("ddim_marginals", max(max_mean, max_var), tolerance,
                               max_mean_deviation=max_mean, max_rel_var_deviation=max_var,
                               eta=eta, adapter=adapter.variant, schedule=schedule.to_spec())
