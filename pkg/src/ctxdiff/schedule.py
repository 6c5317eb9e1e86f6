"""Noise schedules and the context-gain sequence.

Every per-timestep array on :class:`NoiseSchedule` has length ``T + 1`` and is
indexed directly by ``t``. Entry 0 holds the boundary values
``alpha_bar_0 = 1``, ``k_0 = 0`` (and ``beta_0 = 0``, ``alpha_0 = 1``) so the
``t = 1`` cases of the kernels need no special handling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    beta_start: float | None = None
    beta_end: float | None = None
    betas: np.ndarray = field(repr=False, default=None)
    alphas: np.ndarray = field(repr=False, default=None)
    alpha_bars: np.ndarray = field(repr=False, default=None)
    k_gains: np.ndarray = field(repr=False, default=None)

    def to_spec(self) -> dict:
        spec = {"kind": self.kind, "T": self.T}
        if self.kind == "linear":
            spec["beta_start"] = self.beta_start
            spec["beta_end"] = self.beta_end
        return spec

    @classmethod
    def from_spec(cls, spec: dict) -> "NoiseSchedule":
        sched = make_schedule(
            spec["kind"], spec["T"], spec.get("beta_start"), spec.get("beta_end")
        )
        check_invariants(sched)
        return sched

    def timesteps(self) -> np.ndarray:
        return np.arange(1, self.T + 1)


def _linear_betas(T: int, beta_start: float, beta_end: float) -> np.ndarray:
    # endpoint-inclusive over t = 1..T
    t = np.arange(T, dtype=np.float64)
    return beta_start + t / (T - 1) * (beta_end - beta_start)


def _cosine_betas(T: int, s: float = COSINE_OFFSET) -> np.ndarray:
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos((steps / T + s) / (1 + s) * np.pi / 2) ** 2
    abar = f / f[0]
    betas = 1.0 - abar[1:] / abar[:-1]
    return np.clip(betas, 0.0, MAX_BETA)


def make_schedule(
    kind: str,
    T: int,
    beta_start: float | None = None,
    beta_end: float | None = None,
) -> NoiseSchedule:
    """Build a linear or cosine schedule of length ``T``.

    The cosine kind ignores ``beta_start``/``beta_end``.
    """
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    T = int(T)
    if kind == "linear":
        if beta_start is None or beta_end is None:
            raise ValueError("linear schedule needs beta_start and beta_end")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ValueError(
                f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )
        betas = _linear_betas(T, float(beta_start), float(beta_end))
        beta_start, beta_end = float(beta_start), float(beta_end)
    elif kind == "cosine":
        betas = _cosine_betas(T)
        beta_start = beta_end = None
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")

    betas = np.concatenate([[0.0], betas])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sqrt_ab = np.sqrt(alpha_bars)
    k = sqrt_ab * (1.0 - sqrt_ab)
    k[0] = 0.0
    k[T] = 0.0
    for arr in (betas, alphas, alpha_bars, k):
        arr.setflags(write=False)
    return NoiseSchedule(kind, T, beta_start, beta_end, betas, alphas, alpha_bars, k)


def check_invariants(sched: NoiseSchedule) -> None:
    b = sched.betas[1:]
    ab = sched.alpha_bars
    if not np.all((b > 0) & (b < 1)):
        raise ValueError("betas must lie in (0, 1)")
    if not np.all(np.diff(ab) < 0):
        raise ValueError("alpha_bar must be strictly decreasing")
    if not (0.0 < ab[-1] < 1.0):
        raise ValueError("alpha_bar_T must lie in (0, 1)")
    if sched.k_gains[0] != 0.0 or sched.k_gains[-1] != 0.0:
        raise ValueError("k_0 and k_T must be zero")
    if np.any(sched.k_gains < 0) or np.any(sched.k_gains > 0.25):
        raise ValueError("k_t must lie in [0, 0.25]")


def _check_t(sched: NoiseSchedule, t, lo: int = 0) -> None:
    ta = np.asarray(t)
    if ta.size and (np.any(ta < lo) or np.any(ta > sched.T)):
        raise IndexError(f"timestep out of range [{lo}, {sched.T}]: {t!r}")


def context_gain(sched: NoiseSchedule, t):
    """Return ``k_t``; zero at both ends of the chain."""
    _check_t(sched, t)
    return sched.k_gains[t]


def gain_from_alpha_bar(alpha_bar):
    s = np.sqrt(alpha_bar)
    return s * (1.0 - s)


def coef(arr: np.ndarray, t):
    """Look up a schedule array at ``t`` shaped to broadcast over ``(n, d)`` rows."""
    v = arr[t]
    if np.ndim(v):
        return v[:, None]
    return v
