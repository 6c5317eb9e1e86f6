"""Context adapters: the relational function r(x0, c, t) and its bias.

Three variants share one call signature ``adapter(x0, c, t)``:

* :class:`ZeroAdapter` returns zeros and reduces every kernel to plain DDPM.
* :class:`LinearToyAdapter` returns ``r_t * x0`` with ``r_t >= 0``.
* :class:`LearnedAdapter` mixes projected ``x0`` features with a projected
  (class embedding, timestep features) vector through an elementwise product.

Conditions ``c`` are integer class ids.
"""
from __future__ import annotations

import numpy as np

from . import nn
from .schedule import NoiseSchedule, coef, context_gain


def _rows(x0):
    x0 = np.asarray(x0, dtype=np.float64)
    return (x0[None, :], True) if x0.ndim == 1 else (x0, False)


def _per_row(v, n: int) -> np.ndarray:
    v = np.asarray(v)
    return np.broadcast_to(v, (n,)) if v.ndim == 0 else v


class ContextAdapter:
    variant = "abstract"
    params: nn.ParamSet | None = None

    def __init__(self, dim: int):
        self.dim = int(dim)

    def _check(self, x0: np.ndarray) -> None:
        if x0.shape[-1] != self.dim:
            raise ValueError(f"adapter expects dimension {self.dim}, got {x0.shape[-1]}")

    def __call__(self, x0, c, t) -> np.ndarray:
        x, single = _rows(x0)
        self._check(x)
        out = self._eval(x, c, t)
        return out[0] if single else out

    def on_tape(self, x0: nn.Node, c, t) -> nn.Node:
        """Evaluate on ``x0``'s tape so gradients reach the adapter parameters."""
        self._check(x0.value)
        return self._tape_eval(x0, c, t)

    def _eval(self, x0, c, t):
        tape = nn.Tape()
        return self._tape_eval(tape.const(x0), c, t).value

    def to_spec(self) -> dict:
        return {"variant": self.variant, "dim": self.dim}


class ZeroAdapter(ContextAdapter):
    variant = "zero"

    def _eval(self, x0, c, t):
        return np.zeros_like(x0)

    def _tape_eval(self, x0, c, t):
        return x0.tape.const(np.zeros_like(x0.value))


class LinearToyAdapter(ContextAdapter):
    """``r(x0, c, t) = r_t * x0``; ``r`` is a constant or a length ``T + 1`` array."""

    variant = "linear_toy"

    def __init__(self, dim: int, r):
        super().__init__(dim)
        r = np.asarray(r, dtype=np.float64)
        if np.any(r < 0):
            raise ValueError("linear_toy coefficient must be non-negative")
        self.r = r

    def coefficient(self, t):
        return self.r if self.r.ndim == 0 else self.r[t]

    def _eval(self, x0, c, t):
        return coef_like(self.coefficient(t), x0.shape[0]) * x0

    def _tape_eval(self, x0, c, t):
        return nn.mul(x0, coef_like(self.coefficient(t), x0.shape[0]))

    def to_spec(self) -> dict:
        return {"variant": self.variant, "dim": self.dim, "r": self.r.tolist()}


def coef_like(v, n: int):
    v = np.asarray(v, dtype=np.float64)
    return v if v.ndim == 0 else v.reshape(n, 1)


class LearnedAdapter(ContextAdapter):
    """Learned relational network with a multiplicative interaction layer."""

    variant = "learned"

    def __init__(self, params: nn.ParamSet, dim: int, n_classes: int, T: int,
                 hidden: int = 32, cond_dim: int = 8, time_dim: int = 16):
        super().__init__(dim)
        self.params = params
        self.n_classes = int(n_classes)
        self.T = int(T)
        self.hidden = int(hidden)
        self.cond_dim = int(cond_dim)
        self.time_dim = int(time_dim)

    @classmethod
    def init(cls, dim: int, n_classes: int, T: int, rng: np.random.Generator,
             hidden: int = 32, cond_dim: int = 8, time_dim: int = 16) -> "LearnedAdapter":
        p = nn.ParamSet()
        nn.init_embedding(p, "class_embed", n_classes, cond_dim, rng)
        nn.init_dense(p, "x_proj", dim, hidden, rng)
        nn.init_dense(p, "ctx_proj", cond_dim + time_dim, hidden, rng)
        nn.init_dense(p, "out", hidden, dim, rng)
        return cls(p, dim, n_classes, T, hidden, cond_dim, time_dim)

    def _tape_eval(self, x0, c, t):
        n = x0.shape[0]
        c = _per_row(c, n)
        if np.any(c < 0) or np.any(c >= self.n_classes):
            raise ValueError(f"class id out of range [0, {self.n_classes})")
        tape = x0.tape
        p = self.params
        hx = nn.dense(p, "x_proj", x0)
        emb = nn.embedding(tape.param(p, "class_embed"), c)
        tfeat = tape.const(nn.timestep_features(_per_row(t, n), self.T, self.time_dim))
        hc = nn.dense(p, "ctx_proj", nn.concat([emb, tfeat]))
        h = nn.tanh(nn.mul(hx, hc))
        return nn.dense(p, "out", h)

    def to_spec(self) -> dict:
        return {"variant": self.variant, "dim": self.dim, "n_classes": self.n_classes,
                "T": self.T, "hidden": self.hidden, "cond_dim": self.cond_dim,
                "time_dim": self.time_dim}


def adapter_from_spec(spec: dict, params: nn.ParamSet | None = None,
                      rng: np.random.Generator | None = None) -> ContextAdapter:
    variant = spec["variant"]
    if variant == "zero":
        return ZeroAdapter(spec["dim"])
    if variant == "linear_toy":
        return LinearToyAdapter(spec["dim"], spec["r"])
    if variant == "learned":
        kw = {k: spec[k] for k in ("hidden", "cond_dim", "time_dim") if k in spec}
        if params is None:
            if rng is None:
                raise ValueError("learned adapter needs params or an rng to initialise")
            return LearnedAdapter.init(spec["dim"], spec["n_classes"], spec["T"], rng, **kw)
        return LearnedAdapter(params, spec["dim"], spec["n_classes"], spec["T"], **kw)
    raise ValueError(f"unknown adapter variant {variant!r}")


def apply_adapter(adapter: ContextAdapter, x0, c, t) -> np.ndarray:
    return adapter(x0, c, t)


def bias(adapter: ContextAdapter, schedule: NoiseSchedule, x0, c, t) -> np.ndarray:
    """``b_t(x0, c) = k_t * r(x0, c, t)``; exactly zero at ``t = 0`` and ``t = T``."""
    k = context_gain(schedule, t)
    r = adapter(x0, c, t)
    if np.ndim(k) and r.ndim == 2:
        k = k[:, None]
    return k * r


def bias_on_tape(adapter: ContextAdapter, schedule: NoiseSchedule, x0: nn.Node, c, t) -> nn.Node:
    return nn.mul(adapter.on_tape(x0, c, t), coef(schedule.k_gains, t))


def estimate_lipschitz(adapter: ContextAdapter, x0s, cs, t, n_pairs: int = 10_000,
                       rng: np.random.Generator | None = None) -> float:
    """Largest observed ``|r(x) - r(x')| / |x - x'|`` over random sample pairs.

    Both members of a pair are evaluated under the first member's condition,
    so the ratio measures sensitivity to ``x0`` alone. The result is a lower
    bound on the true constant.
    """
    x0s = np.atleast_2d(np.asarray(x0s, dtype=np.float64))
    n = x0s.shape[0]
    cs = _per_row(cs, n)
    if n < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(0) if rng is None else rng
    i = rng.integers(0, n, n_pairs)
    j = rng.integers(0, n - 1, n_pairs)
    j = j + (j >= i)
    dx = np.linalg.norm(x0s[i] - x0s[j], axis=1)
    keep = dx > 0
    if not np.any(keep):
        raise ValueError("all sampled pairs are identical points")
    i, j, dx = i[keep], j[keep], dx[keep]
    ri = adapter(x0s[i], cs[i], t)
    rj = adapter(x0s[j], cs[i], t)
    return float(np.max(np.linalg.norm(ri - rj, axis=1) / dx))
