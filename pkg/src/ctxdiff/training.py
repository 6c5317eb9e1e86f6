"""Joint training of denoiser and adapter, plus the variational bound.

The training loss is the x0-reconstruction error
``lambda_t * |f(x_t, c, t) - x0|^2`` with ``x_t`` drawn from the biased
marginal by reparameterization, so the adapter receives gradient through
``x_t``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .adapter import ContextAdapter, adapter_from_spec, bias_on_tape, estimate_lipschitz
from .forward import marginal_params, posterior_params
from .reverse import Denoiser, ddpm_step_params, denoiser_from_spec
from .schedule import NoiseSchedule, coef

LAMBDA_MODES = ("unit", "lipschitz")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    dataset: str | None = None
    schedule: dict = field(default_factory=lambda: {"kind": "cosine", "T": 100})
    adapter: dict = field(default_factory=lambda: {"variant": "learned"})
    denoiser: dict = field(default_factory=dict)
    steps: int = 5000
    batch_size: int = 128
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    lambda_mode: str = "unit"
    train_adapter: bool = True
    lipschitz_every: int = 500
    lipschitz_pairs: int = 512
    nelbo_every: int = 0
    nelbo_items: int = 256
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        problems = self.problems()
        if problems:
            raise ValueError("invalid training config:\n  " + "\n  ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if not isinstance(self.steps, int) or self.steps < 0:
            out.append("steps: must be an integer >= 0")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            out.append("batch_size: must be an integer >= 1")
        if not self.lr > 0:
            out.append("lr: must be > 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            out.append("betas: need two values in [0, 1)")
        if self.weight_decay < 0:
            out.append("weight_decay: must be >= 0")
        if self.lambda_mode not in LAMBDA_MODES:
            out.append(f"lambda_mode: must be one of {LAMBDA_MODES}")
        if self.adapter.get("variant") not in ("zero", "linear_toy", "learned"):
            out.append("adapter.variant: must be zero, linear_toy or learned")
        if self.schedule.get("kind") not in ("linear", "cosine"):
            out.append("schedule.kind: must be linear or cosine")
        else:
            try:
                NoiseSchedule.from_spec(self.schedule)
            except (ValueError, TypeError, KeyError) as exc:
                out.append(f"schedule: {exc}")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Model:
    schedule: NoiseSchedule
    denoiser: Denoiser
    adapter: ContextAdapter


@dataclass
class TrainState:
    model: Model
    config: TrainConfig
    opt_theta: nn.AdamWState
    opt_phi: nn.AdamWState | None
    rng: np.random.Generator
    step: int = 0
    loss_ema: float | None = None
    lipschitz: np.ndarray | None = None

    # ---- checkpointing

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        m = self.model
        for name, arr in m.denoiser.params.items():
            out[f"theta/{name}"] = arr
        if m.adapter.params is not None:
            for name, arr in m.adapter.params.items():
                out[f"phi/{name}"] = arr
        for tag, opt in (("theta", self.opt_theta), ("phi", self.opt_phi)):
            if opt is None:
                continue
            for name in opt.m:
                out[f"opt_{tag}/m/{name}"] = opt.m[name]
                out[f"opt_{tag}/v/{name}"] = opt.v[name]
        if self.lipschitz is not None:
            out["lipschitz"] = self.lipschitz
        return out

    def meta(self) -> dict:
        cfg = self.config.to_dict()
        return {
            "config": cfg,
            "config_hash": config_hash(cfg),
            "step": self.step,
            "opt_steps": [self.opt_theta.step, None if self.opt_phi is None else self.opt_phi.step],
            "loss_ema": self.loss_ema,
            "rng_state": self.rng.bit_generator.state,
            "model": {
                "dim": self.model.denoiser.dim,
                "n_classes": self.model.denoiser.n_classes,
                "schedule": self.model.schedule.to_spec(),
                "adapter": self.model.adapter.to_spec(),
                "denoiser": self.model.denoiser.to_spec(),
            },
        }

    def dumps(self) -> bytes:
        return nn.dumps_checkpoint(self.tensors(), self.meta())

    def save(self, path) -> bytes:
        data = self.dumps()
        with open(path, "wb") as fh:
            fh.write(data)
        return data

    @classmethod
    def loads(cls, data: bytes) -> "TrainState":
        tensors, header = nn.loads_checkpoint(data)
        cfg_dict = header["config"]
        if config_hash(cfg_dict) != header["config_hash"]:
            raise ValueError("checkpoint config hash does not match its config")
        cfg = TrainConfig(**cfg_dict)
        spec = header["model"]
        schedule = NoiseSchedule.from_spec(spec["schedule"])

        def group(prefix):
            return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

        theta = nn.ParamSet(group("theta/"))
        phi = group("phi/")
        denoiser = denoiser_from_spec(spec["denoiser"], schedule, theta)
        adapter = adapter_from_spec(spec["adapter"], nn.ParamSet(phi) if phi else None)
        model = Model(schedule, denoiser, adapter)
        s_theta, s_phi = header["opt_steps"]
        opt_theta = nn.AdamWState(group("opt_theta/m/"), group("opt_theta/v/"), s_theta)
        opt_phi = None if s_phi is None else nn.AdamWState(group("opt_phi/m/"), group("opt_phi/v/"), s_phi)
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng_state"]
        return cls(model, cfg, opt_theta, opt_phi, rng, header["step"], header["loss_ema"],
                   tensors.get("lipschitz"))

    @classmethod
    def load(cls, path) -> "TrainState":
        with open(path, "rb") as fh:
            return cls.loads(fh.read())


# ---------------------------------------------------------------- loss


def lambda_weight(mode: str, schedule: NoiseSchedule, t, lipschitz=None):
    """Per-timestep loss weight.

    ``unit`` gives 1. ``lipschitz`` gives the coefficient that turns the
    x0 error into an upper bound on the posterior-mean mismatch, using
    adapter Lipschitz estimates ``lipschitz[t]`` (length ``T + 1``).
    """
    if mode == "unit":
        return np.ones(np.shape(t)) if np.ndim(t) else 1.0
    if mode != "lipschitz":
        raise ValueError(f"unknown lambda mode {mode!r}")
    if lipschitz is None:
        raise ValueError("lipschitz mode needs Lipschitz estimates")
    C = np.asarray(lipschitz, dtype=np.float64)
    t = np.asarray(t)
    ab, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t - 1]
    beta, alpha = schedule.betas[t], schedule.alphas[t]
    k, k_prev = schedule.k_gains[t], schedule.k_gains[t - 1]
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    out = c0 + ct * k * C[t] + k_prev * C[t - 1]
    return float(out) if out.ndim == 0 else out


def lipschitz_profile(adapter: ContextAdapter, schedule: NoiseSchedule, x0s, cs, n_pairs: int = 512,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Estimated Lipschitz constant of the adapter at every ``t = 0..T``."""
    rng = np.random.default_rng(0) if rng is None else rng
    return np.array([estimate_lipschitz(adapter, x0s, cs, t, n_pairs, rng)
                     for t in range(schedule.T + 1)])


@dataclass
class LossResult:
    loss: float
    theta_grads: dict[str, np.ndarray]
    phi_grads: dict[str, np.ndarray] | None
    t: np.ndarray
    per_item: np.ndarray


def loss_batch(x0, c, model: Model, rng: np.random.Generator, lambda_mode: str = "unit",
               lipschitz=None) -> LossResult:
    """Batch-mean weighted reconstruction loss and its exact gradients.

    Draws ``t`` uniformly from ``1..T`` then ``eps ~ N(0, I)`` from ``rng``
    (in that order).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise ValueError("loss_batch needs a non-empty (n, d) batch")
    sched, den, ad = model.schedule, model.denoiser, model.adapter
    n, d = x0.shape
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal((n, d))
    lam = lambda_weight(lambda_mode, sched, t, lipschitz)

    tape = nn.Tape()
    x0n = tape.const(x0)
    mean = nn.add(tape.const(coef(np.sqrt(sched.alpha_bars), t) * x0),
                  bias_on_tape(ad, sched, x0n, c, t))
    x_t = nn.add(mean, tape.const(coef(np.sqrt(1.0 - sched.alpha_bars), t) * eps))
    pred = den.on_tape(x_t, c, t)
    diff = nn.sub(pred, x0n)
    per = nn.mul(nn.sum_rows(nn.mul(diff, diff)), lam)
    loss = nn.mean(per)
    if not np.all(np.isfinite(per.value)):
        bad = np.flatnonzero(~np.isfinite(per.value))
        raise FloatingPointError(f"non-finite loss at batch indices {bad.tolist()}")
    grads = nn.backward(tape, loss)
    phi = grads.for_params(ad.params) if ad.params is not None else None
    return LossResult(float(loss.value), grads.for_params(den.params), phi, t, per.value)


# ---------------------------------------------------------------- NELBO


@dataclass
class NelboResult:
    bpd: float
    per_item_bpd: np.ndarray
    terms: dict

    def to_dict(self) -> dict:
        return {"bpd": self.bpd, "terms": self.terms}


def gaussian_kl_same_var(mean_q, mean_p, var) -> np.ndarray:
    return np.sum((mean_q - mean_p) ** 2, axis=-1) / (2.0 * var)


def prior_kl(mean, var) -> np.ndarray:
    """``KL(N(mean, var I) || N(0, I))`` per row."""
    d = mean.shape[-1]
    return 0.5 * (d * (var - 1.0 - np.log(var)) + np.sum(mean ** 2, axis=-1))


def nelbo(x0, c, model: Model, rng: np.random.Generator, mc_samples: int = 1,
          recon_std: float = 1e-3) -> NelboResult:
    """Monte-Carlo estimate of the variational bound, in bits per dimension.

    Prior term in closed form; each interior term is the exact Gaussian KL
    between the forward posterior and the sampling kernel at a fresh
    ``x_t ~ q(x_t | x0, c)``; reconstruction uses ``N(x0_hat, recon_std^2 I)``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n, d = x0.shape
    sched, den, ad = model.schedule, model.denoiser, model.adapter
    T = sched.T
    qT = marginal_params(x0, c, T, ad, sched)
    prior = prior_kl(qT.mean, qT.var)
    interior = np.zeros((T + 1, n))
    recon = np.zeros(n)
    for _ in range(mc_samples):
        for t in range(2, T + 1):
            x_t = marginal_params(x0, c, t, ad, sched).sample(rng)
            q = posterior_params(x_t, x0, c, t, ad, sched)
            _, p = ddpm_step_params(x_t, c, t, den, ad, sched)
            interior[t] += gaussian_kl_same_var(q.mean, p.mean, q.var)
        x_1 = marginal_params(x0, c, 1, ad, sched).sample(rng)
        x0_hat = den(x_1, c, 1)
        recon += 0.5 * (d * math.log(2 * math.pi * recon_std ** 2)
                        + np.sum((x0 - x0_hat) ** 2, axis=-1) / recon_std ** 2)
    interior /= mc_samples
    recon /= mc_samples
    total = prior + interior.sum(axis=0) + recon
    if not np.all(np.isfinite(total)):
        raise FloatingPointError("non-finite NELBO term")
    scale = 1.0 / (d * math.log(2.0))
    per_item = total * scale
    terms = {
        "prior_bpd": float(prior.mean() * scale),
        "recon_bpd": float(recon.mean() * scale),
        "interior_bpd": float(interior.sum(axis=0).mean() * scale),
        "interior_by_t_bpd": (interior.mean(axis=1) * scale).tolist(),
    }
    return NelboResult(float(per_item.mean()), per_item, terms)


def bootstrap_ci(values, n_boot: int = 2000, level: float = 0.95,
                 rng: np.random.Generator | None = None) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(0) if rng is None else rng
    idx = rng.integers(0, len(values), size=(n_boot, len(values)))
    means = values[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def compare_nelbo(x0, c, model: Model, baseline: Model, seed: int = 0, recon_std: float = 1e-3,
                  mc_samples: int = 1, n_boot: int = 2000) -> dict:
    """Paired bound comparison on the same items with common random numbers."""
    a = nelbo(x0, c, model, np.random.default_rng(seed), mc_samples, recon_std)
    b = nelbo(x0, c, baseline, np.random.default_rng(seed), mc_samples, recon_std)
    diff = a.per_item_bpd - b.per_item_bpd
    lo, hi = bootstrap_ci(diff, n_boot, rng=np.random.default_rng(seed + 1))
    return {"contextdiff": a.bpd, "baseline": b.bpd, "difference": float(diff.mean()),
            "ci_low": lo, "ci_high": hi}


# ---------------------------------------------------------------- training loop


def init_state(config: TrainConfig, dim: int, n_classes: int) -> TrainState:
    """Fresh parameters; denoiser, adapter and training streams are independent
    children of ``config.seed`` so paired runs share the denoiser init."""
    schedule = NoiseSchedule.from_spec(config.schedule)
    ss_theta, ss_phi, ss_train = np.random.SeedSequence(config.seed).spawn(3)
    dspec = {"dim": dim, "n_classes": n_classes, **config.denoiser}
    denoiser = denoiser_from_spec(dspec, schedule, rng=np.random.default_rng(ss_theta))
    aspec = {"dim": dim, "n_classes": n_classes, "T": schedule.T, **config.adapter}
    if aspec["variant"] == "linear_toy":
        aspec.setdefault("r", 0.2)
    adapter = adapter_from_spec(aspec, rng=np.random.default_rng(ss_phi))
    opt_phi = None
    if adapter.params is not None and config.train_adapter:
        opt_phi = nn.AdamWState.for_params(adapter.params)
    return TrainState(Model(schedule, denoiser, adapter), config,
                      nn.AdamWState.for_params(denoiser.params), opt_phi,
                      np.random.default_rng(ss_train))


def train(config: TrainConfig, x0s, cs, n_classes: int | None = None, state: TrainState | None = None,
          eval_items=None, log=None) -> tuple[TrainState, list[dict]]:
    """Run ``config.steps`` optimizer steps; returns the state and a metrics log.

    Metrics rows are ``{"step", "loss"}`` plus ``"nelbo"`` every
    ``config.nelbo_every`` steps when that is positive.
    """
    x0s = np.asarray(x0s, dtype=np.float64)
    cs = np.asarray(cs, dtype=np.int64)
    n_classes = int(cs.max()) + 1 if n_classes is None else n_classes
    if state is None:
        state = init_state(config, x0s.shape[1], n_classes)
    model = state.model
    metrics: list[dict] = []
    if config.steps and len(x0s) == 0:
        raise ValueError("empty dataset")
    target = state.step + config.steps
    while state.step < target:
        if config.lambda_mode == "lipschitz" and (
                state.lipschitz is None or state.step % config.lipschitz_every == 0):
            state.lipschitz = lipschitz_profile(model.adapter, model.schedule, x0s, cs,
                                                config.lipschitz_pairs, state.rng)
        idx = state.rng.integers(0, len(x0s), size=config.batch_size)
        try:
            res = loss_batch(x0s[idx], cs[idx], model, state.rng, config.lambda_mode, state.lipschitz)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"step {state.step}: {exc}") from exc
        nn.optimizer_step(model.denoiser.params, res.theta_grads, state.opt_theta, config.lr,
                          config.betas, config.weight_decay)
        if state.opt_phi is not None:
            nn.optimizer_step(model.adapter.params, res.phi_grads, state.opt_phi, config.lr,
                              config.betas, config.weight_decay)
        state.step += 1
        state.loss_ema = res.loss if state.loss_ema is None else 0.99 * state.loss_ema + 0.01 * res.loss
        row = {"step": state.step, "loss": res.loss}
        if config.nelbo_every and state.step % config.nelbo_every == 0:
            ex, ec = (x0s[: config.nelbo_items], cs[: config.nelbo_items]) if eval_items is None else eval_items
            row["nelbo"] = nelbo(ex, ec, model, np.random.default_rng(config.seed)).bpd
        metrics.append(row)
        if log is not None:
            log(row)
    return state, metrics
