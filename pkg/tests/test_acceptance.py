"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines as they
happen; otherwise they are repeated in the terminal summary.
"""
import time
from functools import lru_cache

import numpy as np
import pytest

from acceptance_log import record
from ctxdiff import faults
from ctxdiff.adapter import LinearToyAdapter, ZeroAdapter
from ctxdiff.data import default_means, generate
from ctxdiff.forward import (posterior_params, random_bayes_probes, sample_marginal,
                             verify_bayes_identity, verify_composition)
from ctxdiff.reverse import SamplerConfig, ddim_step, ddpm_step, sample_chain, verify_ddim_marginals
from ctxdiff.schedule import make_schedule
from ctxdiff.toy_oracle import contextdiff_optimal_error, ddpm_optimal_error
from ctxdiff.training import Model, TrainConfig, compare_nelbo, lambda_weight, loss_batch, train
from ctxdiff.verify import (ETAS, adapter_grid, check_gradients, check_lambda_bound,
                            check_mutations, check_oracle, oracle_seed, oracle_table, schedule_grid,
                            small_model)
from vanilla_ref import Reference, cosine_betas, linear_betas
from worked import WORKED


@pytest.fixture(scope="module")
def grid():
    rng = np.random.default_rng(0)
    return [(s, adapter_grid(2, 2, s.T, rng)) for s in schedule_grid()]


def test_criterion_01_composition(grid):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_mean = worst_var = 0.0
    for s, adapters in grid:
        for ad in adapters:
            x0 = rng.standard_normal((8, 2))
            rep = verify_composition(x0, rng.integers(0, 2, 8), ad, s)
            worst_mean = max(worst_mean, rep.details["max_mean_deviation"])
            worst_var = max(worst_var, rep.details["max_rel_var_deviation"])
    secs = time.perf_counter() - start
    ok = worst_mean < 1e-10 and worst_var < 1e-10 and secs < 10
    record(1, "transition composition", ok,
           f"mean dev {worst_mean:.2e}, rel var dev {worst_var:.2e} (tol 1e-10)", secs)
    assert ok


def test_criterion_02_bayes_identity(grid):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for s, adapters in grid:
        for ad in adapters:
            t = rng.integers(2, s.T + 1, 1000)
            x0 = rng.standard_normal((1000, 2))
            c = rng.integers(0, 2, 1000)
            x_prev, x_t = random_bayes_probes(x0, c, t, ad, s, rng)
            worst = max(worst, verify_bayes_identity(x0, c, t, ad, s, x_prev, x_t).max_deviation)
    secs = time.perf_counter() - start
    ok = worst < 1e-8 and secs < 10
    record(2, "Bayes identity", ok, f"max log-density gap {worst:.2e} (tol 1e-8)", secs)
    assert ok


def test_criterion_03_ddim_marginals(grid):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for s, adapters in grid:
        for ad in adapters:
            x0 = rng.standard_normal((4, 2))
            c = rng.integers(0, 2, 4)
            for eta in ETAS:
                worst = max(worst, verify_ddim_marginals(x0, c, ad, s, eta).max_deviation)
    secs = time.perf_counter() - start
    ok = worst < 1e-8 and secs < 10
    record(3, "DDIM marginals", ok, f"max dev {worst:.2e} over eta {ETAS} (tol 1e-8)", secs)
    assert ok


def test_criterion_04_toy_oracle():
    start = time.perf_counter()
    # the table that `ctxdiff verify --seed 0` builds
    rows = oracle_table(oracle_seed(0), n=1_000_000)
    reports = {r.check: r for r in check_oracle(rows)}
    z_ddpm = max(abs(r["mc_error"] - r["ddpm_error"]) / r["mc_se"] for r in rows if r["r"] == 0)
    worked_ok = (ddpm_optimal_error(1.0, 0.5, 2) == pytest.approx(1.0, rel=1e-12)
                 and contextdiff_optimal_error(1.0, 0.5, 0.2, 2) == pytest.approx(0.7559478, abs=1e-7))
    secs = time.perf_counter() - start
    ok = all(r.passed for r in reports.values()) and z_ddpm <= 3 and worked_ok and secs < 60
    z = reports["toy_oracle_mc_agreement"].max_deviation
    gap = reports["toy_oracle_error_reduction"].max_deviation
    record(4, "toy oracle agreement", ok,
           f"max |MC - closed form| {z:.2f} SE (tol 3), max context gain {gap:.3f} (< 0)", secs)
    assert ok


def _reduction_devs(ref: Reference, s, rng) -> dict:
    zero = ZeroAdapter(2)
    model = small_model(rng, s, adapter=zero)
    den = model.denoiser
    n = 32
    x0 = rng.standard_normal((n, 2))
    c = rng.integers(0, 2, n)
    t = rng.integers(1, s.T + 1, n)
    seed = int(rng.integers(2**32))

    def f(x, tt):
        return den(x, c, tt)

    devs = {}
    x_t = sample_marginal(x0, c, t, zero, s, np.random.default_rng(seed)).x_t
    eps = np.random.default_rng(seed).standard_normal((n, 2))
    devs["forward"] = np.max(np.abs(x_t - ref.q_sample(x0, t, eps)))
    tm = s.T // 2
    q = posterior_params(x_t, x0, c, tm, zero, s)
    m, v = ref.posterior(x_t, x0, tm)
    devs["posterior"] = max(np.max(np.abs(q.mean - m)), abs(q.var - v))
    devs["ddpm"] = max(np.max(np.abs(ddpm_step(x_t, c, tt, den, zero, s, np.random.default_rng(seed))
                                     - ref.ddpm_step(x_t, tt, f, np.random.default_rng(seed))))
                       for tt in (s.T, tm, 2, 1))
    devs["ddim"] = max(np.max(np.abs(ddim_step(x_t, c, tt, tp, den, zero, s, eta, np.random.default_rng(seed))
                                     - ref.ddim_step(x_t, tt, tp, f, eta, np.random.default_rng(seed))))
                       for eta in (0.0, 0.5, 1.0) for tt, tp in ((tm, tm - 1), (s.T, 1), (s.T, tm)))
    devs["loss"] = abs(loss_batch(x0, c, model, np.random.default_rng(seed)).loss
                       - ref.x0_loss(x0, f, np.random.default_rng(seed)))
    return devs


def test_criterion_05_vanilla_reduction():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    cases = [(Reference(linear_betas(1000, 0.00085, 0.012)), make_schedule("linear", 1000, 0.00085, 0.012)),
             (Reference(cosine_betas(1000)), make_schedule("cosine", 1000)),
             (Reference(linear_betas(20, 1e-4, 0.02)), make_schedule("linear", 20, 1e-4, 0.02))]
    worst: dict[str, float] = {}
    for ref, s in cases:
        assert np.array_equal(ref.abar, s.alpha_bars)
        for name, dev in _reduction_devs(ref, s, rng).items():
            worst[name] = max(worst.get(name, 0.0), float(dev))
    secs = time.perf_counter() - start
    ok = all(v == 0.0 for v in worst.values())
    record(5, "zero-adapter reduction", ok,
           "bitwise " + ", ".join(f"{k}={v:g}" for k, v in worst.items()), secs)
    assert ok


def test_criterion_06_gradients():
    start = time.perf_counter()
    reports = [check_gradients(seed) for seed in range(10)]
    worst = max(r.max_deviation for r in reports)
    secs = time.perf_counter() - start
    ok = all(r.passed for r in reports) and worst < 1e-4
    record(6, "full-loss gradient check", ok, f"max rel error {worst:.2e} over 10 seeds (tol 1e-4)", secs)
    assert ok


TOY = {"generator": "toy-gaussian", "n": 10_000, "n_classes": 2, "dim": 2, "sigma": 0.5, "seed": 0}
HELD_OUT = dict(TOY, n=2000, seed=1)
SCHEDULE = {"kind": "cosine", "T": 100}


@lru_cache(maxsize=None)
def trained_model(seed: int, variant: str) -> Model:
    ds = generate(TOY)
    cfg = TrainConfig(schedule=SCHEDULE, adapter={"variant": variant}, steps=5000, seed=seed)
    state, _ = train(cfg, ds.x0, ds.classes, ds.n_classes)
    return state.model


def test_criterion_07_nelbo_paired():
    start = time.perf_counter()
    held = generate(HELD_OUT)
    wins = 0
    parts = []
    for seed in range(5):
        cmp = compare_nelbo(held.x0, held.classes, trained_model(seed, "learned"),
                            trained_model(seed, "zero"), seed=seed)
        win = cmp["difference"] <= 0 and cmp["ci_high"] <= 0.02
        wins += win
        parts.append(f"{cmp['difference']:+.3f} [{cmp['ci_low']:+.3f}, {cmp['ci_high']:+.3f}]")
    secs = time.perf_counter() - start
    ok = wins >= 4 and secs < 600
    record(7, "paired NELBO (bits/dim)", ok, f"{wins}/5 seeds qualify; " + "; ".join(parts), secs)
    assert ok


def class_mean_errors(model: Model) -> dict[str, float]:
    """Largest distance between a per-class sample mean and its true mean."""
    target = default_means(2)
    c = np.repeat([0, 1], 1000)
    errs = {}
    for label, cfg in (("ddpm", SamplerConfig("ddpm", seed=0)),
                       ("ddim/10", SamplerConfig("ddim", stride=10, eta=0.0, seed=0))):
        x = sample_chain(len(c), c, model.denoiser, model.adapter, model.schedule, cfg)
        means = np.stack([x[c == k].mean(axis=0) for k in range(2)])
        errs[label] = float(np.max(np.linalg.norm(means - target, axis=1)))
    return errs


def test_criterion_08_class_means():
    start = time.perf_counter()
    errs = class_mean_errors(trained_model(0, "learned"))
    # same run with the adapter frozen at zero, reported for context only
    base = class_mean_errors(trained_model(0, "zero"))
    secs = time.perf_counter() - start
    ok = all(e < 0.15 for e in errs.values())
    record(8, "per-class sample means", ok,
           ", ".join(f"{k} max err {v:.3f}" for k, v in errs.items()) + " (tol 0.15); zero-adapter run "
           + ", ".join(f"{k} {v:.3f}" for k, v in base.items()), secs)
    assert ok


def test_criterion_09_mutations():
    start = time.perf_counter()
    reports = check_mutations(0)
    s = make_schedule("linear", 20, 0.00085, 0.012)
    x0 = np.random.default_rng(9).standard_normal((8, 2)) + 1.0
    c = np.zeros(8, dtype=np.int64)
    with faults.inject(faults.DROP_TRANSITION_PREV_BIAS):
        comp_fails = not verify_composition(x0, c, LinearToyAdapter(2, 0.2), s).passed
    secs = time.perf_counter() - start
    devs = [r.max_deviation for r in reports]
    ok = all(r.passed for r in reports) and comp_fails and min(devs) >= 1e-3
    record(9, "mutation sensitivity", ok,
           f"deviations under faults {', '.join(f'{d:.2e}' for d in devs)} (need >= 1e-3)", secs)
    assert ok


def test_criterion_10_lambda():
    start = time.perf_counter()
    lam = float(lambda_weight("lipschitz", WORKED, 2, np.full(4, 0.2)))
    bound = check_lambda_bound(0, states=1000)
    secs = time.perf_counter() - start
    ok = abs(lam - 0.366543) <= 1e-6 and bound.passed
    record(10, "lambda weight and KL bound", ok,
           f"lambda {lam:.7f} (expect 0.366543), KL excess over bound {bound.max_deviation:.2e}", secs)
    assert ok
