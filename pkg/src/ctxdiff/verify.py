"""The verification suite behind ``ctxdiff verify``.

Every check returns a :class:`~ctxdiff.report.CheckReport`. Randomized inputs
come from child streams of one root seed, so a suite run is reproducible from
that seed alone.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import faults, nn
from .adapter import LearnedAdapter, LinearToyAdapter, ZeroAdapter
from .forward import (posterior_coefficients, posterior_params, random_bayes_probes,
                      sample_marginal, verify_bayes_identity, verify_composition)
from .report import CheckReport
from .reverse import Denoiser, ddim_step, ddpm_step, ddpm_step_params, verify_ddim_marginals
from .schedule import NoiseSchedule, check_invariants, make_schedule
from .toy_oracle import ToyModel, contextdiff_optimal_error, ddpm_optimal_error, mc_error
from .training import Model, lambda_weight, loss_batch
from .vanilla import VanillaDDPM

SCHEDULE_GRID = (("linear", 20), ("linear", 1000), ("cosine", 1000))
ORACLE_ALPHA_BARS = (0.1, 0.3, 0.5, 0.7, 0.9)
ORACLE_RS = (0.0, 0.1, 0.2, 0.5, 1.0)
ETAS = (0.25, 0.5, 1.0)


@dataclass
class SuiteOptions:
    seed: int = 0
    zero_only: bool = False
    mc_samples: int = 1_000_000
    bayes_cases: int = 1000
    faults: tuple[str, ...] = ()


def schedule_grid() -> list[NoiseSchedule]:
    out = []
    for kind, T in SCHEDULE_GRID:
        if kind == "linear":
            out.append(make_schedule(kind, T, 0.00085, 0.012))
        else:
            out.append(make_schedule(kind, T))
    return out


def adapter_grid(dim: int, n_classes: int, T: int, rng: np.random.Generator, zero_only: bool = False):
    grid = [ZeroAdapter(dim)]
    if not zero_only:
        grid += [LinearToyAdapter(dim, 0.1), LinearToyAdapter(dim, 0.2),
                 LearnedAdapter.init(dim, n_classes, T, rng)]
    return grid


def _label(adapter) -> str:
    if isinstance(adapter, LinearToyAdapter):
        return f"linear_toy(r={float(np.max(adapter.r)):g})"
    return adapter.variant


def _tag(report: CheckReport, schedule: NoiseSchedule, adapter, **extra) -> CheckReport:
    report.details.update(case=f"{schedule.kind} T={schedule.T} / {_label(adapter)}", **extra)
    return report


def check_schedules(schedules) -> list[CheckReport]:
    out = []
    for s in schedules:
        try:
            check_invariants(s)
            ok = True
        except ValueError:
            ok = False
        ratio = s.alpha_bars[1:] / s.alpha_bars[:-1]
        dev = float(np.max(np.abs(ratio - s.alphas[1:])))
        out.append(CheckReport("schedule_invariants", dev, 1e-12, ok and dev < 1e-12,
                               {"case": f"{s.kind} T={s.T}", "max_gain": float(s.k_gains.max())}))
    return out


def check_composition(schedules, adapters_for, rng) -> list[CheckReport]:
    out = []
    for s in schedules:
        for ad in adapters_for(s):
            x0 = rng.standard_normal((8, ad.dim))
            c = rng.integers(0, 2, 8)
            out.append(_tag(verify_composition(x0, c, ad, s), s, ad))
    return out


def check_bayes(schedules, adapters_for, rng, cases: int) -> list[CheckReport]:
    out = []
    for s in schedules:
        for ad in adapters_for(s):
            t = rng.integers(2, s.T + 1, cases)
            x0 = rng.standard_normal((cases, ad.dim))
            c = rng.integers(0, 2, cases)
            x_prev, x_t = random_bayes_probes(x0, c, t, ad, s, rng)
            out.append(_tag(verify_bayes_identity(x0, c, t, ad, s, x_prev, x_t), s, ad))
    return out


def check_ddim(schedules, adapters_for, rng) -> list[CheckReport]:
    out = []
    for s in schedules:
        for ad in adapters_for(s):
            x0 = rng.standard_normal((4, ad.dim))
            c = rng.integers(0, 2, 4)
            for eta in ETAS:
                out.append(_tag(verify_ddim_marginals(x0, c, ad, s, eta), s, ad))
    return out


def oracle_table(seed: int, n: int, d: int = 2, sigma: float = 1.0) -> list[dict]:
    """Closed-form and Monte-Carlo errors over the (alpha_bar, r) grid."""
    model = ToyModel(np.zeros((1, d)), sigma)
    rows = []
    streams = np.random.SeedSequence(seed).spawn(len(ORACLE_ALPHA_BARS) * len(ORACLE_RS))
    i = 0
    for ab in ORACLE_ALPHA_BARS:
        for r in ORACLE_RS:
            mc, se = mc_error(model, 0, ab, r, n, np.random.default_rng(streams[i]))
            i += 1
            rows.append({"alpha_bar": ab, "r": r, "d": d, "sigma": sigma,
                         "ddpm_error": ddpm_optimal_error(sigma, ab, d),
                         "contextdiff_error": contextdiff_optimal_error(sigma, ab, r, d),
                         "mc_error": mc, "mc_se": se})
    return rows


def oracle_table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) for k, v in row.items()})
    return buf.getvalue()


def check_oracle(rows: list[dict]) -> list[CheckReport]:
    z = max(abs(r["mc_error"] - r["contextdiff_error"]) / r["mc_se"] for r in rows)
    gap = max(r["contextdiff_error"] - r["ddpm_error"] for r in rows if r["r"] > 0)
    reduce = max(abs(r["contextdiff_error"] - r["ddpm_error"]) / r["ddpm_error"]
                 for r in rows if r["r"] == 0)
    return [
        CheckReport.compare("toy_oracle_mc_agreement", z, 3.0, unit="standard errors",
                            n=len(rows)),
        CheckReport("toy_oracle_error_reduction", gap, 0.0, gap < 0,
                    {"note": "max (contextdiff - ddpm) over r > 0; must be negative"}),
        # (sqrt(abar))**2 and abar can differ in the last bit
        CheckReport.compare("toy_oracle_reduction_at_zero", reduce, 1e-14, unit="relative"),
    ]


def small_model(rng: np.random.Generator, schedule: NoiseSchedule, dim: int = 2, n_classes: int = 2,
                adapter=None, hidden: int = 8) -> Model:
    den = Denoiser.init(dim, n_classes, schedule, rng, hidden=hidden, cond_dim=4, time_dim=8)
    if adapter is None:
        adapter = LearnedAdapter.init(dim, n_classes, schedule.T, rng, hidden=hidden,
                                      cond_dim=4, time_dim=8)
    return Model(schedule, den, adapter)


def check_gradients(seed: int, tolerance: float = 1e-4, step_size: float = 1e-4) -> CheckReport:
    """Finite-difference check of the full training loss with respect to both
    the denoiser and the adapter parameters."""
    rng = np.random.default_rng(seed)
    schedule = make_schedule("cosine", 10)
    model = small_model(rng, schedule)
    x0 = rng.standard_normal((4, 2)) * 1.5
    c = rng.integers(0, 2, 4)
    loss_seed = int(rng.integers(2**32))

    def loss_fn():
        res = loss_batch(x0, c, model, np.random.default_rng(loss_seed))
        return res.loss, [res.theta_grads, res.phi_grads]

    rep = nn.grad_check([model.denoiser.params, model.adapter.params], loss_fn,
                        step_size=step_size, tolerance=tolerance)
    return CheckReport.compare("grad_check_loss", rep.max_rel_error, tolerance, seed=seed,
                               n_coords=rep.n_coords, worst=list(rep.worst) if rep.worst else None)


def _exact(name: str, dev: float, **details) -> CheckReport:
    return CheckReport(name, float(dev), 0.0, bool(dev == 0.0), details)


def check_vanilla_reduction(schedule: NoiseSchedule, rng: np.random.Generator) -> list[CheckReport]:
    """Zero adapter against the plain reference, operation by operation."""
    ref = VanillaDDPM(schedule.betas)
    zero = ZeroAdapter(2)
    model = small_model(rng, schedule, adapter=zero)
    den = model.denoiser
    n = 16
    x0 = rng.standard_normal((n, 2))
    c = rng.integers(0, 2, n)
    t = rng.integers(1, schedule.T + 1, n)
    seed = int(rng.integers(2**32))

    def predict(x, tt):
        return den(x, c, tt)

    out = []
    ns = sample_marginal(x0, c, t, zero, schedule, np.random.default_rng(seed))
    eps = np.random.default_rng(seed).standard_normal((n, 2))
    dev = np.max(np.abs(ns.x_t - ref.q_sample(x0, t, eps)))
    out.append(_exact("vanilla_forward_sample", dev))

    t_s = max(2, schedule.T // 2)
    x_t = ns.x_t
    q = posterior_params(x_t, x0, c, t_s, zero, schedule)
    m_ref, v_ref = ref.posterior(x_t, x0, t_s)
    out.append(_exact("vanilla_posterior", max(np.max(np.abs(q.mean - m_ref)), abs(q.var - v_ref))))

    devs = []
    for tt in (t_s, 1):
        a = ddpm_step(x_t, c, tt, den, zero, schedule, np.random.default_rng(seed))
        b = ref.ddpm_step(x_t, tt, predict, np.random.default_rng(seed))
        devs.append(np.max(np.abs(a - b)))
    out.append(_exact("vanilla_ddpm_step", max(devs)))

    devs = []
    for eta in (0.0, 0.5, 1.0):
        for tt, tp in ((t_s, t_s - 1), (schedule.T, 1)):
            a = ddim_step(x_t, c, tt, tp, den, zero, schedule, eta, np.random.default_rng(seed))
            b = ref.ddim_step(x_t, tt, tp, predict, eta, np.random.default_rng(seed))
            devs.append(np.max(np.abs(a - b)))
    out.append(_exact("vanilla_ddim_step", max(devs)))

    a = loss_batch(x0, c, model, np.random.default_rng(seed)).loss
    b = ref.x0_loss(x0, lambda x, tt: den(x, c, tt), np.random.default_rng(seed))
    out.append(_exact("vanilla_training_loss", abs(a - b)))
    for r in out:
        r.details["case"] = f"{schedule.kind} T={schedule.T}"
    return out


def check_perfect_denoiser(schedule: NoiseSchedule, adapter, rng) -> CheckReport:
    """With the true x0 plugged in, the sampling kernel is the forward posterior."""
    x0 = rng.standard_normal((8, adapter.dim))
    c = rng.integers(0, 2, 8)
    dev = 0.0
    for t in range(2, schedule.T + 1, max(1, schedule.T // 10)):
        x_t = sample_marginal(x0, c, t, adapter, schedule, rng).x_t
        _, p = ddpm_step_params(x_t, c, t, lambda *_: x0, adapter, schedule)
        q = posterior_params(x_t, x0, c, t, adapter, schedule)
        dev = max(dev, float(np.max(np.abs(p.mean - q.mean))), abs(float(p.var - q.var)))
    return _tag(_exact("perfect_denoiser_kernel", dev), schedule, adapter)


def check_lambda_bound(seed: int, states: int = 1000) -> CheckReport:
    """Exact posterior-mean KL against the Lipschitz-weighted x0 error on the
    linear adapter, where the Lipschitz constant is known exactly."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for kind, T in SCHEDULE_GRID:
        s = make_schedule(kind, T, 0.00085, 0.012) if kind == "linear" else make_schedule(kind, T)
        r = rng.uniform(0.0, 2.0, T + 1)
        ad = LinearToyAdapter(2, r)
        t = rng.integers(2, T + 1, states)
        x0 = rng.standard_normal((states, 2))
        x0_hat = x0 + rng.standard_normal((states, 2)) * rng.uniform(0.01, 1.0, (states, 1))
        c = np.zeros(states, dtype=np.int64)
        x_t = sample_marginal(x0, c, t, ad, s, rng).x_t
        q = posterior_params(x_t, x0, c, t, ad, s)
        p = posterior_params(x_t, x0_hat, c, t, ad, s)
        _, _, var = posterior_coefficients(s, t)
        kl = np.sum((q.mean - p.mean) ** 2, axis=1) / (2 * var)
        lam = lambda_weight("lipschitz", s, t, r)
        bound = lam ** 2 * np.sum((x0_hat - x0) ** 2, axis=1) / (2 * var)
        worst = max(worst, float(np.max((kl - bound) / bound)))
    return CheckReport.compare("lambda_kl_upper_bound", worst, 1e-12, states_per_schedule=states,
                               note="max relative excess of the exact KL over the bound")


def check_mutations(seed: int) -> list[CheckReport]:
    """Each injected fault must push its target check past tolerance by at least 1e-3."""
    rng = np.random.default_rng(seed)
    s = make_schedule("linear", 20, 0.00085, 0.012)
    ad = LinearToyAdapter(2, 0.2)
    x0 = rng.standard_normal((8, 2)) + 1.0
    c = np.zeros(8, dtype=np.int64)
    out = []
    with faults.inject(faults.DROP_TRANSITION_PREV_BIAS):
        dev = verify_composition(x0, c, ad, s).max_deviation
    out.append(CheckReport("mutation_transition_detected", dev, 1e-3, dev >= 1e-3,
                           {"note": "composition deviation under the fault; must be >= 1e-3"}))
    t = rng.integers(2, s.T + 1, 1000)
    t = t[s.k_gains[t] >= 0.1] if np.any(s.k_gains[t] >= 0.1) else t
    xs = rng.standard_normal((len(t), 2))
    cs = np.zeros(len(t), dtype=np.int64)
    x_prev, x_t = random_bayes_probes(xs, cs, t, ad, s, rng)
    with faults.inject(faults.DROP_POSTERIOR_PREV_BIAS):
        dev = verify_bayes_identity(xs, cs, t, ad, s, x_prev, x_t).max_deviation
    out.append(CheckReport("mutation_posterior_detected", dev, 1e-3, dev >= 1e-3,
                           {"note": "Bayes discrepancy under the fault; must be >= 1e-3"}))
    return out


def oracle_seed(seed: int) -> int:
    """Seed of the oracle table inside a suite run rooted at ``seed``."""
    stream = np.random.SeedSequence(seed).spawn(8)[6]
    return int(np.random.default_rng(stream).integers(2**32))


def run_suite(opts: SuiteOptions | None = None) -> tuple[list[CheckReport], dict]:
    """Run every check. Returns the reports and a dict of extra tables."""
    opts = SuiteOptions() if opts is None else opts
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(opts.seed).spawn(8)]
    schedules = schedule_grid()
    learned_cache: dict[int, list] = {}

    def adapters_for(s: NoiseSchedule):
        if s.T not in learned_cache:
            learned_cache[s.T] = adapter_grid(2, 2, s.T, streams[0], opts.zero_only)
        return learned_cache[s.T]

    with faults.inject(*opts.faults):
        reports = check_schedules(schedules)
        reports += check_composition(schedules, adapters_for, streams[1])
        reports += check_bayes(schedules, adapters_for, streams[2], opts.bayes_cases)
        reports += check_ddim(schedules, adapters_for, streams[3])
        for s in schedules:
            for ad in adapters_for(s):
                reports.append(check_perfect_denoiser(s, ad, streams[4]))
        for s in schedules[:2]:
            reports += check_vanilla_reduction(s, streams[5])
        rows = oracle_table(oracle_seed(opts.seed), opts.mc_samples)
        reports += check_oracle(rows)
        if not opts.zero_only:
            reports.append(check_gradients(int(streams[7].integers(2**32))))
            reports.append(check_lambda_bound(opts.seed))
    if not opts.zero_only and not opts.faults:
        reports += check_mutations(opts.seed)
    return reports, {"oracle_table": rows}


def summarize(reports: list[CheckReport]) -> str:
    lines = []
    for r in reports:
        case = r.details.get("case", "")
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.check:32s} dev={r.max_deviation:.3e} tol={r.tolerance:.1e}  {case}")
    n_fail = sum(not r.passed for r in reports)
    lines.append(f"{len(reports) - n_fail}/{len(reports)} checks passed")
    return "\n".join(lines)


__all__ = ["SuiteOptions", "run_suite", "oracle_seed", "summarize", "oracle_table", "oracle_table_csv",
           "check_gradients", "check_lambda_bound", "check_mutations", "check_vanilla_reduction"]
