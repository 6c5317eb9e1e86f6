"""``ctxdiff`` command line: gen-data, train, sample, nelbo, verify.

Each command resolves its configuration as flag > config file > default,
writes its outputs into ``--out`` and finishes by writing ``manifest.json``
there. Passing that manifest back as ``--config`` repeats the run.

Exit codes: 0 success, 1 failed verification, 2 bad configuration or usage,
3 training diverged, 4 missing or unwritable files.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import nullcontext

import numpy as np

from . import data as datamod
from .config import ConfigError, load_document, problems_in, resolve
from .manifest import RunManifest, blob_sha1
from .report import reports_to_json
from .reverse import SamplerConfig, sample_chain
from .training import TrainConfig, TrainingDiverged, TrainState, compare_nelbo, nelbo, train
from .verify import SuiteOptions, oracle_table_csv, run_suite, summarize

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4


class UserError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file or a previous run's manifest.json")
    p.add_argument("--seed", type=int, help="root seed for this command")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--threads", type=int, default=None,
                   help="cap on BLAS threads; results do not depend on it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxdiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a labelled toy dataset as CSV")
    _common(p)
    p.add_argument("--generator", choices=datamod.GENERATORS)
    p.add_argument("--n", type=int)
    p.add_argument("--n-classes", type=int, dest="n_classes")
    p.add_argument("--sigma", type=float)

    p = sub.add_parser("train", help="train a denoiser and adapter")
    _common(p)
    p.add_argument("--dataset", help="CSV written by gen-data")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--lambda-mode", choices=("unit", "lipschitz"), dest="lambda_mode")
    p.add_argument("--adapter", choices=("zero", "linear_toy", "learned"),
                   help="adapter variant (replaces the config's adapter.variant)")

    p = sub.add_parser("sample", help="draw class-conditional samples from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--n-per-class", type=int, dest="n_per_class")
    p.add_argument("--mode", choices=("ddpm", "ddim"))
    p.add_argument("--stride", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--clip", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--svg", action="store_true", default=None, help="also write a scatter plot")

    p = sub.add_parser("nelbo", help="evaluate the variational bound in bits per dimension")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--baseline", help="second checkpoint for a paired comparison")
    p.add_argument("--items", type=int)
    p.add_argument("--mc-samples", type=int, dest="mc_samples")
    p.add_argument("--recon-std", type=float, dest="recon_std")

    p = sub.add_parser("verify", help="run the numerical verification suite")
    _common(p)
    p.add_argument("--zero-adapter-only", action="store_true", default=None, dest="zero_adapter_only")
    p.add_argument("--fault", action="append", dest="faults", help="inject a named formula fault")
    p.add_argument("--mc-samples", type=int, dest="mc_samples")
    p.add_argument("--bayes-cases", type=int, dest="bayes_cases")
    return parser


# ---------------------------------------------------------------- helpers


def _overrides(args, names) -> dict:
    out = {n: getattr(args, n, None) for n in names}
    out["seed"] = args.seed
    return out


def _outdir(path) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise UserError(f"cannot create output directory {path}: {exc}", EXIT_IO) from exc
    if not os.access(path, os.W_OK):
        raise UserError(f"output directory {path} is not writable", EXIT_IO)
    return path


def _require(cfg: dict, section: str, *keys) -> None:
    missing = [f"{section}.{k}: required (no default)" for k in keys if not cfg.get(k)]
    if missing:
        raise ConfigError(missing)


def _read_dataset(path) -> datamod.ToyDataset:
    try:
        return datamod.read_dataset(path)
    except FileNotFoundError as exc:
        raise UserError(f"dataset not found: {path}", EXIT_IO) from exc


def _load_state(path) -> tuple[TrainState, bytes]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError as exc:
        raise UserError(f"checkpoint not found: {path}", EXIT_IO) from exc
    try:
        return TrainState.loads(blob), blob
    except ValueError as exc:
        raise UserError(f"{path}: {exc}", EXIT_CONFIG) from exc


def _write(path, text: str) -> str:
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, doc) -> int:
    cfg = resolve(doc, "data", _overrides(args, ("generator", "n", "n_classes", "sigma")))
    out = _outdir(args.out)
    try:
        ds = datamod.generate(cfg)
    except ValueError as exc:
        raise ConfigError([f"data: {exc}"]) from exc
    path = os.path.join(out, "data.csv")
    datamod.write_dataset(path, ds)
    man = RunManifest("gen-data", {"data": cfg}, cfg["seed"], ds.fingerprint())
    man.add_output(path)
    man.write(os.path.join(out, "manifest.json"))
    print(f"wrote {len(ds)} rows to {path}")
    return EXIT_OK


def cmd_train(args, doc) -> int:
    names = ("dataset", "steps", "batch_size", "lr", "weight_decay", "lambda_mode")
    cfg = resolve(doc, "train", _overrides(args, names))
    if args.adapter is not None:
        cfg["adapter"] = {**cfg["adapter"], "variant": args.adapter}
    _require(cfg, "train", "dataset")
    try:
        tc = TrainConfig(**cfg)
    except ValueError as exc:
        raise ConfigError(str(exc).splitlines()[1:] or [str(exc)]) from exc
    ds = _read_dataset(cfg["dataset"])
    out = _outdir(args.out)
    metrics_path = os.path.join(out, "metrics.csv")
    try:
        state, metrics = train(tc, ds.x0, ds.classes, n_classes=ds.n_classes)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    with open(metrics_path, "w", newline="") as fh:
        cols = ["step", "loss"] + (["nelbo"] if tc.nelbo_every else [])
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n", restval="")
        w.writeheader()
        for row in metrics:
            w.writerow({k: repr(v) for k, v in row.items()})
    ckpt_path = os.path.join(out, "checkpoint.ckpt")
    blob = state.save(ckpt_path)
    man = RunManifest("train", {"train": cfg}, cfg["seed"], ds.fingerprint())
    man.checkpoint_sha1 = blob_sha1(blob)
    man.add_output(ckpt_path)
    man.add_output(metrics_path)
    man.write(os.path.join(out, "manifest.json"))
    last = f", final loss {metrics[-1]['loss']:.5f}" if metrics else ""
    print(f"trained {tc.steps} steps{last}; checkpoint {ckpt_path}")
    return EXIT_OK


def cmd_sample(args, doc) -> int:
    names = ("checkpoint", "n_per_class", "mode", "stride", "eta", "clip", "svg")
    cfg = resolve(doc, "sample", _overrides(args, names))
    if isinstance(cfg["clip"], tuple):
        cfg["clip"] = list(cfg["clip"])
    _require(cfg, "sample", "checkpoint")
    state, blob = _load_state(cfg["checkpoint"])
    model = state.model
    n_classes = model.denoiser.n_classes
    classes = list(range(n_classes)) if cfg["classes"] is None else cfg["classes"]
    bad = [c for c in classes if not (isinstance(c, int) and 0 <= c < n_classes)]
    if bad:
        raise ConfigError([f"sample.classes: ids {bad} outside [0, {n_classes})"])
    try:
        sc = SamplerConfig(cfg["mode"], cfg["stride"], cfg["eta"], cfg["seed"],
                           tuple(cfg["clip"]) if cfg["clip"] else None)
    except ValueError as exc:
        raise ConfigError([f"sample: {exc}"]) from exc
    c = np.repeat(np.asarray(classes, dtype=np.int64), cfg["n_per_class"])
    x = sample_chain(len(c), c, model.denoiser, model.adapter, model.schedule, sc,
                     dim=model.denoiser.dim)
    out = _outdir(args.out)
    man = RunManifest("sample", {"sample": cfg}, cfg["seed"])
    man.checkpoint_sha1 = blob_sha1(blob)
    path = _write(os.path.join(out, "samples.csv"), datamod.samples_to_csv(x, c, cfg["seed"], cfg["mode"]))
    man.add_output(path)
    if cfg["svg"] and model.denoiser.dim == 2:
        man.add_output(_write(os.path.join(out, "samples.svg"), datamod.scatter_svg(x, c)))
    for k in classes:
        if np.any(c == k):
            m = x[c == k].mean(axis=0)
            print(f"class {k}: mean " + ", ".join(f"{v:+.4f}" for v in m))
    man.write(os.path.join(out, "manifest.json"))
    return EXIT_OK


def cmd_nelbo(args, doc) -> int:
    names = ("checkpoint", "dataset", "baseline", "items", "mc_samples", "recon_std")
    cfg = resolve(doc, "nelbo", _overrides(args, names))
    _require(cfg, "nelbo", "checkpoint", "dataset")
    state, blob = _load_state(cfg["checkpoint"])
    ds = _read_dataset(cfg["dataset"])
    x0, c = ds.x0[: cfg["items"]], ds.classes[: cfg["items"]]
    if len(x0) == 0:
        raise ConfigError(["nelbo.dataset: no items to evaluate"])
    res = nelbo(x0, c, state.model, np.random.default_rng(cfg["seed"]), cfg["mc_samples"],
                cfg["recon_std"])
    report = {"bpd": res.bpd, "terms": res.terms, "items": int(len(x0))}
    if cfg["baseline"]:
        base, _ = _load_state(cfg["baseline"])
        report["comparison"] = compare_nelbo(x0, c, state.model, base.model, cfg["seed"],
                                             cfg["recon_std"], cfg["mc_samples"], cfg["n_boot"])
    out = _outdir(args.out)
    path = _write(os.path.join(out, "nelbo.json"), json.dumps(report, sort_keys=True, indent=2) + "\n")
    man = RunManifest("nelbo", {"nelbo": cfg}, cfg["seed"], ds.fingerprint())
    man.checkpoint_sha1 = blob_sha1(blob)
    man.add_output(path)
    man.write(os.path.join(out, "manifest.json"))
    print(f"NELBO {res.bpd:.4f} bits/dim over {len(x0)} items")
    if "comparison" in report:
        cmp_ = report["comparison"]
        print(f"paired difference {cmp_['difference']:+.4f} bits/dim, "
              f"95% CI [{cmp_['ci_low']:+.4f}, {cmp_['ci_high']:+.4f}]")
    return EXIT_OK


def cmd_verify(args, doc) -> int:
    cfg = resolve(doc, "verify", _overrides(args, ("zero_adapter_only", "faults", "mc_samples",
                                                   "bayes_cases")))
    flag_problems = problems_in({"verify": {"faults": cfg["faults"]}})
    if flag_problems:
        raise ConfigError(flag_problems)
    opts = SuiteOptions(cfg["seed"], cfg["zero_adapter_only"], cfg["mc_samples"],
                        cfg["bayes_cases"], tuple(cfg["faults"]))
    reports, extra = run_suite(opts)
    out = _outdir(args.out)
    report_path = _write(os.path.join(out, "verify.json"), reports_to_json(reports))
    table_path = _write(os.path.join(out, "oracle_errors.csv"), oracle_table_csv(extra["oracle_table"]))
    man = RunManifest("verify", {"verify": cfg}, cfg["seed"])
    man.add_output(report_path)
    man.add_output(table_path)
    man.write(os.path.join(out, "manifest.json"))
    print(summarize(reports))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample,
            "nelbo": cmd_nelbo, "verify": cmd_verify}


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UserError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = load_document(args.config) if args.config else None
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args, doc)
    except ConfigError as exc:
        print(f"ctxdiff {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UserError as exc:
        print(f"ctxdiff {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"ctxdiff {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
