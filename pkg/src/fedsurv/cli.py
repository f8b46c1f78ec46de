"""Command-line driver.

Subcommands:
  run       run an experiment grid from a config file (plus overrides)
  epsilon   moments-accountant privacy calculator
  generate  write a synthetic survival CSV

Exit codes: 0 on success, 2 if some experiment cells failed.
"""
from __future__ import annotations

import argparse
import json
import sys

from .accountant import AccountantInputs, epsilon as compute_epsilon
from .data import SynthSpec, emit_csv, generate_synthetic
from .experiment import (DP_SCHEMES, ExperimentConfig, compute_delta, emit_report,
                         format_table, run_experiment, rstd)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsurv")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment grid")
    run.add_argument("--config", help="flat key=value config file")
    run.add_argument("--scheme", help="override scheme list, comma separated")
    run.add_argument("--model", help="override model list, comma separated")
    run.add_argument("--sigma", help="override noise multipliers, comma separated")
    run.add_argument("--seed", help="override seed list, comma separated")
    run.add_argument("--out", help="output directory for report files")

    eps = sub.add_parser("epsilon", help="privacy budget calculator")
    eps.add_argument("--sigma", default="2,3", help="noise multipliers, comma separated")
    eps.add_argument("--sampling-prob", type=float, default=0.5)
    eps.add_argument("--rounds", type=int, default=50)
    eps.add_argument("--delta", type=float, default=1e-3)
    eps.add_argument("--lambda-max", type=int, default=128)
    eps.add_argument("--json", action="store_true", help="machine-readable output")

    gen = sub.add_parser("generate", help="write a synthetic survival CSV")
    gen.add_argument("out", help="destination csv path")
    gen.add_argument("--n", type=int, default=2000)
    gen.add_argument("--p", type=int, default=7)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--censor-rate", type=float, default=0.015)
    return parser


def _cmd_run(args) -> int:
    overrides = {}
    if args.scheme:
        overrides["scheme"] = args.scheme
    if args.model:
        overrides["model"] = args.model
    if args.sigma:
        overrides["privacy.sigma"] = args.sigma
    if args.seed:
        overrides["seeds"] = args.seed
    if args.out:
        overrides["out"] = args.out
    if args.config:
        cfg = ExperimentConfig.from_file(args.config, overrides)
    else:
        cfg = ExperimentConfig.from_mapping(overrides=overrides)

    def progress(job, result):
        seed, _, model, scheme, sigma, _ = job
        tag = f"{scheme}/{model}" + (f"/sigma={sigma:g}" if sigma is not None else "")
        status = "failed" if result.error else "ok"
        print(f"[seed {seed}] {tag}: {status}", file=sys.stderr)

    report = run_experiment(cfg, progress=progress)
    print(format_table(report), end="")
    for scheme in ("dpfed-post",):
        if scheme in cfg.schemes and "dpfed" in cfg.schemes:
            summary = compute_delta(report, "dpfed", scheme)
            print(f"delta dpfed -> {scheme}: average {summary['average']:+.4f}")
            print(f"rstd(cindex): dpfed {rstd(report, 'dpfed'):.4f} -> "
                  f"{scheme} {rstd(report, scheme):.4f}")
    if cfg.out_dir:
        for path in emit_report(report, cfg.out_dir):
            print(f"wrote {path}", file=sys.stderr)
    if report.failures:
        for msg in report.failures:
            print(f"FAILED {msg}", file=sys.stderr)
        return 2
    return 0


def _cmd_epsilon(args) -> int:
    sigmas = [float(s) for s in args.sigma.split(",") if s.strip()]
    lambdas = tuple(range(1, args.lambda_max + 1))
    rows = []
    for sigma in sigmas:
        inputs = AccountantInputs(sigma, args.sampling_prob, args.rounds,
                                  args.delta, lambdas)
        eps, lam = compute_epsilon(inputs)
        rows.append({"sigma": sigma, "sampling_prob": args.sampling_prob,
                     "rounds": args.rounds, "delta": args.delta,
                     "epsilon": eps, "lambda_star": lam})
    if args.json:
        for row in rows:
            print(json.dumps(row))
    else:
        print(f"{'sigma':>8} {'C':>6} {'T_cl':>6} {'delta':>10} "
              f"{'epsilon':>10} {'lambda*':>8}")
        for row in rows:
            print(f"{row['sigma']:>8g} {row['sampling_prob']:>6g} "
                  f"{row['rounds']:>6d} {row['delta']:>10g} "
                  f"{row['epsilon']:>10.4f} {row['lambda_star']:>8d}")
    return 0


def _cmd_generate(args) -> int:
    base = SynthSpec()
    spec = SynthSpec(n=args.n, p=args.p,
                     beta=base.beta if args.p == base.p else tuple([0.5] * args.p),
                     weibull_shape=base.weibull_shape,
                     weibull_scale=base.weibull_scale,
                     censor_rate=args.censor_rate, seed=args.seed)
    path = emit_csv(generate_synthetic(spec), args.out)
    print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "epsilon":
        return _cmd_epsilon(args)
    return _cmd_generate(args)


if __name__ == "__main__":
    sys.exit(main())
