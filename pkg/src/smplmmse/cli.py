"""Command-line entry point: ``smplmmse <subcommand> ...``."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import harness
from .baselines import DenoiserSpec, amp_estimate, genie_mmse, plain_lmmse
from .bounds import bound_report
from .errors import ConfigurationError, DomainError, NumericalDegeneracyError
from .lmmse_core import PriorMoments
from .signal_model import ActiveDistribution, SparsityPrior, db_to_linear, load_instance, save_instance, synthesize
from .turbo import TurboConfig, estimate

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


def _threads_default():
    env = os.environ.get("THREADS")
    if env is None:
        return 1
    try:
        return int(env)
    except ValueError:
        raise ConfigurationError(f"THREADS must be an integer, got {env!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, help="worker processes (default: $THREADS or 1)")
    common.add_argument("--out", help="output path")
    common.add_argument("--config", help="TOML experiment config")

    p = argparse.ArgumentParser(prog="smplmmse", description="SMP-LMMSE sparse recovery benchmarks", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write one problem instance (.npz)")
    g.add_argument("--n", type=int, default=512)
    g.add_argument("--m", type=int, default=256)
    g.add_argument("--lam", type=float, default=0.125)
    g.add_argument("--active", choices=("gaussian", "chisquare"), default="gaussian")
    g.add_argument("--dof", type=int, default=4)
    g.add_argument("--snr-db", type=float, default=50.0)

    e = sub.add_parser("estimate", parents=[common], help="run one estimator on an instance file")
    e.add_argument("instance")
    e.add_argument("--estimator", choices=harness.ESTIMATORS, default="smp_lmmse")
    e.add_argument("--iterations", type=int, help="outer iterations (smp_lmmse) or AMP iterations")

    sub.add_parser("bench", parents=[common], help="run an experiment from --config")

    for name, help_ in (
        ("sweep-snr", "MSE versus SNR preset (lambda=0.04, -20..50 dB)"),
        ("sweep-iterations", "MSE versus iteration preset (50 dB, lambda=0.125)"),
    ):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--trials", type=int)
        s.add_argument("--chisquare", action="store_true", help="Bernoulli-chi-square(4) actives")

    b = sub.add_parser("bounds", parents=[common], help="analytical bounds per instance")
    b.add_argument("--trials", type=int)
    return p


def _experiment_config(args, preset_name=None):
    if args.config:
        cfg = harness.load_config(args.config)
    elif preset_name:
        cfg = harness.preset(preset_name, trials=getattr(args, "trials", None))
    else:
        raise ConfigurationError("--config is required")
    return harness.with_overrides(cfg, master_seed=args.seed, output_path=args.out)


def _emit(cfg, records, out=sys.stdout):
    meta = harness.run_metadata(cfg)
    if cfg.output_path:
        harness.write_csv(records, cfg.output_path, meta)
    else:
        out.write(harness.records_to_csv(records, meta))
    for row in harness.aggregate(records):
        last = row.iteration == cfg.iterations(row.estimator) or row.estimator.startswith("bound:")
        if last:
            print(
                f"{row.estimator:12s} snr={row.snr_db:6.1f} dB  iter={row.iteration:3d}  "
                f"mse={row.mean:.4e} ({row.mean_db:7.2f} dB) +- {row.stderr:.2e}",
                file=sys.stderr,
            )


def _run(cfg, args):
    workers = args.threads if args.threads is not None else _threads_default()
    records = harness.run_experiment(cfg, workers=workers)
    _emit(cfg, records)


def cmd_generate(args):
    active = ActiveDistribution.chisquare(args.dof) if args.active == "chisquare" else ActiveDistribution.gaussian()
    prior = SparsityPrior(args.lam, active)
    if args.m > args.n:
        raise ConfigurationError("m must not exceed n")
    inst = synthesize(prior, args.m, args.n, db_to_linear(args.snr_db), args.seed or 0)
    if not args.out:
        raise ConfigurationError("--out is required for generate")
    save_instance(inst, args.out)
    print(f"wrote {args.out}: n={inst.n} m={inst.m} |support|={len(inst.support)} sigma_w_sq={inst.sigma_w_sq:.6g}")


def cmd_estimate(args):
    try:
        inst = load_instance(args.instance)
    except FileNotFoundError:
        raise ConfigurationError(f"instance not found: {args.instance}")
    moments = PriorMoments.from_prior(inst.prior, inst.n)
    if args.estimator == "smp_lmmse":
        cfg = TurboConfig() if args.iterations is None else TurboConfig(max_outer_iterations=args.iterations)
        x_hat = estimate(inst.H, inst.y, inst.prior, moments, inst.sigma_w_sq, cfg).x_hat
    elif args.estimator == "amp":
        res = amp_estimate(inst.H, inst.y, DenoiserSpec.for_prior(inst.prior), args.iterations or 20)
        x_hat = res.x_hat
    elif args.estimator == "lmmse":
        x_hat, _ = plain_lmmse(inst.H, inst.y, inst.prior, moments, inst.sigma_w_sq)
    else:
        x_hat, _ = genie_mmse(inst.H, inst.y, inst.support, moments, inst.sigma_w_sq)
    val = harness.mse(x_hat, inst.x)
    print(f"mse {val:.10g}")
    print(f"mse_db {harness.to_db(val):.4f}")
    if args.out:
        np.save(args.out, x_hat)


def cmd_bounds(args):
    cfg = _experiment_config(args, "sweep-snr")
    cfg = harness.with_overrides(cfg, trials=args.trials)
    moments = PriorMoments.from_prior(cfg.prior, cfg.n)
    lines = ["snr_db,trial,upper_lmmse,lower_genie,prop1_trace,alpha,asymptote"]
    for i, snr_db in enumerate(cfg.snr_grid):
        for t in range(cfg.trials):
            seed = harness.trial_seed(cfg.master_seed, i, t)
            snr = db_to_linear(snr_db)
            inst = synthesize(cfg.prior, cfg.m, cfg.n, snr, seed)
            rep = bound_report(inst.H, inst.support, cfg.prior, moments, inst.sigma_w_sq, snr)
            lines.append(
                f"{snr_db!r},{t},{rep.upper_lmmse!r},{rep.lower_genie!r},{rep.prop1_trace!r},{rep.alpha!r},{rep.asymptote!r}"
            )
    text = "\n".join(lines) + "\n"
    if cfg.output_path:
        with open(cfg.output_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "generate":
            cmd_generate(args)
        elif args.command == "estimate":
            cmd_estimate(args)
        elif args.command == "bench":
            _run(_experiment_config(args), args)
        elif args.command == "sweep-snr":
            cfg = _experiment_config(args, "sweep-snr")
            if args.chisquare:
                cfg = harness.with_overrides(cfg, prior=SparsityPrior(cfg.prior.lam, ActiveDistribution.chisquare(4)))
            _run(cfg, args)
        elif args.command == "sweep-iterations":
            name = "fig3-desk-chisquare" if args.chisquare else "fig3-desk"
            _run(_experiment_config(args, name), args)
        elif args.command == "bounds":
            cmd_bounds(args)
    except (ConfigurationError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalDegeneracyError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
