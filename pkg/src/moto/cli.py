"""Command-line front end: gen-data, train, ablate, bound-report, plot."""

import argparse
import os
import sys
from dataclasses import fields

from . import config as config_mod
from .config import Config
from .errors import MotoError

ABLATION_VARIANTS = {
    "full": {},
    "no_unc": {"no_uncertainty": True, "alpha": 0.0},
    "no_bc": {"no_bc": True, "beta": 0.0},
    "no_bc_no_unc": {"no_uncertainty": True, "alpha": 0.0, "no_bc": True, "beta": 0.0},
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in fields(Config):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar="V",
                            help=f"override config field {f.name}")


def _config_from_args(args) -> Config:
    if args.config:
        cfg = config_mod.load(args.config)
    else:
        cfg = config_mod.apply_env_overrides(Config())
    overrides = {}
    for f in fields(Config):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            overrides[f.name] = config_mod._coerce(f, value, "command line")
    return cfg.replace(**overrides) if overrides else cfg


def cmd_gen_data(args) -> int:
    from .envs import generate_dataset, generate_desk_dataset, make_env, scripted_policy

    if args.env == "desk-v0":
        manifest = generate_desk_dataset(args.variant, args.episodes, args.out,
                                         seed=args.seed, action_noise=args.noise)
    else:
        env = make_env(args.env)
        manifest = generate_dataset(env, scripted_policy(env), args.episodes, args.out,
                                    seed=args.seed, action_noise=args.noise)
    print(f"wrote {args.out}: {manifest['n_episodes']} episodes, "
          f"mean return {manifest['mean_return']}, "
          f"success rate {manifest['success_rate']}")
    return 0


def cmd_train(args) -> int:
    from .trainer import Trainer, run_training

    if args.resume:
        trainer = Trainer.resume(args.run_dir)
        result = trainer.train()
    else:
        cfg = _config_from_args(args)
        result = run_training(cfg, args.run_dir)
    print(f"run complete: {result['steps']} steps, "
          f"{result['episodes_collected']} episodes collected, "
          f"final success {result.get('last_eval_success')}")
    return 0


def _run_variant(payload):
    from .config import from_dict
    from .trainer import run_training

    cfg_dict, run_dir = payload
    return run_training(from_dict(cfg_dict), run_dir)


def cmd_ablate(args) -> int:
    base = _config_from_args(args)
    jobs = []
    for name, switches in ABLATION_VARIANTS.items():
        cfg = base.replace(**switches)
        jobs.append((cfg.to_dict(), os.path.join(args.out_dir, name)))
    if args.parallel:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(len(jobs)) as pool:
            results = pool.map(_run_variant, jobs)
    else:
        results = [_run_variant(job) for job in jobs]
    for (name, _), result in zip(ABLATION_VARIANTS.items(), results):
        print(f"{name}: final success {result.get('last_eval_success')}")
    return 0


def cmd_bound_report(args) -> int:
    from .theory import bound_report

    report = bound_report(args.run_dir, n_eval=args.n_eval, horizon=args.bound_horizon)
    print(f"fitted scale c={report.fitted_scale:.4g}, "
          f"spearman={report.spearman:.3f}, bound holds: {report.bound_holds}")
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_bound, plot_runs

    written = plot_runs(args.runs, args.out)
    for run_dir in args.runs:
        if os.path.exists(os.path.join(run_dir, "report", "bound_report.json")):
            written.append(plot_bound(run_dir, args.out))
    print("wrote: " + ", ".join(written))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moto",
                                     description="world-model actor-critic experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a scripted-demo dataset")
    p.add_argument("--env", required=True, help="env id (reach-v0, push-v0, desk-v0)")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--variant", choices=("mixed", "partial"), default="mixed",
                   help="desk-v0 dataset composition")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run offline pre-training + online fine-tuning")
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--resume", action="store_true",
                   help="continue from the latest checkpoint in run-dir")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run the 4-variant ablation matrix")
    p.add_argument("--config", default=None, help="base YAML config file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--parallel", action="store_true",
                   help="run variants in parallel processes")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bound-report", help="gap vs uncertainty across checkpoints")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--n-eval", type=int, default=20)
    p.add_argument("--bound-horizon", type=int, default=None,
                   help="replay horizon (defaults to the config horizon)")
    p.set_defaults(func=cmd_bound_report)

    p = sub.add_parser("plot", help="emit figures for one or more runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MotoError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
