"""Command-line entry point.

Subcommands: gen-data, train-model, train-policy, run, eval, bound-check,
sweep, gradcheck.  Exit codes: 0 success, 1 usage error, 2 runtime failure.
Heavy imports happen after thread limits are applied, so --threads can cap
BLAS pools before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moan", description=__doc__)
    parser.add_argument("--config", help="experiment configuration file")
    parser.add_argument("--seed", type=int, help="override [run] seed")
    parser.add_argument("--out", help="output root (default: $MOAN_OUT_DIR or ./moan_out)")
    parser.add_argument("--threads", type=int, help="override [run] threads")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate (or locate) the configured dataset")
    sub.add_parser("train-model", help="stage 1 only: train the dynamics model")
    p = sub.add_parser("train-policy", help="stage 2 only: optimize the policy offline")
    p.add_argument("--model-ckpt", help="stage-1 checkpoint to reuse (default: the run's)")
    sub.add_parser("run", help="both stages end to end")

    p = sub.add_parser("eval", help="evaluate a policy checkpoint in the real environment")
    p.add_argument("--ckpt", required=True, help="policy checkpoint path")
    p.add_argument("--episodes", type=int, default=10)

    p = sub.add_parser("bound-check", help="random tabular trials through the bound evaluator")
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--states", type=int, default=5)
    p.add_argument("--actions", type=int, default=3)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--delta", type=float, default=1.0)

    p = sub.add_parser("sweep", help="grid ablation over alpha or eta")
    p.add_argument("--param", required=True, choices=("alpha", "eta"))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds (0..n-1)")

    p = sub.add_parser("gradcheck", help="finite-difference verification of every loss gradient")
    p.add_argument("--trials", type=int, default=20, help="random parameterizations per loss")
    return parser


def _apply_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_config(args):
    from .config import ExperimentConfig, load_config

    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.threads is not None:
        overrides["threads"] = args.threads
    if overrides:
        config = config.with_overrides(run=overrides)
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_threads(args.threads if args.threads is not None else 1)
    try:
        return _dispatch(args)
    except BrokenPipeError:
        return 0
    except Exception as exc:  # runtime failure contract
        print(f"moan: error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "bound-check":
        return _cmd_bound_check(args)
    if args.command == "gradcheck":
        return _cmd_gradcheck(args)

    config = _load_config(args)
    if args.threads is None:
        _apply_threads(int(config["run"]["threads"]))

    from . import harness

    out_root = harness.resolve_out_root(args.out or config["run"]["out_dir"])

    if args.command == "gen-data":
        path = harness.ensure_dataset(config, out_root)
        print(path)
        return 0

    if args.command == "run":
        manifest = harness.run(config, out_root)
        print(os.path.join(out_root, "runs", manifest.run_id))
        return 0

    if args.command == "sweep":
        return _cmd_sweep(args, config, out_root)
    if args.command == "train-model":
        return _cmd_train_model(config, out_root)
    if args.command == "train-policy":
        return _cmd_train_policy(config, out_root, args.model_ckpt)
    if args.command == "eval":
        return _cmd_eval(config, args)
    raise AssertionError(f"unhandled command {args.command}")


def _cmd_train_model(config, out_root) -> int:
    import numpy as np

    from . import harness, io
    from .adversarial import save_model_checkpoint, train_adversarial
    from .data import TransitionDataset

    ds_path = harness.ensure_dataset(config, out_root)
    dataset = TransitionDataset.load(ds_path)
    ensemble, disc, report = train_adversarial(dataset, config.model_config())
    run_id = config["run"]["run_id"] or f"model_{config.config_hash()[:12]}_s{config.run_seed}"
    run_dir = os.path.join(out_root, "runs", run_id)
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, "model.ckpt")
    save_model_checkpoint(path, ensemble, disc, io.config_hash(config.stage1_identity()))
    harness._write_model_metrics(run_dir, report, config.model_config().n_members)
    print(path)
    print(f"stopped after {report.stop_epoch} epochs (selected epoch {report.selected_epoch}); "
          f"holdout mse {np.mean(report.holdout_mse[report.selected_epoch]):.6f}; "
          f"disc accuracy {report.disc_accuracy[-1]:.3f}")
    return 0


def _cmd_train_policy(config, out_root, model_ckpt) -> int:
    from . import harness
    from .adversarial import load_model_checkpoint
    from .data import TransitionDataset
    from .sac import save_policy_checkpoint

    run_id = config["run"]["run_id"] or f"model_{config.config_hash()[:12]}_s{config.run_seed}"
    run_dir = os.path.join(out_root, "runs", run_id)
    ckpt = model_ckpt or os.path.join(run_dir, "model.ckpt")
    if not os.path.exists(ckpt):
        raise harness.HarnessError(f"stage-1 checkpoint {ckpt} not found; run `moan train-model` first")
    ensemble, disc = load_model_checkpoint(ckpt)
    dataset = TransitionDataset.load(harness.ensure_dataset(config, out_root))
    os.makedirs(run_dir, exist_ok=True)
    agent, history = harness._run_stage2(config, dataset, ensemble, disc, run_dir)
    path = os.path.join(run_dir, "policy.ckpt")
    save_policy_checkpoint(path, agent, config.config_hash())
    print(path)
    print(f"final eval return {history[-1].eval_return_mean:.3f} "
          f"+- {history[-1].eval_return_std:.3f}")
    return 0


def _cmd_eval(config, args) -> int:
    from .envs import evaluate_policy, make_env
    from .sac import load_policy_checkpoint

    env = make_env(config["env"]["kind"])
    agent = load_policy_checkpoint(args.ckpt)
    seed = config.run_seed if args.seed is None else args.seed
    mean, std = evaluate_policy(env, agent.policy_fn(deterministic=True), args.episodes, seed)
    print(f"{mean:.6f},{std:.6f}")
    return 0


def _cmd_bound_check(args) -> int:
    from . import harness

    out_root = harness.resolve_out_root(args.out)
    path = os.path.join(out_root, "bound_check.csv")
    rows = harness.bound_check_csv(path, args.trials, args.states, args.actions,
                                   args.gamma, args.delta, args.seed or 0)
    holds = sum(r["holds_literal"] for r in rows)
    import numpy as np

    c_stars = np.array([r["c_star"] for r in rows])
    print(path)
    print(f"literal hold rate {holds}/{len(rows)} "
          f"({100.0 * holds / len(rows):.1f}%); "
          f"c* median {np.median(c_stars):.4f}, max {c_stars.max():.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradbattery import run_battery

    worst = run_battery(trials=args.trials, verbose=True)
    print(f"worst relative error {worst:.3e}")
    return 0 if worst <= 1e-4 else 2


def _cmd_sweep(args, config, out_root) -> int:
    from . import harness

    values = [float(v) for v in args.values.split(",") if v.strip()]
    seeds = list(range(args.seeds))
    path = harness.ablation_sweep(config, args.param, values, seeds, out_root)
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
