"""Command-line entry point: every pipeline stage plus ablation runs and sweeps.

Exit codes: 0 on success, 1 on a contract error (bad input, bad flag,
missing runs), 2 when a non-finite value aborts a stage.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .datasets import BEHAVIORS, PairBatch, collect_offline, load_pairs, load_transitions, save_transitions
from .diagnostics import ablation_csv, ablation_table, ablation_text
from .dynamics import DynamicsConfig, DynamicsEnsemble
from .envs import ENV_CLASSES, anchors, evaluate_policy, make_env, normalized_score
from .harness import VARIANTS, coerce_value, derive_seed, load_config, load_policy, output_root, run_is_valid, run_lease
from .numcore import ContractError, NumericError
from .reward import RewardEnsemble

log = logging.getLogger("preflab")


class UsageError(ContractError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _overrides(pairs: list[str]) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ContractError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = coerce_value(key.strip(), value.strip())
    return out


def _config_from_args(args, **extra):
    overrides = _overrides(args.set)
    for name in ("env", "variant", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    overrides.update(extra)
    return load_config(args.config, **overrides)


# -- subcommands -----------------------------------------------------------------


def cmd_collect(args) -> int:
    env = make_env(args.env)
    ds = collect_offline(env, args.behavior, args.size, derive_seed(args.seed, "offline"))
    save_transitions(ds, args.out)
    print(f"wrote {len(ds)} transitions to {args.out}")
    return 0


def cmd_fit_dynamics(args) -> int:
    ds = load_transitions(args.data)
    env = make_env(ds.env_name)
    cfg = DynamicsConfig(n_members=args.members, n_elites=args.elites, epochs=args.epochs)
    ens = DynamicsEnsemble.for_env(env, np.random.default_rng(derive_seed(args.seed, "dynamics")), cfg)
    report = ens.fit_dataset(ds)
    ens.save(args.out)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_pretrain_reward(args) -> int:
    env = make_env(args.env)
    labeled = PairBatch.from_pairs(load_pairs(args.pairs))
    ens = RewardEnsemble.for_env(env, np.random.default_rng(derive_seed(args.seed, "reward-init")),
                                 n_members=args.members)
    report = ens.pretrain(labeled, args.steps)
    ens.save(args.out)
    print(f"pretrained {ens.n_members} members for {args.steps} steps; "
          f"loss {report.final_loss:.4f}, train accuracy {report.train_accuracy:.3f}")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    result = run_lease(config, root=args.out)
    print(f"{result.directory}: score {result.score:.2f}, reward updates {result.reward_updates}, "
          f"bound held on all batches: {result.all_gaps_hold}")
    return 0


def cmd_evaluate(args) -> int:
    env, policy = load_policy(args.run)
    est = evaluate_policy(env, policy, args.episodes, args.seed)
    J_r, J_e = anchors(env.spec.name)
    print(f"J = {est.mean:.4f} +/- {est.stderr:.4f} over {est.n} episodes; "
          f"normalized score {normalized_score(est.mean, J_r, J_e):.2f}")
    return 0


def _collect_runs(patterns: list[str]) -> list[dict]:
    dirs = set()
    for pattern in patterns:
        for hit in glob.glob(pattern):
            for result in Path(hit).rglob("result.json"):
                dirs.add(result.parent)
    runs = []
    for d in sorted(dirs):
        if run_is_valid(d):
            runs.append(json.loads((d / "result.json").read_text()))
        else:
            log.warning("skipping %s: run is not marked complete", d)
    return runs


def cmd_report(args) -> int:
    runs = _collect_runs(args.runs)
    if not runs:
        raise ContractError("no runs found")
    cells = ablation_table(runs, variants=VARIANTS if args.all_variants else None)
    if args.csv:
        Path(args.csv).write_text(ablation_csv(cells))
    print(ablation_text(cells), end="")
    return 0


def cmd_sweep(args) -> int:
    values = [v for v in args.values.split(",") if v]
    if not values:
        raise ContractError("--values must list at least one value")
    root = output_root(args.out)
    for raw in values:
        value = coerce_value(args.param, raw)
        config = _config_from_args(args, **{args.param: value})
        directory = root / f"sweep-{args.param}-{raw}" / config.env / config.variant / str(config.seed)
        result = run_lease(config, directory=directory)
        print(f"{args.param}={raw}: {directory} score {result.score:.2f} "
              f"pretrain accuracy {result.pretrain_accuracy:.3f}")
    return 0


# -- parser ------------------------------------------------------------------------


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file layered over the packaged defaults")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--env", choices=sorted(ENV_CLASSES))
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    p.add_argument("--out", help="output root (default: $PREFLAB_OUT or ./out)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="preflab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("collect", help="collect an offline transition dataset")
    p.add_argument("--env", choices=sorted(ENV_CLASSES), required=True)
    p.add_argument("--behavior", choices=BEHAVIORS, default="medium")
    p.add_argument("--size", type=int, default=20_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="transitions .jsonl path")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("fit-dynamics", help="fit the dynamics ensemble on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--members", type=int, default=7)
    p.add_argument("--elites", type=int, default=5)
    p.add_argument("--epochs", type=int, default=20)
    p.set_defaults(func=cmd_fit_dynamics)

    p = sub.add_parser("pretrain-reward", help="pretrain the reward ensemble on labeled pairs")
    p.add_argument("--env", choices=sorted(ENV_CLASSES), required=True)
    p.add_argument("--pairs", required=True, help="preference pairs .jsonl path")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--members", type=int, default=3)
    p.add_argument("--steps", type=int, default=1000)
    p.set_defaults(func=cmd_pretrain_reward)

    p = sub.add_parser("train", help="run the full pipeline for one variant and seed")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a run's saved policy under the true reward")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="ablation table over finished runs")
    p.add_argument("--runs", nargs="*", default=[], help="run directories or glob patterns")
    p.add_argument("--csv", help="also write the table as CSV")
    p.add_argument("--all-variants", action="store_true", help="show empty cells for absent variants")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="one run per value of a config key")
    _add_run_options(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 2
    except (ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
