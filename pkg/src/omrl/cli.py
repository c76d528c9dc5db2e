"""Command-line entry point.

Subcommands: collect, subsample, stats, train, meta-train, meta-test,
evaluate, figure. Exit codes: 0 success, 2 configuration error, 3 data-format
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data, harness, meta, nn, trainers
from .envs import ENV_IDS, make_config, make_env
from .envs.uav import make_task
from .errors import ConfigError, ContractViolation, DataFormatError, NumericError


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    if path.endswith((".yaml", ".yml")):
        import yaml

        out = yaml.safe_load(text)
    else:
        out = json.loads(text)
    if out is None:
        return {}
    if not isinstance(out, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return out


def cmd_collect(args) -> int:
    config = make_config(args.env, load_config_file(args.config))
    behavior = data.BehaviorConfig.from_dict(load_config_file(args.behavior))
    stream = data.collect_online(args.env, config, behavior, args.episodes, args.seed)
    data.save(stream, args.out)
    print(f"wrote {len(stream)} transitions to {args.out} "
          f"(behavior score {stream.meta['behavior_score']:.4g})")
    return 0


def cmd_subsample(args) -> int:
    dataset = data.load(getattr(args, "in"))
    out = data.subsample(dataset, args.fraction, args.seed)
    data.save(out, args.out)
    print(f"wrote {len(out)} of {len(dataset)} transitions to {args.out}")
    return 0


def cmd_stats(args) -> int:
    stats = data.dataset_stats(data.load(getattr(args, "in")))
    text = json.dumps(stats, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def cmd_train(args) -> int:
    dataset = data.load(args.dataset)
    overrides = load_config_file(args.config)
    overrides.update(algo=args.algo, mode=args.mode, seed=args.seed)
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.eval_every is not None:
        overrides["eval_every"] = args.eval_every
    config = trainers.TrainerConfig.from_dict(overrides)
    nets, curve = trainers.train_offline(dataset, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    nn.save_params(out / "policy.net", nets)
    trainers.write_curve_csv(curve, out / "curve.csv")
    print(f"wrote {out / 'policy.net'} and {out / 'curve.csv'}")
    return 0


def _parse_tasks(text: str):
    try:
        factors = [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError:
        raise ConfigError(f"could not parse task factors from {text!r}") from None
    if not factors:
        raise ConfigError("at least one task factor is required")
    return tuple(make_task(f) for f in factors)


def cmd_meta_train(args) -> int:
    stream = data.load(args.dataset, expect_env_id="uav")
    tasks = _parse_tasks(args.tasks)
    budget = data.subsample(stream, args.fraction, args.seed) if args.fraction < 1.0 else stream
    task_datasets = {t: meta.relabel_rewards(budget, t) for t in tasks}
    overrides = load_config_file(args.config)
    trainer_overrides = overrides.pop("base_trainer", {})
    base = trainers.TrainerConfig.from_dict(
        {"algo": "cql", "mode": args.mode, "seed": args.seed, **trainer_overrides}
    )
    config = meta.MetaConfig(train_tasks=tasks, base_trainer=base, **overrides)
    init = meta.meta_train(task_datasets, config, args.seed)
    meta.save_init(args.out, init)
    print(f"wrote meta-learned initialization to {args.out}")
    return 0


def cmd_meta_test(args) -> int:
    stream = data.load(args.dataset, expect_env_id="uav")
    init = meta.load_init(args.init)
    task = make_task(args.task)
    budget = data.subsample(stream, args.fraction, args.seed) if args.fraction < 1.0 else stream
    test_set = meta.relabel_rewards(budget, task)
    overrides = load_config_file(args.config)
    config = trainers.TrainerConfig.from_dict(
        {"algo": "cql", "mode": args.mode, "seed": args.seed, **overrides}
    )
    nets, curve = meta.adapt(init, test_set, args.epochs, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    nn.save_params(out / "policy.net", nets)
    trainers.write_curve_csv(curve, out / "curve.csv")
    env_config = test_set.env_config()
    result = harness.evaluate(trainers.GreedyPolicy(nets), "uav", env_config,
                              eval_episodes=args.eval_episodes, seeds=(args.seed,))
    _write_eval_csv(out / "eval.csv", f"m-adapted-{args.task}", result, args.eval_episodes)
    print(f"wrote {out / 'policy.net'}, {out / 'curve.csv'}, {out / 'eval.csv'}")
    return 0


def _write_eval_csv(path, policy_name, result, episodes) -> None:
    lines = ["policy,metric,mean,std,episodes"]
    for metric in sorted(result.means):
        mean, std = result.means[metric]
        lines.append(f"{policy_name},{metric},{repr(mean)},{repr(std)},{episodes}")
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_evaluate(args) -> int:
    config = make_config(args.env, load_config_file(args.config))
    if args.policy.startswith("checkpoint:"):
        nets = nn.load_params(args.policy.split(":", 1)[1])
        env = make_env(args.env, config)
        for i, net in enumerate(nets):
            if net.in_dim != env.obs_dim or net.out_dim != env.n_actions:
                raise ConfigError(
                    f"checkpoint net {i} is {net.in_dim}->{net.out_dim}, env needs "
                    f"{env.obs_dim}->{env.n_actions}"
                )
        if len(nets) != env.n_agents:
            raise ConfigError(f"checkpoint holds {len(nets)} nets, env has {env.n_agents} agents")
        policy = trainers.GreedyPolicy(nets)
        name = args.policy
    else:
        policy = harness.baseline_policy(args.policy)
        name = args.policy
    result = harness.evaluate(policy, args.env, config,
                              eval_episodes=args.episodes, seeds=(args.seed,))
    if args.out:
        _write_eval_csv(args.out, name, result, args.episodes)
        print(f"wrote {args.out}")
    else:
        for metric in sorted(result.means):
            mean, std = result.means[metric]
            print(f"{metric}: {mean:.6g} +- {std:.6g}")
    return 0


def cmd_figure(args) -> int:
    paths = harness.run_figure(args.id, args.preset, args.out, master_seed=args.seed)
    for p in paths:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="train an online DQN and record its experience stream")
    p.add_argument("--env", choices=ENV_IDS, required=True)
    p.add_argument("--config", help="env config overrides (json/yaml)")
    p.add_argument("--behavior", help="behavior DQN config overrides (json/yaml)")
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_collect)

    p = sub.add_parser("subsample", help="uniform transition-level subsample of a dataset")
    p.add_argument("--in", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_subsample)

    p = sub.add_parser("stats", help="action histograms, reward moments, coverage")
    p.add_argument("--in", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("train", help="offline training on a dataset")
    p.add_argument("--algo", choices=trainers.ALGOS, required=True)
    p.add_argument("--mode", choices=trainers.MODES, default="independent")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="trainer config overrides (json/yaml)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("meta-train", help="learn a Q-network initialization across tasks")
    p.add_argument("--tasks", required=True, help="comma-separated power factors")
    p.add_argument("--dataset", required=True, help="uav experience stream")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--mode", choices=trainers.MODES, default="ctde")
    p.add_argument("--config", help="meta config overrides (json/yaml)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_meta_train)

    p = sub.add_parser("meta-test", help="adapt a meta-learned init to an unseen task")
    p.add_argument("--init", required=True)
    p.add_argument("--task", type=float, required=True)
    p.add_argument("--dataset", required=True, help="uav experience stream")
    p.add_argument("--fraction", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--mode", choices=trainers.MODES, default="ctde")
    p.add_argument("--eval-episodes", type=int, default=20, dest="eval_episodes")
    p.add_argument("--config", help="trainer config overrides (json/yaml)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_meta_test)

    p = sub.add_parser("evaluate", help="greedy evaluation of a policy")
    p.add_argument("--env", choices=ENV_IDS, required=True)
    p.add_argument("--config", help="env config overrides (json/yaml)")
    p.add_argument("--policy", required=True,
                   help="full_reuse | round_robin | random_walk | deterministic | checkpoint:PATH")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("figure", help="run a full figure recipe and emit CSVs")
    p.add_argument("--id", choices=harness.FIGURES, required=True)
    p.add_argument("--preset", choices=tuple(harness.PRESETS), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_figure)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContractViolation, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
