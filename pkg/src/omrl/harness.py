"""Experiment orchestration: seeds, figure recipes, metric CSV emission.

Each figure recipe runs collection, subsampling, training of every scheme the
figure compares, and a shared final evaluation, at a chosen scale preset:
"paper" mirrors the published experiment sizes, "desk" shrinks them to
minutes on a laptop, "micro" is a smoke-test scale used by the test suite.

Determinism: every random stream is derived from (master seed, label), seeds
ascend, schemes run in recipe order, and floats are written with repr, so a
rerun with the same config and seed produces byte-identical CSVs. Evaluation
episode seeds live in their own label namespace ("eval-ep-*"), disjoint by
construction from collection ("collect-*") and training ("train-*") streams.
The OMRL_WORKERS env var bounds how many (scheme, seed) cells run at once.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import baselines, data, meta, trainers
from .envs import make_config, make_env
from .envs.uav import make_task
from .errors import ConfigError
from .rng import child_seed, seeded_rng
from .rollout import Policy, run_episode

FIGURES = ("fig3", "fig4", "fig5")

RRM_METRICS = ("rscore", "avg_reward")
UAV_METRICS = ("avg_reward", "mean_aoi", "total_power_w")

CSV_HEADER = "scheme,seed,power_factor,epoch,metric,value"


@dataclass(frozen=True)
class MetricsRow:
    scheme: str
    seed: int
    power_factor: float | None
    epoch: int
    metric: str
    value: float

    def csv(self) -> str:
        pf = "" if self.power_factor is None else repr(self.power_factor)
        return f"{self.scheme},{self.seed},{pf},{self.epoch},{self.metric},{repr(self.value)}"


@dataclass(frozen=True)
class ExperimentConfig:
    """Evaluation-protocol carrier for the CLI evaluate subcommand."""

    env_id: str
    env: dict = field(default_factory=dict)
    eval_episodes: int = 100
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "out"
    scale_preset: str = "desk"


@dataclass(frozen=True)
class Preset:
    n_seeds: int
    eval_episodes: int            # final shared evaluation
    rrm_env: dict
    uav_env: dict
    behavior: dict
    rrm_collect_episodes: int
    uav_collect_episodes: int
    fraction: float               # offline budget for fig3/fig4
    rrm_trainer: dict             # fig3 trainer overrides
    uav_trainer: dict             # fig4/fig5 trainer overrides
    fig4_factors: tuple[float, ...]
    meta_fraction: float          # fig5 offline budget
    meta_train_factors: tuple[float, ...]
    meta_test_factor: float
    meta_overrides: dict
    adapt_epochs: int


PRESETS: dict[str, Preset] = {
    "paper": Preset(
        n_seeds=3,
        eval_episodes=100,
        rrm_env={},
        uav_env={},
        behavior={},
        rrm_collect_episodes=50,
        uav_collect_episodes=200,
        fraction=0.2,
        rrm_trainer=dict(gamma=0.9, lr=1e-3, epochs=60, eval_every=5, eval_episodes=12,
                         target_sync_every=200, huber_delta=10.0, cql_alpha=5.0),
        uav_trainer=dict(gamma=0.9, lr=1e-3, epochs=60, target_sync_every=100, cql_alpha=5.0),
        fig4_factors=(10.0, 100.0),
        meta_fraction=0.05,
        meta_train_factors=meta.DEFAULT_TRAIN_FACTORS,
        meta_test_factor=meta.DEFAULT_TEST_FACTOR,
        meta_overrides=dict(inner_epochs=3, meta_iterations=20),
        adapt_epochs=20,
    ),
    "desk": Preset(
        n_seeds=3,
        eval_episodes=50,
        rrm_env=dict(num_aps=2, num_ues=8, episode_len=200, area_side_m=2000.0),
        uav_env=dict(num_uavs=2, num_devices=6, grid_cells=8, area_side_m=800.0,
                     episode_len=60),
        behavior=dict(hidden_dims=(64, 64), learn_start=300),
        rrm_collect_episodes=30,
        uav_collect_episodes=60,
        fraction=0.2,
        rrm_trainer=dict(gamma=0.9, lr=1e-3, epochs=32, eval_every=4, eval_episodes=12,
                         target_sync_every=200, huber_delta=10.0, cql_alpha=5.0),
        uav_trainer=dict(gamma=0.9, lr=1e-3, epochs=30, target_sync_every=100, cql_alpha=5.0),
        fig4_factors=(10.0, 100.0),
        meta_fraction=0.05,
        meta_train_factors=meta.DEFAULT_TRAIN_FACTORS,
        meta_test_factor=meta.DEFAULT_TEST_FACTOR,
        meta_overrides=dict(inner_epochs=3, meta_iterations=15),
        adapt_epochs=20,
    ),
    "micro": Preset(
        n_seeds=1,
        eval_episodes=3,
        rrm_env=dict(num_aps=2, num_ues=6, episode_len=40, area_side_m=1500.0),
        uav_env=dict(num_uavs=2, num_devices=3, grid_cells=5, area_side_m=500.0,
                     episode_len=20),
        behavior=dict(hidden_dims=(16,), learn_start=40, eval_episodes=1),
        rrm_collect_episodes=4,
        uav_collect_episodes=6,
        fraction=0.25,
        rrm_trainer=dict(gamma=0.9, lr=1e-3, epochs=3, eval_every=1, eval_episodes=2,
                         target_sync_every=50, hidden_dims=(16, 16), cql_alpha=5.0),
        uav_trainer=dict(gamma=0.9, lr=1e-3, epochs=3, target_sync_every=50,
                         hidden_dims=(16, 16), cql_alpha=5.0),
        fig4_factors=(10.0,),
        meta_fraction=0.2,
        meta_train_factors=(1.0, 100.0),
        meta_test_factor=10.0,
        meta_overrides=dict(inner_epochs=1, meta_iterations=2),
        adapt_epochs=2,
    ),
}

FIG3_LEARNED = ("ctde-cql", "i-cql", "bcq", "offline-dqn")
FIG3_BASELINES = ("full_reuse", "round_robin", "random_walk")
FIG4_LEARNED = ("ctde-cql", "i-cql", "ctde-dqn", "i-dqn", "bcq")
FIG4_BASELINES = ("deterministic", "random_walk")
FIG5_SCHEMES = ("m-ctde-cql", "m-i-cql", "ctde-cql", "i-cql", "ctde-dqn", "i-dqn",
                "bcq", "deterministic", "random_walk")

SCHEME_TRAINERS = {
    "ctde-cql": dict(algo="cql", mode="ctde"),
    "i-cql": dict(algo="cql", mode="independent"),
    "offline-dqn": dict(algo="dqn", mode="independent"),
    "i-dqn": dict(algo="dqn", mode="independent"),
    "ctde-dqn": dict(algo="dqn", mode="ctde"),
    "bcq": dict(algo="bcq", mode="independent"),
    "bc": dict(algo="bc", mode="independent"),
}


def baseline_policy(name: str) -> Policy:
    if name == "full_reuse":
        return baselines.FullReusePolicy()
    if name == "round_robin":
        return baselines.RoundRobinPolicy()
    if name == "random_walk":
        return baselines.RandomWalkPolicy()
    if name == "deterministic":
        return baselines.DeterministicTourPolicy()
    raise ConfigError(f"unknown baseline policy {name!r}")


def eval_episode_seeds(master_seed: int, eval_episodes: int) -> list[int]:
    """Unique test-episode seeds, disjoint from training/collection streams."""
    return [child_seed(master_seed, f"eval-ep-{e}") for e in range(eval_episodes)]


@dataclass(frozen=True)
class EvalResult:
    per_episode: dict            # metric -> list of values
    means: dict                  # metric -> (mean, std)


def evaluate(policy: Policy, env_id: str, env_config, eval_episodes: int | None = None,
             seeds=(0,), episode_seeds=None) -> EvalResult:
    """Greedy evaluation over fresh episodes; aggregates mean and std.

    Episodes either come from an explicit seed list or are derived from
    (seeds x eval_episodes) via the eval-ep label namespace.
    """
    if episode_seeds is None:
        if eval_episodes is None or eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        episode_seeds = [s for master in seeds for s in eval_episode_seeds(master, eval_episodes)]
    env = make_env(env_id, env_config)
    per: dict[str, list[float]] = {}
    for ep_seed in episode_seeds:
        result = run_episode(env, policy, ep_seed)
        for k, v in result.metrics.items():
            per.setdefault(k, []).append(float(v))
    means = {k: (float(np.mean(v)), float(np.std(v))) for k, v in per.items()}
    return EvalResult(per_episode=per, means=means)


def _worker_count() -> int:
    raw = os.environ.get("OMRL_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"OMRL_WORKERS must be an integer, got {raw!r}") from None


def _run_cells(cells: dict):
    """Run independent experiment cells, optionally on a bounded thread pool."""
    workers = _worker_count()
    if workers == 1 or len(cells) <= 1:
        return {key: fn() for key, fn in cells.items()}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {key: pool.submit(fn) for key, fn in cells.items()}
        return {key: fut.result() for key, fut in futures.items()}


def _write_rows(path: Path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in rows:
            fh.write(row.csv() + "\n")


def _write_summary(path: Path, title: str, finals: dict, schemes, seeds,
                   metrics, factors=(None,)) -> None:
    """Pairwise per-seed win counts on final metric values."""
    lines = ["figure,metric,power_factor,scheme_a,scheme_b,wins_a,wins_b,n_seeds"]
    for metric in metrics:
        for factor in factors:
            for i, a in enumerate(schemes):
                for b in schemes[i + 1 :]:
                    wins_a = wins_b = 0
                    for s in seeds:
                        va = finals[(a, s, factor)][metric]
                        vb = finals[(b, s, factor)][metric]
                        if va > vb:
                            wins_a += 1
                        elif vb > va:
                            wins_b += 1
                    pf = "" if factor is None else repr(factor)
                    lines.append(f"{title},{metric},{pf},{a},{b},{wins_a},{wins_b},{len(seeds)}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _trainer_config(scheme: str, overrides: dict, seed: int) -> trainers.TrainerConfig:
    base = dict(SCHEME_TRAINERS[scheme])
    base.update(overrides)
    base["seed"] = seed
    return trainers.TrainerConfig.from_dict(base)


# ---------------------------------------------------------------- figure 3

def _fig3_cell(scheme, seed, dataset, preset):
    cfg = _trainer_config(scheme, preset.rrm_trainer, seed)
    nets, curve = trainers.train_offline(dataset, cfg)
    return nets, curve


def run_fig3(preset: Preset, output_dir: Path, master_seed: int) -> list[Path]:
    env_config = make_config("rrm", preset.rrm_env)
    behavior = data.BehaviorConfig.from_dict(preset.behavior)
    seeds = [master_seed + i for i in range(preset.n_seeds)]

    streams = _run_cells({
        s: (lambda s=s: data.collect_online("rrm", env_config, behavior,
                                            preset.rrm_collect_episodes, s))
        for s in seeds
    })
    datasets = {s: data.subsample(streams[s], preset.fraction, seed=s) for s in seeds}

    trained = _run_cells({
        (scheme, s): (lambda scheme=scheme, s=s: _fig3_cell(scheme, s, datasets[s], preset))
        for scheme in FIG3_LEARNED
        for s in seeds
    })

    epochs = preset.rrm_trainer["epochs"]
    finals: dict = {}
    rows_by_scheme: dict[str, list[MetricsRow]] = {name: [] for name in FIG3_LEARNED + FIG3_BASELINES}
    eval_cells = {}
    for s in seeds:
        ep_seeds = eval_episode_seeds(s, preset.eval_episodes)
        for scheme in FIG3_LEARNED:
            policy = trainers.GreedyPolicy(trained[(scheme, s)][0])
            eval_cells[(scheme, s)] = (
                lambda policy=policy, ep=ep_seeds: evaluate(policy, "rrm", env_config, episode_seeds=ep)
            )
        for name in FIG3_BASELINES:
            eval_cells[(name, s)] = (
                lambda name=name, ep=ep_seeds: evaluate(baseline_policy(name), "rrm", env_config,
                                                        episode_seeds=ep)
            )
    evals = _run_cells(eval_cells)

    for scheme in FIG3_LEARNED:
        for s in seeds:
            _, curve = trained[(scheme, s)]
            for p in curve.points:
                if p.eval_score is not None:
                    rows_by_scheme[scheme].append(
                        MetricsRow(scheme, s, None, p.epoch, "rscore", p.eval_score)
                    )
            res = evals[(scheme, s)]
            finals[(scheme, s, None)] = {m: res.means[m][0] for m in RRM_METRICS}
            for m in RRM_METRICS:
                rows_by_scheme[scheme].append(MetricsRow(scheme, s, None, epochs, m, res.means[m][0]))
    for name in FIG3_BASELINES:
        for s in seeds:
            res = evals[(name, s)]
            finals[(name, s, None)] = {m: res.means[m][0] for m in RRM_METRICS}
            for m in RRM_METRICS:
                rows_by_scheme[name].append(MetricsRow(name, s, None, epochs, m, res.means[m][0]))

    paths = []
    for name in FIG3_LEARNED + FIG3_BASELINES:
        path = output_dir / f"fig3_{name}.csv"
        _write_rows(path, rows_by_scheme[name])
        paths.append(path)
    summary = output_dir / "fig3_summary.csv"
    _write_summary(summary, "fig3", finals, FIG3_LEARNED + FIG3_BASELINES, seeds, ("rscore",))
    paths.append(summary)
    return paths


# ---------------------------------------------------------------- figure 4

def run_fig4(preset: Preset, output_dir: Path, master_seed: int) -> list[Path]:
    base_config = make_config("uav", preset.uav_env)
    behavior = data.BehaviorConfig.from_dict(preset.behavior)
    seeds = [master_seed + i for i in range(preset.n_seeds)]
    factors = preset.fig4_factors

    streams = _run_cells({
        s: (lambda s=s: data.collect_online("uav", base_config, behavior,
                                            preset.uav_collect_episodes, s))
        for s in seeds
    })
    # one subsample per seed, relabeled per factor: identical dynamics, exact rewards
    budgets = {s: data.subsample(streams[s], preset.fraction, seed=s) for s in seeds}
    task_datasets = {
        (s, f): meta.relabel_rewards(budgets[s], make_task(f)) for s in seeds for f in factors
    }

    epochs = preset.uav_trainer["epochs"]
    trained = _run_cells({
        (scheme, s, f): (lambda scheme=scheme, s=s, f=f: trainers.train_offline(
            task_datasets[(s, f)], _trainer_config(scheme, preset.uav_trainer, s)))
        for scheme in FIG4_LEARNED
        for s in seeds
        for f in factors
    })

    eval_cells = {}
    for s in seeds:
        ep_seeds = eval_episode_seeds(s, preset.eval_episodes)
        for f in factors:
            env_config = base_config.with_task(make_task(f))
            for scheme in FIG4_LEARNED:
                policy = trainers.GreedyPolicy(trained[(scheme, s, f)][0])
                eval_cells[(scheme, s, f)] = (
                    lambda policy=policy, cfg=env_config, ep=ep_seeds:
                        evaluate(policy, "uav", cfg, episode_seeds=ep)
                )
            for name in FIG4_BASELINES:
                eval_cells[(name, s, f)] = (
                    lambda name=name, cfg=env_config, ep=ep_seeds:
                        evaluate(baseline_policy(name), "uav", cfg, episode_seeds=ep)
                )
    evals = _run_cells(eval_cells)

    schemes = FIG4_LEARNED + FIG4_BASELINES
    finals = {
        (scheme, s, f): {m: evals[(scheme, s, f)].means[m][0] for m in UAV_METRICS}
        for scheme in schemes for s in seeds for f in factors
    }
    paths = []
    for scheme in schemes:
        rows = [
            MetricsRow(scheme, s, f, epochs, m, finals[(scheme, s, f)][m])
            for s in seeds for f in factors for m in UAV_METRICS
        ]
        path = output_dir / f"fig4_{scheme}.csv"
        _write_rows(path, rows)
        paths.append(path)
    summary = output_dir / "fig4_summary.csv"
    _write_summary(summary, "fig4", finals, schemes, seeds, UAV_METRICS, factors)
    paths.append(summary)
    return paths


# ---------------------------------------------------------------- figure 5

def _fig5_meta_init(mode, task_datasets, preset, seed):
    overrides = dict(preset.meta_overrides)
    base = _trainer_config("ctde-cql" if mode == "ctde" else "i-cql", preset.uav_trainer, seed)
    cfg = meta.MetaConfig(
        train_tasks=tuple(task_datasets.keys()),
        base_trainer=base,
        adapt_epochs=preset.adapt_epochs,
        **overrides,
    )
    return meta.meta_train(task_datasets, cfg, seed)


def run_fig5(preset: Preset, output_dir: Path, master_seed: int) -> list[Path]:
    base_config = make_config("uav", preset.uav_env)
    behavior = data.BehaviorConfig.from_dict(preset.behavior)
    seeds = [master_seed + i for i in range(preset.n_seeds)]
    test_task = make_task(preset.meta_test_factor)
    train_tasks = tuple(make_task(f) for f in preset.meta_train_factors)
    if test_task in train_tasks:
        raise ConfigError("meta-test factor must differ from every training factor")

    streams = _run_cells({
        s: (lambda s=s: data.collect_online("uav", base_config, behavior,
                                            preset.uav_collect_episodes, s))
        for s in seeds
    })
    budgets = {s: data.subsample(streams[s], preset.meta_fraction, seed=s) for s in seeds}
    train_sets = {
        s: {t: meta.relabel_rewards(budgets[s], t) for t in train_tasks} for s in seeds
    }
    test_sets = {s: meta.relabel_rewards(budgets[s], test_task) for s in seeds}

    inits = _run_cells({
        (mode, s): (lambda mode=mode, s=s: _fig5_meta_init(mode, train_sets[s], preset, s))
        for mode in ("ctde", "independent")
        for s in seeds
    })

    def train_scheme(scheme, s):
        if scheme in ("m-ctde-cql", "m-i-cql"):
            mode = "ctde" if scheme == "m-ctde-cql" else "independent"
            cfg = _trainer_config("ctde-cql" if mode == "ctde" else "i-cql",
                                  preset.uav_trainer, s)
            nets, _ = meta.adapt(inits[(mode, s)], test_sets[s], preset.adapt_epochs, cfg)
            return nets
        cfg = replace(_trainer_config(scheme, preset.uav_trainer, s), epochs=preset.adapt_epochs)
        nets, _ = trainers.train_offline(test_sets[s], cfg)
        return nets

    learned = [sch for sch in FIG5_SCHEMES if sch not in FIG4_BASELINES]
    trained = _run_cells({
        (scheme, s): (lambda scheme=scheme, s=s: train_scheme(scheme, s))
        for scheme in learned
        for s in seeds
    })

    env_config = base_config.with_task(test_task)
    eval_cells = {}
    for s in seeds:
        ep_seeds = eval_episode_seeds(s, preset.eval_episodes)
        for scheme in FIG5_SCHEMES:
            if scheme in FIG4_BASELINES:
                policy_fn = lambda scheme=scheme, ep=ep_seeds: evaluate(
                    baseline_policy(scheme), "uav", env_config, episode_seeds=ep)
            else:
                policy = trainers.GreedyPolicy(trained[(scheme, s)])
                policy_fn = lambda policy=policy, ep=ep_seeds: evaluate(
                    policy, "uav", env_config, episode_seeds=ep)
            eval_cells[(scheme, s)] = policy_fn
    evals = _run_cells(eval_cells)

    factor = test_task.power_factor
    finals = {
        (scheme, s, factor): {m: evals[(scheme, s)].means[m][0] for m in UAV_METRICS}
        for scheme in FIG5_SCHEMES for s in seeds
    }
    paths = []
    for scheme in FIG5_SCHEMES:
        rows = [
            MetricsRow(scheme, s, factor, preset.adapt_epochs, m, finals[(scheme, s, factor)][m])
            for s in seeds for m in UAV_METRICS
        ]
        path = output_dir / f"fig5_{scheme}.csv"
        _write_rows(path, rows)
        paths.append(path)
    summary = output_dir / "fig5_summary.csv"
    _write_summary(summary, "fig5", finals, FIG5_SCHEMES, seeds, ("avg_reward",), (factor,))
    paths.append(summary)
    return paths


def run_figure(figure_id: str, scale_preset: str, output_dir, master_seed: int = 0) -> list[Path]:
    """Execute one figure recipe end to end; returns the emitted CSV paths."""
    if figure_id not in FIGURES:
        raise ConfigError(f"figure_id must be one of {FIGURES}, got {figure_id!r}")
    if scale_preset not in PRESETS:
        raise ConfigError(f"scale_preset must be one of {tuple(PRESETS)}, got {scale_preset!r}")
    preset = PRESETS[scale_preset]
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    runner = {"fig3": run_fig3, "fig4": run_fig4, "fig5": run_fig5}[figure_id]
    return runner(preset, output_dir, master_seed)
