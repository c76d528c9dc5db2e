"""First-order meta-learning of Q-network initializations over task families.

A task is one power factor of the data-collection reward; dynamics never
change, so task datasets are produced by exact reward relabeling of one
shared stream. Meta-training interleaves short offline adaptations per task
with a first-order (Reptile-style) pull of the initialization toward the
adapted parameters; meta-testing is ordinary offline training that simply
starts from the learned initialization instead of random weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import nn, trainers
from .data import OfflineDataset, canonical_json, config_fingerprint
from .envs import make_config
from .envs.uav import TaskSpec, make_task, uav_reward
from .errors import ConfigError, ContractViolation, DataFormatError
from .rng import child_seed, seeded_rng

DEFAULT_TRAIN_FACTORS = (1.0, 10.0, 100.0, 1000.0, 10000.0)  # 5 log-spaced tasks
DEFAULT_TEST_FACTOR = 316.0  # ~10^2.5, distinct from every training factor


def default_task_family() -> tuple[TaskSpec, ...]:
    return tuple(make_task(f) for f in DEFAULT_TRAIN_FACTORS)


@dataclass(frozen=True)
class MetaConfig:
    train_tasks: tuple[TaskSpec, ...] = field(default_factory=default_task_family)
    inner_epochs: int = 3
    inner_lr: float | None = None     # None: use base_trainer.lr
    outer_lr: float = 0.5
    decay_outer_lr: bool = True       # linear decay of the outer step to 0
    meta_iterations: int = 20
    adapt_epochs: int = 20
    meta_update: str = "reptile"      # switch reserved for a future exact-MAML
    base_trainer: trainers.TrainerConfig = field(
        default_factory=lambda: trainers.TrainerConfig(algo="cql")
    )

    def __post_init__(self):
        if not self.train_tasks:
            raise ConfigError("train_tasks must be non-empty")
        if self.meta_update != "reptile":
            raise ConfigError(f"unsupported meta_update {self.meta_update!r}")
        if self.inner_epochs < 0 or self.meta_iterations < 0 or self.adapt_epochs < 0:
            raise ConfigError("epoch/iteration counts must be non-negative")
        if self.outer_lr <= 0:
            raise ConfigError("outer_lr must be positive")
        object.__setattr__(self, "train_tasks", tuple(self.train_tasks))

    def inner_trainer(self, seed: int) -> trainers.TrainerConfig:
        cfg = replace(self.base_trainer, epochs=self.inner_epochs, seed=seed, eval_every=0)
        if self.inner_lr is not None:
            cfg = replace(cfg, lr=self.inner_lr)
        return cfg


@dataclass(frozen=True)
class MetaInit:
    """Per-agent network initialization learned across tasks."""

    params: tuple[nn.MlpParams, ...]

    def copy_params(self) -> list[nn.MlpParams]:
        return [p.copy() for p in self.params]


def reptile_step(init, adapted_sets, step_size: float):
    """init + step * mean_over_tasks(adapted - init), per agent per array."""
    if not adapted_sets:
        raise ContractViolation("no adapted parameter sets")
    out = []
    for agent, base in enumerate(init):
        new_w = []
        for li, w in enumerate(base.layer_weights):
            mean_adapted = np.mean([a[agent].layer_weights[li] for a in adapted_sets], axis=0)
            new_w.append(w + step_size * (mean_adapted - w))
        new_b = []
        for li, b in enumerate(base.layer_biases):
            mean_adapted = np.mean([a[agent].layer_biases[li] for a in adapted_sets], axis=0)
            new_b.append(b + step_size * (mean_adapted - b))
        out.append(replace(base, layer_weights=tuple(new_w), layer_biases=tuple(new_b)))
    return out


def relabel_rewards(dataset: OfflineDataset, task: TaskSpec) -> OfflineDataset:
    """Rewrite rewards for a new power factor; dynamics fields untouched.

    Uses the per-transition mean-AoI/power log, so relabeling with the
    original factor is the bit-exact identity.
    """
    if dataset.env_id != "uav":
        raise ContractViolation("reward relabeling is defined for uav datasets only")
    for name in ("mean_aoi", "step_power_w"):
        if name not in dataset.aux_fields:
            raise DataFormatError(f"dataset lacks aux field {name!r} needed for relabeling")
    i_aoi = dataset.aux_fields.index("mean_aoi")
    i_pow = dataset.aux_fields.index("step_power_w")
    base_config = dataset.env_config()
    new_config = base_config.with_task(task)
    transitions = tuple(
        replace(tr, reward=uav_reward(tr.aux[i_aoi], tr.aux[i_pow],
                                      new_config.aoi_cap, task.power_factor))
        for tr in dataset.transitions
    )
    meta = dict(dataset.meta)
    meta["env_config"] = json.loads(canonical_json(
        {**meta["env_config"], "power_factor": task.power_factor}
    ))
    meta["relabeled_from_factor"] = base_config.power_factor
    return replace(
        dataset,
        task=task,
        config_fingerprint=config_fingerprint("uav", new_config),
        transitions=transitions,
        meta=json.loads(canonical_json(meta)),
    )


def meta_train(task_datasets: dict[TaskSpec, OfflineDataset], config: MetaConfig, seed: int) -> MetaInit:
    """Learn an initialization across the task family.

    Each meta-iteration adapts a clone of the current init on every task for
    inner_epochs, then pulls the init toward the mean of the adapted
    parameters with a (optionally decaying) outer step.
    """
    for task in config.train_tasks:
        if task not in task_datasets:
            raise ContractViolation(f"missing dataset for task {task}")
    tasks = sorted(config.train_tasks, key=lambda t: t.power_factor)
    first = task_datasets[tasks[0]]
    n_agents, obs_dim, n_actions = first.n_agents, first.obs_dim, first.n_actions
    for task in tasks:
        ds = task_datasets[task]
        if (ds.n_agents, ds.obs_dim, ds.n_actions) != (n_agents, obs_dim, n_actions):
            raise ContractViolation(f"task {task} dataset dims differ from the family's")

    rng = seeded_rng(seed, "meta-init")
    base = [
        nn.init_params(obs_dim, n_actions, config.base_trainer.hidden_dims, rng)
        for _ in range(n_agents)
    ]
    for it in range(config.meta_iterations):
        step = config.outer_lr
        if config.decay_outer_lr:
            step = config.outer_lr * (1.0 - it / config.meta_iterations)
        adapted_sets = []
        for task in tasks:
            inner_seed = child_seed(seed, f"meta-{it}-task-{task.power_factor}")
            adapted, _ = trainers.train_offline(
                task_datasets[task], config.inner_trainer(inner_seed), init_params=base
            )
            adapted_sets.append(adapted)
        base = reptile_step(base, adapted_sets, step)
    return MetaInit(tuple(p.copy() for p in base))


def adapt(
    init: MetaInit,
    dataset: OfflineDataset,
    adapt_epochs: int,
    trainer_config: trainers.TrainerConfig,
) -> tuple[list[nn.MlpParams], trainers.TrainingCurve]:
    """Offline training that starts from the meta-learned initialization."""
    cfg = replace(trainer_config, epochs=adapt_epochs)
    return trainers.train_offline(dataset, cfg, init_params=init.copy_params())


def save_init(path, init: MetaInit) -> None:
    nn.save_params(path, list(init.params))


def load_init(path) -> MetaInit:
    return MetaInit(tuple(nn.load_params(path)))
