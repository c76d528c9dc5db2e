"""Offline experience pipeline: collect, subsample, persist, summarize.

Datasets are immutable once built: arrays are write-protected, and every
file carries the fingerprint of the env config that produced it so trainers
can refuse mismatched data. The behavioral policy is an online epsilon-greedy
DQN (independent or CTDE) whose every environment transition is recorded in
order; budgets like "20% of the experience" are uniform transition-level
subsamples of that stream.

File format (little-endian): magic "OMRL-DS1", u32 version, u32 header
length, canonical-JSON header (ids, counts, fingerprint, task, metadata),
then fixed-size packed records. Canonical JSON plus fixed record packing
makes save -> load -> save byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import nn, rollout, trainers
from .envs import make_config, make_env
from .envs.uav import TaskSpec
from .errors import ConfigError, ContractViolation, DataFormatError
from .rng import child_seed, seeded_rng

DATASET_MAGIC = b"OMRL-DS1"
DATASET_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_fingerprint(env_id: str, config) -> str:
    payload = {"env_id": env_id, "config": asdict(config)}
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:16]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Transition:
    """One multi-agent experience tuple with a shared team reward."""

    obs: tuple[np.ndarray, ...]
    actions: tuple[int, ...]
    reward: float
    next_obs: tuple[np.ndarray, ...]
    done: bool
    t: int
    aux: tuple[float, ...] = ()  # named by the owning dataset's aux_fields


@dataclass(frozen=True)
class OfflineDataset:
    env_id: str
    config_fingerprint: str
    task: TaskSpec | None
    transitions: tuple[Transition, ...]
    meta: dict
    n_actions: int
    aux_fields: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def n_agents(self) -> int:
        return len(self.transitions[0].obs)

    @property
    def obs_dim(self) -> int:
        return int(self.transitions[0].obs[0].shape[0])

    def env_config(self):
        cfg = self.meta.get("env_config")
        if cfg is None:
            raise ConfigError("dataset meta carries no env_config")
        return make_config(self.env_id, dict(cfg))


def build_dataset(env_id, fingerprint, task, transitions, meta, n_actions, aux_fields=()):
    """Normalize and freeze a transition sequence into an OfflineDataset."""
    if not transitions:
        raise ContractViolation("dataset must contain at least one transition")
    frozen = tuple(
        replace(
            tr,
            obs=tuple(_frozen(o) for o in tr.obs),
            next_obs=tuple(_frozen(o) for o in tr.next_obs),
            actions=tuple(int(a) for a in tr.actions),
            aux=tuple(float(x) for x in tr.aux),
        )
        for tr in transitions
    )
    n_agents = len(frozen[0].obs)
    d = frozen[0].obs[0].shape[0]
    for i, tr in enumerate(frozen):
        if len(tr.obs) != n_agents or len(tr.actions) != n_agents or len(tr.next_obs) != n_agents:
            raise ContractViolation(f"transition {i}: agent count mismatch")
        if any(o.shape != (d,) for o in tr.obs) or any(o.shape != (d,) for o in tr.next_obs):
            raise ContractViolation(f"transition {i}: observation shape mismatch")
        if len(tr.aux) != len(aux_fields):
            raise ContractViolation(f"transition {i}: aux width != {len(aux_fields)}")
    return OfflineDataset(
        env_id=env_id,
        config_fingerprint=fingerprint,
        task=task,
        transitions=frozen,
        meta=json.loads(canonical_json(meta)),
        n_actions=int(n_actions),
        aux_fields=tuple(aux_fields),
    )


# ----------------------------------------------------------------- collect

@dataclass(frozen=True)
class BehaviorConfig:
    """Online epsilon-greedy DQN used to generate the experience stream."""

    mode: str = "independent"
    hidden_dims: tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    gamma: float = 0.9
    batch_size: int = 32
    buffer_capacity: int = 50_000
    target_sync_every: int = 200
    train_every: int = 1
    learn_start: int = 200
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.6
    eval_episodes: int = 3

    def __post_init__(self):
        if self.mode not in trainers.MODES:
            raise ConfigError(f"behavior mode must be one of {trainers.MODES}")
        if not (0 <= self.eps_end <= self.eps_start <= 1.0):
            raise ConfigError("need 0 <= eps_end <= eps_start <= 1")
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))

    @classmethod
    def from_dict(cls, d: dict) -> "BehaviorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown behavior config keys: {sorted(unknown)}")
        return cls(**d)


def collection_env_seed(collection_seed: int, episode: int) -> int:
    """Env seed used for episode `episode` of a collection run (replayable)."""
    return child_seed(collection_seed, f"collect-env-{episode}")


def collect_online(env_id, config, behavior: BehaviorConfig, episodes: int, seed: int) -> OfflineDataset:
    """Train an online DQN while recording every transition, in order.

    Returns the full stream (source_fraction 1.0); the final greedy policy's
    evaluation score lands in meta["behavior_score"].
    """
    if episodes < 1:
        raise ContractViolation("episodes must be >= 1")
    env = make_env(env_id, config)
    n_agents, obs_dim, n_actions = env.n_agents, env.obs_dim, env.n_actions

    tcfg = trainers.TrainerConfig(
        algo="dqn", mode=behavior.mode, gamma=behavior.gamma, lr=behavior.lr,
        batch_size=behavior.batch_size, hidden_dims=behavior.hidden_dims,
        target_sync_every=behavior.target_sync_every, seed=seed,
    )
    learners = trainers.init_learners(
        n_agents, obs_dim, n_actions, tcfg, seeded_rng(seed, "collect-init")
    )
    act_rng = seeded_rng(seed, "collect-actions")
    sample_rng = seeded_rng(seed, "collect-sample")

    cap = behavior.buffer_capacity
    buf = {
        "obs": np.zeros((n_agents, cap, obs_dim)),
        "actions": np.zeros((n_agents, cap), dtype=np.int64),
        "reward": np.zeros(cap),
        "next_obs": np.zeros((n_agents, cap, obs_dim)),
        "done": np.zeros(cap),
    }
    buf_n, buf_head = 0, 0

    total_steps = episodes * config.episode_len
    decay_steps = max(int(behavior.eps_decay_frac * total_steps), 1)
    stream: list[Transition] = []
    is_uav = env_id == "uav"
    aux_fields = ("mean_aoi", "step_power_w") if is_uav else ()

    global_step = 0
    for episode in range(episodes):
        obs = env.reset(collection_env_seed(seed, episode))
        done = False
        while not done:
            eps = behavior.eps_start + (behavior.eps_end - behavior.eps_start) * min(
                global_step / decay_steps, 1.0
            )
            actions = []
            for i in range(n_agents):
                if act_rng.uniform() < eps:
                    actions.append(int(act_rng.integers(n_actions)))
                else:
                    actions.append(trainers.greedy_action(learners[i].q_net, obs[i]))
            t_before = env.t
            next_obs, reward, done, info = env.step(actions)
            aux = (info["mean_aoi"], info["step_power_w"]) if is_uav else ()
            stream.append(Transition(tuple(obs), tuple(actions), float(reward),
                                     tuple(next_obs), bool(done), t_before, aux))
            for i in range(n_agents):
                buf["obs"][i, buf_head] = obs[i]
                buf["actions"][i, buf_head] = actions[i]
                buf["next_obs"][i, buf_head] = next_obs[i]
            buf["reward"][buf_head] = reward
            buf["done"][buf_head] = 1.0 if done else 0.0
            buf_head = (buf_head + 1) % cap
            buf_n = min(buf_n + 1, cap)
            obs = next_obs
            global_step += 1

            if buf_n >= behavior.learn_start and global_step % behavior.train_every == 0:
                idx = sample_rng.integers(buf_n, size=behavior.batch_size)
                batch = trainers.take_batch(buf, idx)
                losses = trainers.loss_and_grads("dqn", batch, learners, tcfg)
                for learner, al in zip(learners, losses):
                    learner.q_net, learner.opt = nn.adam_step(learner.q_net, al.grads, learner.opt)
                if (global_step // behavior.train_every) % behavior.target_sync_every == 0:
                    for learner in learners:
                        learner.target_net = learner.q_net.copy()

    policy = trainers.GreedyPolicy([ln.q_net for ln in learners])
    scores = [
        rollout.run_episode(env, policy, child_seed(seed, f"collect-eval-{e}")).metrics["score"]
        for e in range(behavior.eval_episodes)
    ]
    meta = {
        "behavior_policy_name": f"online-dqn-{behavior.mode}",
        "behavior_config": asdict(behavior),
        "behavior_score": float(np.mean(scores)),
        "collection_seed": int(seed),
        "source_fraction": 1.0,
        "subsample_unit": "transition",
        "episodes": int(episodes),
        "episode_len": int(config.episode_len),
        "env_config": asdict(config),
    }
    task = TaskSpec(config.power_factor) if is_uav else None
    return build_dataset(env_id, config_fingerprint(env_id, config), task, stream,
                         meta, n_actions, aux_fields)


# --------------------------------------------------------------- subsample

def subsample(dataset: OfflineDataset, fraction: float, seed: int) -> OfflineDataset:
    """Uniform sample without replacement of floor(fraction * n) transitions."""
    if not 0.0 < fraction <= 1.0:
        raise ContractViolation(f"fraction must lie in (0, 1], got {fraction}")
    n = len(dataset)
    # epsilon guards float noise so e.g. 0.29 * 100 still floors to 29
    k = int(np.floor(fraction * n + 1e-9))
    if k < 1:
        raise ContractViolation(f"fraction {fraction} of {n} transitions is empty")
    idx = np.sort(seeded_rng(seed, "subsample").choice(n, size=k, replace=False))
    meta = dict(dataset.meta)
    meta["source_fraction"] = float(meta.get("source_fraction", 1.0)) * float(fraction)
    meta["subsample_seed"] = int(seed)
    return replace(dataset, transitions=tuple(dataset.transitions[int(i)] for i in idx),
                   meta=json.loads(canonical_json(meta)))


# ------------------------------------------------------------------ save/load

def _header_dict(dataset: OfflineDataset) -> dict:
    return {
        "env_id": dataset.env_id,
        "fingerprint": dataset.config_fingerprint,
        "task": None if dataset.task is None else {"power_factor": dataset.task.power_factor},
        "n_transitions": len(dataset),
        "n_agents": dataset.n_agents,
        "obs_dim": dataset.obs_dim,
        "n_actions": dataset.n_actions,
        "aux_fields": list(dataset.aux_fields),
        "meta": dataset.meta,
    }


def save(dataset: OfflineDataset, path) -> None:
    header = canonical_json(_header_dict(dataset)).encode()
    n_agents, obs_dim, n_aux = dataset.n_agents, dataset.obs_dim, len(dataset.aux_fields)
    rec = struct.Struct(f"<IBd{n_agents * obs_dim}d{n_agents}I{n_agents * obs_dim}d{n_aux}d")
    parts = [DATASET_MAGIC, struct.pack("<II", DATASET_VERSION, len(header)), header]
    for tr in dataset.transitions:
        flat_obs = np.concatenate(tr.obs)
        flat_next = np.concatenate(tr.next_obs)
        parts.append(rec.pack(tr.t, 1 if tr.done else 0, tr.reward,
                              *flat_obs, *tr.actions, *flat_next, *tr.aux))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load(path, expect_env_id: str | None = None, expect_config=None) -> OfflineDataset:
    """Read a dataset file; optionally refuse it unless it matches a config."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DataFormatError("bad dataset magic", offset=0)
    off = len(DATASET_MAGIC)
    if len(buf) < off + 8:
        raise DataFormatError("truncated dataset header", offset=len(buf))
    version, hlen = struct.unpack_from("<II", buf, off)
    off += 8
    if version != DATASET_VERSION:
        raise DataFormatError(f"unsupported dataset version {version}", offset=len(DATASET_MAGIC))
    if len(buf) < off + hlen:
        raise DataFormatError("truncated dataset header", offset=len(buf))
    try:
        header = json.loads(buf[off : off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"corrupt dataset header: {exc}", offset=off) from None
    off += hlen

    n_tr = header["n_transitions"]
    n_agents, obs_dim, n_aux = header["n_agents"], header["obs_dim"], len(header["aux_fields"])
    rec = struct.Struct(f"<IBd{n_agents * obs_dim}d{n_agents}I{n_agents * obs_dim}d{n_aux}d")
    if len(buf) - off != n_tr * rec.size:
        raise DataFormatError(
            f"record section is {len(buf) - off} bytes, expected {n_tr * rec.size}",
            offset=len(buf) if len(buf) - off < n_tr * rec.size else off + n_tr * rec.size,
        )
    nd = n_agents * obs_dim
    transitions = []
    for _ in range(n_tr):
        vals = rec.unpack_from(buf, off)
        off += rec.size
        t, done_flag, reward = vals[0], vals[1], vals[2]
        flat_obs = np.array(vals[3 : 3 + nd])
        actions = vals[3 + nd : 3 + nd + n_agents]
        flat_next = np.array(vals[3 + nd + n_agents : 3 + 2 * nd + n_agents])
        aux = vals[3 + 2 * nd + n_agents :]
        transitions.append(Transition(
            obs=tuple(flat_obs.reshape(n_agents, obs_dim)),
            actions=tuple(int(a) for a in actions),
            reward=float(reward),
            next_obs=tuple(flat_next.reshape(n_agents, obs_dim)),
            done=bool(done_flag),
            t=int(t),
            aux=tuple(float(x) for x in aux),
        ))
    task = None if header["task"] is None else TaskSpec(float(header["task"]["power_factor"]))
    dataset = build_dataset(header["env_id"], header["fingerprint"], task, transitions,
                            header["meta"], header["n_actions"], tuple(header["aux_fields"]))
    if expect_env_id is not None and dataset.env_id != expect_env_id:
        raise DataFormatError(f"dataset env {dataset.env_id!r} does not match expected {expect_env_id!r}")
    if expect_config is not None:
        expected = config_fingerprint(expect_env_id or dataset.env_id, expect_config)
        if expected != dataset.config_fingerprint:
            raise DataFormatError(
                f"dataset fingerprint {dataset.config_fingerprint} does not match "
                f"the provided config ({expected})"
            )
    return dataset


# ------------------------------------------------------------------- stats

def dataset_stats(dataset: OfflineDataset) -> dict:
    """Action histograms, reward moments, and action-space coverage."""
    arrays = trainers.stack_transitions(dataset.transitions)
    hist = [
        np.bincount(arrays["actions"][i], minlength=dataset.n_actions).tolist()
        for i in range(dataset.n_agents)
    ]
    distinct = np.unique(arrays["actions"])
    return {
        "n_transitions": len(dataset),
        "n_agents": dataset.n_agents,
        "n_actions": dataset.n_actions,
        "action_histograms": hist,
        "reward_mean": float(arrays["reward"].mean()),
        "reward_std": float(arrays["reward"].std()),
        "coverage_ratio": float(distinct.size / dataset.n_actions),
        "per_agent_coverage": [
            float(np.unique(arrays["actions"][i]).size / dataset.n_actions)
            for i in range(dataset.n_agents)
        ],
    }
