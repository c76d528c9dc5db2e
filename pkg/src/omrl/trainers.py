"""Offline multi-agent learners on fixed datasets.

Four algorithms over per-agent Q-networks: plain offline DQN (the
distributional-shift failure case), conservative Q-learning (DQN loss plus a
logsumexp-minus-data-action penalty), discrete batch-constrained Q-learning
(bootstrap actions restricted by a learned behavior model), and behavior
cloning. Two execution modes: independent (each agent bootstraps its own
target against the shared team reward) and CTDE (additive value
decomposition: the TD residual couples the sum of per-agent Q-values to a
shared target, while execution stays per-agent greedy).

Everything here consumes a dataset and never steps an environment, except
the explicitly scheduled greedy evaluation rollouts, whose transitions are
discarded.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import TYPE_CHECKING

import numpy as np

from . import nn, rollout
from .envs import make_config, make_env
from .errors import ConfigError, ContractViolation
from .rng import child_seed, seeded_rng

if TYPE_CHECKING:  # pragma: no cover
    from .data import OfflineDataset

ALGOS = ("dqn", "cql", "bcq", "bc")
MODES = ("independent", "ctde")


@dataclass(frozen=True)
class TrainerConfig:
    algo: str = "cql"
    mode: str = "independent"
    cql_alpha: float = 5.0        # used only when algo == "cql"
    bcq_tau: float = 0.3          # used only when algo == "bcq"
    gamma: float = 0.99
    batch_size: int = 64
    epochs: int = 50
    target_sync_every: int = 500  # hard target sync, counted in updates
    seed: int = 0
    lr: float = 1e-4
    huber_delta: float = 1.0
    hidden_dims: tuple[int, ...] = nn.DEFAULT_HIDDEN_DIMS
    behavior_lr: float = 1e-3     # bcq behavior model / bc-style fits
    eval_every: int = 0           # epochs between greedy evals; 0 disables
    eval_episodes: int = 3

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.cql_alpha < 0 or not 0.0 < self.bcq_tau <= 1.0:
            raise ConfigError("need cql_alpha >= 0 and bcq_tau in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.target_sync_every < 1:
            raise ConfigError("batch_size >= 1, epochs >= 0, target_sync_every >= 1 required")
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AgentLearner:
    q_net: nn.MlpParams
    target_net: nn.MlpParams
    opt: nn.AdamState
    behavior_net: nn.MlpParams | None = None
    behavior_opt: nn.AdamState | None = None


@dataclass(frozen=True)
class CurvePoint:
    epoch: int
    mean_loss: float
    mean_penalty: float | None
    eval_score: float | None


@dataclass(frozen=True)
class TrainingCurve:
    points: tuple[CurvePoint, ...]

    def final_eval(self) -> float | None:
        scores = [p.eval_score for p in self.points if p.eval_score is not None]
        return scores[-1] if scores else None


@dataclass(frozen=True)
class AgentLoss:
    loss: float
    penalty: float | None
    grads: nn.GradBundle


def stack_transitions(transitions) -> dict[str, np.ndarray]:
    """Dataset -> contiguous arrays: obs/next_obs (N_agents, n, d), actions (N, n)."""
    n_agents = len(transitions[0].obs)
    obs = np.stack([np.stack(tr.obs) for tr in transitions], axis=1)
    next_obs = np.stack([np.stack(tr.next_obs) for tr in transitions], axis=1)
    actions = np.stack([np.asarray(tr.actions, dtype=np.int64) for tr in transitions], axis=1)
    assert obs.shape[0] == n_agents
    return {
        "obs": obs,
        "actions": actions,
        "reward": np.array([tr.reward for tr in transitions]),
        "next_obs": next_obs,
        "done": np.array([1.0 if tr.done else 0.0 for tr in transitions]),
    }


def take_batch(arrays: dict[str, np.ndarray], idx: np.ndarray) -> dict[str, np.ndarray]:
    return {
        "obs": arrays["obs"][:, idx],
        "actions": arrays["actions"][:, idx],
        "reward": arrays["reward"][idx],
        "next_obs": arrays["next_obs"][:, idx],
        "done": arrays["done"][idx],
    }


def _rows_logsumexp(q: np.ndarray) -> np.ndarray:
    m = q.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(q - m).sum(axis=1, keepdims=True))).ravel()


def _huber_vec(resid: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(resid)
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def _bootstrap_values(batch, learners, agent: int, bcq_tau: float | None) -> np.ndarray:
    """Per-sample max of the agent's target Q at the next obs, BCQ-masked if asked."""
    learner = learners[agent]
    q_next = nn.forward(learner.target_net, batch["next_obs"][agent])
    if bcq_tau is None:
        return q_next.max(axis=1)
    if learner.behavior_net is None:
        raise ContractViolation("bcq bootstrap requires a behavior net")
    probs = nn.softmax(nn.forward(learner.behavior_net, batch["next_obs"][agent]))
    mask = probs / probs.max(axis=1, keepdims=True) >= bcq_tau
    masked = np.where(mask, q_next, -np.inf)
    boot = masked.max(axis=1)
    empty = ~mask.any(axis=1)  # unreachable for tau <= 1; guarded anyway
    if empty.any():
        rows = np.flatnonzero(empty)
        boot[rows] = q_next[rows, batch["actions"][agent][rows]]
    return boot


def td_targets(batch, learners, mode: str, gamma: float, bcq_tau: float | None = None) -> np.ndarray:
    """TD targets from the target networks.

    independent: (N_agents, B) of r + gamma (1-done) max_a Q_i(o'_i, a).
    ctde: (B,) of r + gamma (1-done) sum_i max_a Q_i(o'_i, a).
    """
    cont = gamma * (1.0 - batch["done"])
    boots = np.stack([_bootstrap_values(batch, learners, i, bcq_tau) for i in range(len(learners))])
    if mode == "independent":
        return batch["reward"][None, :] + cont[None, :] * boots
    if mode == "ctde":
        return batch["reward"] + cont * boots.sum(axis=0)
    raise ContractViolation(f"unknown mode {mode!r}")


def cql_penalty(q_row: np.ndarray, data_action: int) -> float:
    """logsumexp(q_row) - q_row[data_action]; non-negative by construction."""
    q = np.asarray(q_row, dtype=np.float64).ravel()
    if not 0 <= int(data_action) < q.size:
        raise ContractViolation(f"action {data_action} out of range for {q.size} actions")
    return nn.logsumexp(q) - float(q[int(data_action)])


def loss_and_grads(algo: str, batch, learners, config: TrainerConfig) -> list[AgentLoss]:
    """Loss value and parameter gradients for every agent on one minibatch.

    In CTDE mode the reported loss is the shared objective (identical across
    agents); each agent still gets its own gradients and CQL penalty.
    """
    if algo not in ALGOS:
        raise ContractViolation(f"unknown algo {algo!r}")
    n_agents = len(learners)
    bsz = batch["reward"].shape[0]
    rows = np.arange(bsz)

    if algo == "bc":
        out = []
        for i in range(n_agents):
            logits = nn.forward(learners[i].q_net, batch["obs"][i])
            a = batch["actions"][i]
            loss = float(np.mean(_rows_logsumexp(logits) - logits[rows, a]))
            up = nn.softmax(logits)
            up[rows, a] -= 1.0
            out.append(AgentLoss(loss, None, nn.backprop(learners[i].q_net, batch["obs"][i], up / bsz)))
        return out

    alpha = config.cql_alpha if algo == "cql" else 0.0
    targets = td_targets(batch, learners, config.mode, config.gamma,
                         config.bcq_tau if algo == "bcq" else None)

    q_all = [nn.forward(learners[i].q_net, batch["obs"][i]) for i in range(n_agents)]
    q_taken = [q_all[i][rows, batch["actions"][i]] for i in range(n_agents)]

    penalties, pen_ups = [], []
    for i in range(n_agents):
        if algo == "cql":
            pen = float(np.mean(_rows_logsumexp(q_all[i]) - q_taken[i]))
            up = nn.softmax(q_all[i])
            up[rows, batch["actions"][i]] -= 1.0
            penalties.append(pen)
            pen_ups.append(up / bsz)
        else:
            penalties.append(None)
            pen_ups.append(None)

    delta = config.huber_delta
    out = []
    if config.mode == "independent":
        for i in range(n_agents):
            resid = q_taken[i] - targets[i]
            td_loss = float(np.mean(_huber_vec(resid, delta)))
            up = np.zeros_like(q_all[i])
            up[rows, batch["actions"][i]] = nn.huber_grad(resid, delta) / bsz
            loss = td_loss
            if algo == "cql":
                loss = td_loss + alpha * penalties[i]
                up = up + alpha * pen_ups[i]
            out.append(AgentLoss(loss, penalties[i], nn.backprop(learners[i].q_net, batch["obs"][i], up)))
        return out

    # ctde: residual couples the per-agent Q sums to the shared target
    q_tot = np.sum(q_taken, axis=0)
    resid = q_tot - targets
    td_loss = float(np.mean(_huber_vec(resid, delta)))
    shared_grad = nn.huber_grad(resid, delta) / bsz
    total_loss = td_loss
    if algo == "cql":
        total_loss = td_loss + alpha * float(np.sum(penalties))
    for i in range(n_agents):
        up = np.zeros_like(q_all[i])
        up[rows, batch["actions"][i]] = shared_grad
        if algo == "cql":
            up = up + alpha * pen_ups[i]
        out.append(AgentLoss(total_loss, penalties[i], nn.backprop(learners[i].q_net, batch["obs"][i], up)))
    return out


def greedy_action(q_net: nn.MlpParams, obs: np.ndarray) -> int:
    """Argmax of the Q-row; ties break toward the smallest action id."""
    obs = np.asarray(obs, dtype=np.float64)
    q = nn.forward(q_net, obs[None, :])[0]
    return int(np.argmax(q))


class GreedyPolicy(rollout.Policy):
    """Decentralized greedy execution from per-agent Q-networks."""

    def __init__(self, params_list):
        self.params_list = list(params_list)

    def act(self, agent: int, obs: np.ndarray, env) -> int:
        return greedy_action(self.params_list[agent], obs)


def init_learners(
    n_agents: int,
    obs_dim: int,
    n_actions: int,
    config: TrainerConfig,
    rng: np.random.Generator,
    init_params=None,
    with_behavior: bool | None = None,
) -> list[AgentLearner]:
    if with_behavior is None:
        with_behavior = config.algo == "bcq"
    if init_params is not None and len(init_params) != n_agents:
        raise ContractViolation(f"{len(init_params)} initial nets for {n_agents} agents")
    learners = []
    for i in range(n_agents):
        if init_params is not None:
            q = init_params[i].copy()
            if q.in_dim != obs_dim or q.out_dim != n_actions:
                raise ContractViolation(
                    f"initial net {i} is {q.in_dim}->{q.out_dim}, dataset needs {obs_dim}->{n_actions}"
                )
        else:
            q = nn.init_params(obs_dim, n_actions, config.hidden_dims, rng)
        learner = AgentLearner(q_net=q, target_net=q.copy(), opt=nn.adam_init(q, lr=config.lr))
        if with_behavior:
            learner.behavior_net = nn.init_params(obs_dim, n_actions, config.hidden_dims, rng)
            learner.behavior_opt = nn.adam_init(learner.behavior_net, lr=config.behavior_lr)
        learners.append(learner)
    return learners


def _behavior_step(learner: AgentLearner, obs: np.ndarray, actions: np.ndarray) -> float:
    logits = nn.forward(learner.behavior_net, obs)
    rows = np.arange(obs.shape[0])
    loss = float(np.mean(_rows_logsumexp(logits) - logits[rows, actions]))
    up = nn.softmax(logits)
    up[rows, actions] -= 1.0
    grads = nn.backprop(learner.behavior_net, obs, up / obs.shape[0])
    learner.behavior_net, learner.behavior_opt = nn.adam_step(
        learner.behavior_net, grads, learner.behavior_opt
    )
    return loss


def _eval_env(dataset: "OfflineDataset"):
    env_config_dict = dataset.meta.get("env_config")
    if env_config_dict is None:
        raise ConfigError("dataset meta carries no env_config; cannot evaluate during training")
    from .data import config_fingerprint  # local import to avoid a cycle

    config = make_config(dataset.env_id, dict(env_config_dict))
    if config_fingerprint(dataset.env_id, config) != dataset.config_fingerprint:
        raise ConfigError("dataset fingerprint does not match its embedded env config")
    return make_env(dataset.env_id, config)


def train_offline(
    dataset: "OfflineDataset",
    config: TrainerConfig,
    init_params=None,
) -> tuple[list[nn.MlpParams], TrainingCurve]:
    """Minibatch offline training; returns per-agent Q-networks and the curve.

    Strictly offline: the only environment interaction is the optional greedy
    evaluation (config.eval_every > 0), which reads a fresh env built from the
    dataset's embedded config and discards its transitions.
    """
    transitions = dataset.transitions
    if len(transitions) == 0:
        raise ContractViolation("empty dataset")
    arrays = stack_transitions(transitions)
    n_agents, n, obs_dim = arrays["obs"].shape
    n_actions = dataset.n_actions
    if arrays["actions"].max() >= n_actions:
        raise ContractViolation("dataset action id exceeds declared action-space size")

    learners = init_learners(
        n_agents, obs_dim, n_actions, config,
        seeded_rng(config.seed, "train-init"), init_params,
    )
    env = _eval_env(dataset) if config.eval_every > 0 else None

    shuffle_rng = seeded_rng(config.seed, "train-shuffle")
    points = []
    updates = 0
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        loss_sum = 0.0
        pen_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            batch = take_batch(arrays, idx)
            if config.algo == "bcq":
                # behavior model first, so the mask sees the newest fit
                for i, learner in enumerate(learners):
                    _behavior_step(learner, batch["obs"][i], batch["actions"][i])
            losses = loss_and_grads(config.algo, batch, learners, config)
            for learner, al in zip(learners, losses):
                learner.q_net, learner.opt = nn.adam_step(learner.q_net, al.grads, learner.opt)
            updates += 1
            if updates % config.target_sync_every == 0:
                for learner in learners:
                    learner.target_net = learner.q_net.copy()
            w = idx.size
            loss_sum += w * float(np.mean([al.loss for al in losses]))
            if config.algo == "cql":
                pen_sum += w * float(np.mean([al.penalty for al in losses]))
        eval_score = None
        if env is not None and (epoch + 1) % config.eval_every == 0:
            policy = GreedyPolicy([ln.q_net for ln in learners])
            scores = [
                rollout.run_episode(env, policy, child_seed(config.seed, f"train-eval-{epoch}-{e}")).metrics["score"]
                for e in range(config.eval_episodes)
            ]
            eval_score = float(np.mean(scores))
        points.append(CurvePoint(
            epoch=epoch,
            mean_loss=loss_sum / n,
            mean_penalty=(pen_sum / n) if config.algo == "cql" else None,
            eval_score=eval_score,
        ))
    return [ln.q_net for ln in learners], TrainingCurve(tuple(points))


def fit_behavior(dataset: "OfflineDataset", config: TrainerConfig, epochs: int | None = None):
    """Supervised fit of per-agent action classifiers on the dataset."""
    transitions = dataset.transitions
    if len(transitions) == 0:
        raise ContractViolation("empty dataset")
    arrays = stack_transitions(transitions)
    n_agents, n, obs_dim = arrays["obs"].shape
    rng = seeded_rng(config.seed, "behavior-init")
    learners = [
        AgentLearner(
            q_net=nn.init_params(obs_dim, dataset.n_actions, config.hidden_dims, rng),
            target_net=None, opt=None,
        )
        for _ in range(n_agents)
    ]
    for learner in learners:
        learner.behavior_net = learner.q_net
        learner.behavior_opt = nn.adam_init(learner.q_net, lr=config.behavior_lr)
    shuffle_rng = seeded_rng(config.seed, "behavior-shuffle")
    for _ in range(config.epochs if epochs is None else epochs):
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            for i, learner in enumerate(learners):
                _behavior_step(learner, arrays["obs"][i][idx], arrays["actions"][i][idx])
    return [ln.behavior_net for ln in learners]


def write_curve_csv(curve: TrainingCurve, path) -> None:
    lines = ["epoch,mean_loss,mean_penalty,eval_score"]
    for p in curve.points:
        pen = "" if p.mean_penalty is None else repr(p.mean_penalty)
        ev = "" if p.eval_score is None else repr(p.eval_score)
        lines.append(f"{p.epoch},{repr(p.mean_loss)},{pen},{ev}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
