"""Episode execution shared by trainers, baselines, and the harness.

A Policy answers one agent's action from that agent's observation; policies
that need more (episode clocks, tour plans, randomness) get the env handle
and a per-episode generator in ``begin_episode``. Evaluation rollouts never
feed anything back into training data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import seeded_rng


class Policy:
    """Base policy; subclasses override act (and begin_episode if stateful)."""

    def begin_episode(self, env, rng: np.random.Generator) -> None:
        pass

    def act(self, agent: int, obs: np.ndarray, env) -> int:
        raise NotImplementedError


@dataclass(frozen=True)
class EpisodeResult:
    steps: int
    total_reward: float
    metrics: dict


def episode_metrics(env, infos: list[dict], total_reward: float) -> dict:
    """Env-appropriate summary; "score" is the figure-of-merit everywhere."""
    steps = len(infos)
    avg_reward = total_reward / steps
    if env.env_id == "rrm":
        rscore = float(infos[-1]["rscore"])
        return {"score": rscore, "rscore": rscore, "avg_reward": avg_reward}
    mean_aoi = float(np.mean([i["mean_aoi"] for i in infos]))
    total_power = float(sum(i["step_power_w"] for i in infos))
    return {
        "score": avg_reward,
        "avg_reward": avg_reward,
        "mean_aoi": mean_aoi,
        "total_power_w": total_power,
    }


def run_episode(env, policy: Policy, seed: int) -> EpisodeResult:
    """One greedy episode from a fresh reset; deterministic given (env config, seed)."""
    obs = env.reset(seed)
    policy.begin_episode(env, seeded_rng(seed, "policy"))
    total = 0.0
    infos: list[dict] = []
    done = False
    while not done:
        actions = [policy.act(i, obs[i], env) for i in range(env.n_agents)]
        obs, reward, done, info = env.step(actions)
        total += reward
        infos.append(info)
    return EpisodeResult(len(infos), total, episode_metrics(env, infos, total))
