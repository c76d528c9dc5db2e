"""Non-learning reference policies.

Scheduling: full-reuse (always the top PF slot), round-robin over ranked
slots, random-walk. Data collection: a deterministic tour that partitions
devices among UAVs and cycles through each share in nearest-neighbor order,
and the same random-walk. All are environment-legal and read nothing beyond
their declared inputs.
"""

from __future__ import annotations

import numpy as np

from .envs.uav import DIRECTIONS, UavState, encode_action
from .errors import ContractViolation
from .rollout import Policy

_HOVER = DIRECTIONS.index("hover")
_NORTH = DIRECTIONS.index("north")
_SOUTH = DIRECTIONS.index("south")
_EAST = DIRECTIONS.index("east")
_WEST = DIRECTIONS.index("west")


def full_reuse(obs) -> int:
    """Serve the highest-PF user: slot 0 of the PF-descending observation."""
    return 0


def round_robin(step: int, top_k: int) -> int:
    return int(step) % int(top_k)


def random_walk(action_space_size: int, rng: np.random.Generator) -> int:
    if action_space_size < 1:
        raise ContractViolation("action space must be non-empty")
    return int(rng.integers(action_space_size))


class FullReusePolicy(Policy):
    def act(self, agent, obs, env):
        return full_reuse(obs)


class RoundRobinPolicy(Policy):
    def act(self, agent, obs, env):
        return round_robin(env.t, env.n_actions)


class RandomWalkPolicy(Policy):
    def begin_episode(self, env, rng):
        self.rng = rng

    def act(self, agent, obs, env):
        return random_walk(env.n_actions, self.rng)


def device_cell(position, config) -> tuple[int, int]:
    col = min(int(position[0] // config.cell_size_m), config.grid_cells - 1)
    row = min(int(position[1] // config.cell_size_m), config.grid_cells - 1)
    return row, col


def plan_tours(state: UavState, config) -> list[list[int]]:
    """Partition devices by nearest UAV, then order each share as a
    nearest-neighbor tour from the UAV's start cell (ties by index)."""
    from .envs.uav import uav_cell_position_m

    uav_pos = [uav_cell_position_m(state.uav_cells[u], config) for u in range(config.num_uavs)]
    owner = [
        min(range(config.num_uavs),
            key=lambda u: (float(np.linalg.norm(uav_pos[u] - state.device_positions[d])), u))
        for d in range(config.num_devices)
    ]
    tours = []
    for u in range(config.num_uavs):
        remaining = [d for d in range(config.num_devices) if owner[d] == u]
        tour = []
        cursor = uav_pos[u]
        while remaining:
            nxt = min(remaining,
                      key=lambda d: (float(np.linalg.norm(cursor - state.device_positions[d])), d))
            tour.append(nxt)
            remaining.remove(nxt)
            cursor = state.device_positions[nxt]
        tours.append(tour)
    return tours


def tour_step(uav_cell, target_cell) -> int:
    """One-cell move toward the target, rows before columns; hover on arrival."""
    if uav_cell[0] < target_cell[0]:
        return _NORTH
    if uav_cell[0] > target_cell[0]:
        return _SOUTH
    if uav_cell[1] < target_cell[1]:
        return _EAST
    if uav_cell[1] > target_cell[1]:
        return _WEST
    return _HOVER


class DeterministicTourPolicy(Policy):
    """Visit assigned devices cyclically, polling the current target each step."""

    def begin_episode(self, env, rng):
        self.tours = plan_tours(env.state, env.config)
        self.cursor = [0] * env.n_agents

    def act(self, agent, obs, env):
        tour = self.tours[agent]
        if not tour:  # more UAVs than devices: hover and poll device 0
            return encode_action(_HOVER, 0, env.config.num_devices)
        state = env.state
        target = tour[self.cursor[agent] % len(tour)]
        cell = tuple(state.uav_cells[agent])
        if cell == device_cell(state.device_positions[target], env.config):
            self.cursor[agent] += 1
            target = tour[self.cursor[agent] % len(tour)]
        direction = tour_step(cell, device_cell(state.device_positions[target], env.config))
        return encode_action(direction, target, env.config.num_devices)
