"""UAV data-collection simulator: grid movement, device polling, AoI aging.

UAVs (agents) fly over a square grid at fixed altitude. Each step every UAV
moves one cell (or hovers) and polls one ground device; the device transmits
at exactly the power needed to reach the UAV at the configured SNR
threshold. Within-budget polls succeed and reset that device's
age-of-information to 1; everything else ages by 1 up to a cap. The team
reward trades mean normalized AoI against the step's spent transmit power,
weighted by the task's power factor. The power factor is the only thing a
task changes, which is what makes offline reward relabeling exact.

Air-to-ground channel: log-distance (PL = 30 + 10 a log10 d) with no fading;
success is a deterministic threshold on the required uplink power.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from ..errors import ConfigError, ContractViolation
from ..rng import seeded_rng

DIRECTIONS = ("north", "south", "east", "west", "hover")
# (d_row, d_col); rows index the south->north axis
_DIRECTION_DELTAS = ((1, 0), (-1, 0), (0, 1), (0, -1), (0, 0))

AIR_PATHLOSS_REF_DB = 30.0


@dataclass(frozen=True)
class TaskSpec:
    """One task of the reward family; only the power factor varies."""

    power_factor: float


def make_task(power_factor: float) -> TaskSpec:
    if not (np.isfinite(power_factor) and power_factor >= 0.0):
        raise ContractViolation(f"power factor must be finite and >= 0, got {power_factor}")
    return TaskSpec(float(power_factor))


@dataclass(frozen=True)
class UavConfig:
    area_side_m: float = 1100.0
    grid_cells: int = 11
    num_uavs: int = 3
    num_devices: int = 15
    altitude_m: float = 100.0
    episode_len: int = 100
    snr_threshold_db: float = 5.0
    noise_dbm: float = -100.0
    max_device_power_dbm: float = 0.0
    pathloss_exponent_air: float = 2.3
    power_factor: float = 1.0
    aoi_cap: int | None = None  # defaults to episode_len
    charge_failed_attempts: bool = False

    def __post_init__(self):
        if self.aoi_cap is None:
            object.__setattr__(self, "aoi_cap", self.episode_len)
        if self.num_uavs < 1 or self.num_devices < 1 or self.grid_cells < 1:
            raise ConfigError("num_uavs, num_devices, grid_cells must be positive")
        if self.num_uavs > self.grid_cells**2:
            raise ConfigError(
                f"cannot place {self.num_uavs} UAVs on distinct cells of a "
                f"{self.grid_cells}x{self.grid_cells} grid"
            )
        if not (self.area_side_m > 0 and self.altitude_m > 0 and self.episode_len > 0):
            raise ConfigError("area_side_m, altitude_m, episode_len must be positive")
        if self.power_factor < 0:
            raise ConfigError("power_factor must be >= 0")
        if self.aoi_cap < 1:
            raise ConfigError("aoi_cap must be >= 1")
        if self.pathloss_exponent_air <= 0:
            raise ConfigError("pathloss_exponent_air must be positive")

    @property
    def cell_size_m(self) -> float:
        return self.area_side_m / self.grid_cells

    @property
    def n_actions(self) -> int:
        return len(DIRECTIONS) * self.num_devices

    @classmethod
    def from_dict(cls, d: dict) -> "UavConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown uav config keys: {sorted(unknown)}")
        return cls(**d)

    def with_task(self, task: TaskSpec) -> "UavConfig":
        return replace(self, power_factor=task.power_factor)


@dataclass
class UavState:
    uav_cells: np.ndarray         # (U, 2) int (row, col)
    device_positions: np.ndarray  # (D, 2) meters
    aoi: np.ndarray               # (D,) int in [1, aoi_cap]
    t: int
    power_spent_w: float          # accumulated transmit power, watts
    rng: np.random.Generator


def decode_action(action_id: int, num_devices: int) -> tuple[int, int]:
    """Flattened id -> (direction index, device index)."""
    a = int(action_id)
    if not 0 <= a < len(DIRECTIONS) * num_devices:
        raise ContractViolation(f"action id {a} outside [0, {len(DIRECTIONS) * num_devices})")
    return a // num_devices, a % num_devices


def encode_action(direction: int, device: int, num_devices: int) -> int:
    return direction * num_devices + device


def required_power_watts(distance_3d_m: float, config: UavConfig) -> float:
    """Uplink power needed to hit the SNR threshold at this 3-D distance."""
    pl_db = AIR_PATHLOSS_REF_DB + 10.0 * config.pathloss_exponent_air * math.log10(
        max(float(distance_3d_m), 1.0)
    )
    noise_w = 10.0 ** ((config.noise_dbm - 30.0) / 10.0)
    return noise_w * 10.0 ** (config.snr_threshold_db / 10.0) * 10.0 ** (pl_db / 10.0)


def uav_cell_position_m(cell, config: UavConfig) -> np.ndarray:
    """Horizontal position (x, y) of a cell center; x from col, y from row."""
    row, col = int(cell[0]), int(cell[1])
    return np.array([(col + 0.5) * config.cell_size_m, (row + 0.5) * config.cell_size_m])


def uav_device_distance_m(cell, device_pos, config: UavConfig) -> float:
    horiz = float(np.linalg.norm(uav_cell_position_m(cell, config) - np.asarray(device_pos)))
    return math.hypot(horiz, config.altitude_m)


def uav_reward(mean_aoi: float, step_power_w: float, aoi_cap: int, power_factor: float) -> float:
    """Shared by the env step and offline reward relabeling (bit-exact)."""
    return -(mean_aoi / aoi_cap + power_factor * step_power_w)


def _observations(state: UavState, config: UavConfig) -> list[np.ndarray]:
    span = max(config.grid_cells - 1, 1)
    aoi_norm = 2.0 * state.aoi / config.aoi_cap - 1.0
    obs = []
    for u in range(config.num_uavs):
        pos = 2.0 * state.uav_cells[u] / span - 1.0 if config.grid_cells > 1 else np.zeros(2)
        obs.append(np.concatenate([pos.astype(np.float64), aoi_norm]))
    return obs


def uav_reset(config: UavConfig, seed: int) -> tuple[UavState, list[np.ndarray]]:
    """Devices uniform in the area, UAVs on distinct random cells, AoI = 1."""
    rng = seeded_rng(seed, "uav-env")
    device_positions = rng.uniform(0.0, config.area_side_m, size=(config.num_devices, 2))
    flat = rng.choice(config.grid_cells**2, size=config.num_uavs, replace=False)
    uav_cells = np.stack([flat // config.grid_cells, flat % config.grid_cells], axis=1).astype(int)
    state = UavState(
        uav_cells=uav_cells,
        device_positions=device_positions,
        aoi=np.ones(config.num_devices, dtype=int),
        t=0,
        power_spent_w=0.0,
        rng=rng,
    )
    return state, _observations(state, config)


def uav_step(config: UavConfig, state: UavState, joint_action):
    """Move every UAV, resolve device polls, age the AoI vector.

    A device polled by several UAVs transmits once, to the nearest selecting
    UAV (ties by UAV index). Polls whose required power exceeds the device
    budget fail; by default failed polls spend nothing.
    """
    if state.t >= config.episode_len:
        raise ContractViolation("episode already finished")
    if len(joint_action) != config.num_uavs:
        raise ContractViolation(f"expected {config.num_uavs} actions, got {len(joint_action)}")

    cells = state.uav_cells.copy()
    selections: dict[int, list[int]] = {}
    for u, action in enumerate(joint_action):
        try:
            direction, device = decode_action(action, config.num_devices)
        except ContractViolation as exc:
            raise ContractViolation(f"agent {u}: {exc}") from None
        d_row, d_col = _DIRECTION_DELTAS[direction]
        cells[u, 0] = min(max(cells[u, 0] + d_row, 0), config.grid_cells - 1)
        cells[u, 1] = min(max(cells[u, 1] + d_col, 0), config.grid_cells - 1)
        selections.setdefault(device, []).append(u)

    max_power_w = 10.0 ** ((config.max_device_power_dbm - 30.0) / 10.0)
    aoi = np.minimum(state.aoi + 1, config.aoi_cap)
    step_power = 0.0
    attempts = []
    for device in sorted(selections):
        uavs = selections[device]
        receiver = min(
            uavs,
            key=lambda u: (uav_device_distance_m(cells[u], state.device_positions[device], config), u),
        )
        dist = uav_device_distance_m(cells[receiver], state.device_positions[device], config)
        power = required_power_watts(dist, config)
        ok = power <= max_power_w
        if ok:
            aoi[device] = 1
            step_power += power
        elif config.charge_failed_attempts:
            step_power += max_power_w
        attempts.append((device, receiver, power, ok))

    mean_aoi = float(np.mean(aoi))
    reward = uav_reward(mean_aoi, step_power, config.aoi_cap, config.power_factor)
    new_state = UavState(
        uav_cells=cells,
        device_positions=state.device_positions,
        aoi=aoi,
        t=state.t + 1,
        power_spent_w=state.power_spent_w + step_power,
        rng=state.rng,
    )
    done = new_state.t >= config.episode_len
    info = {
        "mean_aoi": mean_aoi,
        "step_power_w": step_power,
        "attempts": tuple(attempts),
        "successes": tuple((d, u) for d, u, _, ok in attempts if ok),
    }
    return new_state, _observations(new_state, config), reward, done, info


class UavEnv:
    """Stateful wrapper over the functional ops, for rollout loops."""

    env_id = "uav"

    def __init__(self, config: UavConfig):
        self.config = config
        self.state: UavState | None = None

    @property
    def n_agents(self) -> int:
        return self.config.num_uavs

    @property
    def n_actions(self) -> int:
        return self.config.n_actions

    @property
    def obs_dim(self) -> int:
        return 2 + self.config.num_devices

    @property
    def t(self) -> int:
        return 0 if self.state is None else self.state.t

    def reset(self, seed: int) -> list[np.ndarray]:
        self.state, obs = uav_reset(self.config, seed)
        return obs

    def step(self, joint_action):
        self.state, obs, reward, done, info = uav_step(self.config, self.state, joint_action)
        return obs, reward, done, info

    def episode_score(self, infos: list[dict]) -> float:
        """Mean per-step reward recomputed from the logged AoI/power trace."""
        return float(
            np.mean(
                [
                    uav_reward(i["mean_aoi"], i["step_power_w"], self.config.aoi_cap,
                               self.config.power_factor)
                    for i in infos
                ]
            )
        )
