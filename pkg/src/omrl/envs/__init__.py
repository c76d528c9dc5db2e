"""Simulation environments: access-point scheduling and UAV data collection."""

from .rrm import RrmConfig, RrmEnv
from .uav import TaskSpec, UavConfig, UavEnv, make_task

from ..errors import ConfigError

ENV_IDS = ("rrm", "uav")


def make_env(env_id: str, config):
    if env_id == "rrm":
        return RrmEnv(config)
    if env_id == "uav":
        return UavEnv(config)
    raise ConfigError(f"unknown env id {env_id!r}, expected one of {ENV_IDS}")


def make_config(env_id: str, overrides: dict | None = None):
    if env_id == "rrm":
        return RrmConfig.from_dict(overrides or {})
    if env_id == "uav":
        return UavConfig.from_dict(overrides or {})
    raise ConfigError(f"unknown env id {env_id!r}, expected one of {ENV_IDS}")
