"""Multi access-point user-scheduling simulator with proportional fairness.

Each access point (agent) ranks its associated user terminals by
proportional-fairness factor, observes the top-k SNRs and PF factors, and
picks one ranked slot to serve. All scheduled links transmit simultaneously
and interfere; the team reward mixes normalized instantaneous rates with the
PF factors of the served users. Episode quality is summarized by the
R-score: mean per-user rate plus a weighted 5th-percentile rate.

Channel model: log-distance path loss (PL = 38 + 10 n log10 d) with
i.i.d.-per-step unit-mean exponential fading. Users move at constant speed
with a fresh random heading each step, reflecting off the area boundary.

Rates are in bits/s throughout; the reward normalizes them by the bandwidth
so the rate and PF terms are comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from ..errors import ConfigError, ContractViolation
from ..rng import seeded_rng

MIN_PATH_DISTANCE_M = 1.0  # path loss clamps distances below this
PATHLOSS_REF_DB = 38.0


@dataclass(frozen=True)
class RrmConfig:
    area_side_m: float = 5000.0
    num_aps: int = 4
    num_ues: int = 24
    episode_len: int = 2000
    ue_speed_mps: float = 1.0
    top_k: int = 3
    tx_power_dbm: float = 30.0
    noise_dbm: float = -104.0
    bandwidth_hz: float = 1.0e7
    pathloss_exponent: float = 3.0
    pf_ema_decay: float = 0.99
    rscore_fairness_weight: float = 2.0
    rate_reward_weight: float = 1.0
    pf_reward_weight: float = 1.0
    throughput_floor_bps: float = 1.0e6
    random_ap_placement: bool = False

    def __post_init__(self):
        if self.num_aps < 1 or self.num_ues < 1 or self.top_k < 1:
            raise ConfigError("num_aps, num_ues, and top_k must be positive")
        if self.num_ues < self.num_aps * self.top_k:
            raise ConfigError(
                f"need num_ues >= num_aps * top_k ({self.num_aps * self.top_k}) so every "
                f"observation has {self.top_k} ranked slots; got {self.num_ues}"
            )
        if not (self.area_side_m > 0 and self.bandwidth_hz > 0 and self.episode_len > 0):
            raise ConfigError("area_side_m, bandwidth_hz, and episode_len must be positive")
        if not 0.0 < self.pf_ema_decay < 1.0:
            raise ConfigError("pf_ema_decay must lie in (0, 1)")
        if self.rscore_fairness_weight < 0 or self.throughput_floor_bps <= 0:
            raise ConfigError("rscore_fairness_weight >= 0 and throughput_floor_bps > 0 required")
        if self.ue_speed_mps < 0 or self.pathloss_exponent <= 0:
            raise ConfigError("ue_speed_mps >= 0 and pathloss_exponent > 0 required")

    @classmethod
    def from_dict(cls, d: dict) -> "RrmConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown rrm config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RrmState:
    """Full simulator state; per-agent observations are projections of it."""

    ap_positions: np.ndarray      # (A, 2) meters
    ue_positions: np.ndarray      # (N, 2) meters
    ue_headings: np.ndarray       # (N,) radians, heading used by the last move
    associations: np.ndarray      # (N,) AP index per UE
    avg_throughput: np.ndarray    # (N,) PF throughput EMA, bits/s
    fading: np.ndarray            # (A, N) small-scale power gains for this step
    t: int
    episode_rate_sums: np.ndarray  # (N,) accumulated bits/s over the episode
    rng: np.random.Generator


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def pathloss_db(distance_m: float, config: RrmConfig) -> float:
    """Log-distance path loss; distances below 1 m are clamped."""
    d = max(float(distance_m), MIN_PATH_DISTANCE_M)
    return PATHLOSS_REF_DB + 10.0 * config.pathloss_exponent * math.log10(d)


def _link_gain(ap: int, ue: int, state: RrmState, config: RrmConfig) -> float:
    """Channel power gain AP->UE including fading (linear)."""
    d = float(np.linalg.norm(state.ap_positions[ap] - state.ue_positions[ue]))
    return float(state.fading[ap, ue]) * 10.0 ** (-pathloss_db(d, config) / 10.0)


def snr_linear(ap: int, ue: int, state: RrmState, config: RrmConfig) -> float:
    """Interference-free SNR of the AP->UE link (used for ranking and obs)."""
    s = dbm_to_watts(config.tx_power_dbm) * _link_gain(ap, ue, state, config)
    return s / dbm_to_watts(config.noise_dbm)


def sinr_linear(ap: int, ue: int, schedule, state: RrmState, config: RrmConfig) -> float:
    """SINR of the AP->UE link given the set of transmitting APs."""
    schedule = set(schedule)
    if ap not in schedule:
        raise ContractViolation(f"serving AP {ap} is not in the schedule")
    tx_w = dbm_to_watts(config.tx_power_dbm)
    signal = tx_w * _link_gain(ap, ue, state, config)
    interference = sum(
        tx_w * _link_gain(other, ue, state, config) for other in schedule if other != ap
    )
    return signal / (interference + dbm_to_watts(config.noise_dbm))


def achievable_rate_bps(snr: float, config: RrmConfig) -> float:
    return config.bandwidth_hz * math.log2(1.0 + snr)


def pf_factor(ue: int, state: RrmState, config: RrmConfig) -> float:
    """Interference-free achievable rate over the throughput EMA.

    Ranking cannot know the other APs' schedules before acting, so the
    numerator deliberately ignores interference.
    """
    ap = int(state.associations[ue])
    rate = achievable_rate_bps(snr_linear(ap, ue, state, config), config)
    return rate / float(state.avg_throughput[ue])


def ranked_ues(state: RrmState, config: RrmConfig, ap: int) -> list[int]:
    """UEs associated with `ap`, PF-descending, ties broken by UE index."""
    members = np.flatnonzero(state.associations == ap)
    pf = [pf_factor(int(u), state, config) for u in members]
    order = sorted(range(len(members)), key=lambda i: (-pf[i], members[i]))
    return [int(members[i]) for i in order]


def rscore(episode_rates: np.ndarray, fairness_weight: float = 2.0) -> float:
    """Mean per-UE rate plus weighted 5th-percentile rate (linear interpolation)."""
    rates = np.asarray(episode_rates, dtype=np.float64).ravel()
    if rates.size == 0:
        raise ContractViolation("rscore of empty rate vector")
    return float(rates.mean() + fairness_weight * np.percentile(rates, 5.0, method="linear"))


def _ap_grid_positions(config: RrmConfig) -> np.ndarray:
    """Cell centers of the smallest square grid holding num_aps points."""
    g = math.ceil(math.sqrt(config.num_aps))
    cell = config.area_side_m / g
    pos = []
    for i in range(config.num_aps):
        r, c = divmod(i, g)
        pos.append(((c + 0.5) * cell, (r + 0.5) * cell))
    return np.array(pos, dtype=np.float64)


def _associate(ap_positions: np.ndarray, ue_positions: np.ndarray, top_k: int) -> np.ndarray:
    """Nearest-AP association, then rebalance so every AP keeps >= top_k UEs.

    Rebalancing moves, for the lowest-index deficit AP, its closest UE taken
    from an AP that holds surplus UEs; ties break on UE index. Deterministic,
    terminates because num_ues >= num_aps * top_k.
    """
    dists = np.linalg.norm(ue_positions[:, None, :] - ap_positions[None, :, :], axis=2)
    assoc = dists.argmin(axis=1)  # argmin breaks ties toward the lower AP index
    num_aps = ap_positions.shape[0]
    while True:
        counts = np.bincount(assoc, minlength=num_aps)
        deficits = np.flatnonzero(counts < top_k)
        if deficits.size == 0:
            return assoc
        a = int(deficits[0])
        donors = np.flatnonzero(counts[assoc] > top_k)
        best = min(donors, key=lambda u: (dists[u, a], u))
        assoc[int(best)] = a


def _normalize_snr_db(snr_db: np.ndarray) -> np.ndarray:
    clipped = np.clip(snr_db, -20.0, 60.0)
    return (clipped - 20.0) / 40.0


def _observations(state: RrmState, config: RrmConfig) -> list[np.ndarray]:
    obs = []
    for ap in range(config.num_aps):
        top = ranked_ues(state, config, ap)[: config.top_k]
        snr_db = np.array(
            [10.0 * math.log10(max(snr_linear(ap, u, state, config), 1e-30)) for u in top]
        )
        pf = np.array([pf_factor(u, state, config) for u in top])
        obs.append(np.concatenate([_normalize_snr_db(snr_db), pf / (1.0 + pf)]))
    return obs


def _reflect(x: np.ndarray, side: float) -> np.ndarray:
    """Fold coordinates back into [0, side] by boundary reflection."""
    period = 2.0 * side
    x = np.mod(x, period)
    return np.where(x > side, period - x, x)


def rrm_reset(config: RrmConfig, seed: int) -> tuple[RrmState, list[np.ndarray]]:
    """Fresh episode: place APs and UEs, associate, floor the PF history."""
    rng = seeded_rng(seed, "rrm-env")
    if config.random_ap_placement:
        ap_positions = rng.uniform(0.0, config.area_side_m, size=(config.num_aps, 2))
    else:
        ap_positions = _ap_grid_positions(config)
    ue_positions = rng.uniform(0.0, config.area_side_m, size=(config.num_ues, 2))
    state = RrmState(
        ap_positions=ap_positions,
        ue_positions=ue_positions,
        ue_headings=np.zeros(config.num_ues),
        associations=_associate(ap_positions, ue_positions, config.top_k),
        avg_throughput=np.full(config.num_ues, config.throughput_floor_bps),
        fading=rng.exponential(1.0, size=(config.num_aps, config.num_ues)),
        t=0,
        episode_rate_sums=np.zeros(config.num_ues),
        rng=rng,
    )
    return state, _observations(state, config)


def rrm_step(config: RrmConfig, state: RrmState, joint_action):
    """Advance one scheduling step.

    Serve each AP's chosen ranked slot, apply interference-coupled rates,
    update the PF EMA for all UEs, then move users and redraw fading for the
    next decision. The passed state is consumed (its rng advances).
    """
    if state.t >= config.episode_len:
        raise ContractViolation("episode already finished")
    if len(joint_action) != config.num_aps:
        raise ContractViolation(f"expected {config.num_aps} actions, got {len(joint_action)}")

    served, served_pf = [], []
    for ap, slot in enumerate(joint_action):
        slot = int(slot)
        if not 0 <= slot < config.top_k:
            raise ContractViolation(f"agent {ap}: slot {slot} outside [0, {config.top_k})")
        ue = ranked_ues(state, config, ap)[slot]
        served.append(ue)
        served_pf.append(pf_factor(ue, state, config))

    schedule = set(range(config.num_aps))
    rates = np.zeros(config.num_ues)
    for ap, ue in enumerate(served):
        rates[ue] = achievable_rate_bps(sinr_linear(ap, ue, schedule, state, config), config)

    reward = config.rate_reward_weight * float(rates.sum()) / config.bandwidth_hz
    reward += config.pf_reward_weight * float(np.sum(served_pf))

    decay = config.pf_ema_decay
    avg = decay * state.avg_throughput + (1.0 - decay) * rates
    avg = np.maximum(avg, config.throughput_floor_bps)

    headings = state.rng.uniform(0.0, 2.0 * math.pi, size=config.num_ues)
    step_vec = config.ue_speed_mps * np.stack([np.cos(headings), np.sin(headings)], axis=1)
    positions = _reflect(state.ue_positions + step_vec, config.area_side_m)

    new_state = RrmState(
        ap_positions=state.ap_positions,
        ue_positions=positions,
        ue_headings=headings,
        associations=state.associations,
        avg_throughput=avg,
        fading=state.rng.exponential(1.0, size=(config.num_aps, config.num_ues)),
        t=state.t + 1,
        episode_rate_sums=state.episode_rate_sums + rates,
        rng=state.rng,
    )
    done = new_state.t >= config.episode_len
    info = {
        "rates_bps": rates,
        "served_ues": tuple(served),
        "served_pf": np.array(served_pf),
    }
    if done:
        mean_rates = new_state.episode_rate_sums / config.episode_len
        info["episode_mean_rates_bps"] = mean_rates
        info["rscore"] = rscore(mean_rates, config.rscore_fairness_weight)
    return new_state, _observations(new_state, config), reward, done, info


class RrmEnv:
    """Stateful wrapper over the functional ops, for rollout loops."""

    env_id = "rrm"

    def __init__(self, config: RrmConfig):
        self.config = config
        self.state: RrmState | None = None

    @property
    def n_agents(self) -> int:
        return self.config.num_aps

    @property
    def n_actions(self) -> int:
        return self.config.top_k

    @property
    def obs_dim(self) -> int:
        return 2 * self.config.top_k

    @property
    def t(self) -> int:
        return 0 if self.state is None else self.state.t

    def reset(self, seed: int) -> list[np.ndarray]:
        self.state, obs = rrm_reset(self.config, seed)
        return obs

    def step(self, joint_action):
        self.state, obs, reward, done, info = rrm_step(self.config, self.state, joint_action)
        return obs, reward, done, info

    def episode_score(self, infos: list[dict]) -> float:
        """R-score of a finished episode, from the final step's info."""
        return float(infos[-1]["rscore"])
