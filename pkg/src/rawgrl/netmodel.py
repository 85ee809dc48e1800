"""Network geometry, channel model and observable states.

Path losses are stored as positive attenuation in dB. User and AP indices
are 0-based throughout the package; group labels are 1-based (1..Z).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import erfc

SPEED_OF_LIGHT = 299_792_458.0

# Candidate packet durations (seconds), one per MCS level.
MCS_LADDER = np.geomspace(100e-6, 8e-3, 16)

DEFAULT_AP_POSITIONS = ((500.0, 500.0), (-500.0, 500.0), (500.0, -500.0), (-500.0, -500.0))


class UnservableUser(ValueError):
    """Raised when no MCS level meets the error target for a user."""


@dataclass(frozen=True)
class ScenarioConfig:
    area_half_width: float = 1000.0
    ap_positions: tuple = DEFAULT_AP_POSITIONS
    num_users: int = 20
    carrier_freq: float = 1e9
    bandwidth: float = 1e6
    tx_power_dbm: float = 0.0
    noise_dbm: float = -94.0  # noise power over the whole band
    sense_threshold_db: float = 95.0
    packet_bits: int = 800
    max_error: float = 1e-5
    queue_capacity: int = 5
    arrival_interval: float = 20e-3
    raw_slot: float = 10e-3
    num_groups: int = 4
    mobility_speed: float = 0.0

    def __post_init__(self):
        object.__setattr__(
            self, "ap_positions", tuple(tuple(float(c) for c in p) for p in self.ap_positions)
        )
        z = self.num_groups
        if z < 1 or z & (z - 1):
            raise ValueError(f"num_groups must be a power of 2, got {z}")
        if self.num_users < 1:
            raise ValueError("num_users must be >= 1")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        if len(self.ap_positions) < 1:
            raise ValueError("at least one AP is required")
        for name in ("area_half_width", "carrier_freq", "bandwidth", "arrival_interval", "raw_slot",
                     "tx_power_dbm", "noise_dbm", "sense_threshold_db", "max_error"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite")
        for name in ("area_half_width", "carrier_freq", "bandwidth", "arrival_interval", "raw_slot"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.mobility_speed < 0:
            raise ValueError("mobility_speed must be >= 0")

    @property
    def num_aps(self) -> int:
        return len(self.ap_positions)

    def with_(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class NetworkRealization:
    user_positions: np.ndarray  # K x 2
    ap_positions: np.ndarray  # A x 2
    user_ap_loss: np.ndarray  # K x A, dB
    user_user_loss: np.ndarray  # K x K, dB, diagonal 0
    assoc: np.ndarray  # K
    packet_duration: np.ndarray  # K, seconds
    snr: np.ndarray  # K, linear
    headings: np.ndarray = field(default=None)  # K, radians

    @property
    def num_users(self) -> int:
        return self.user_positions.shape[0]

    @property
    def num_aps(self) -> int:
        return self.ap_positions.shape[0]

    def to_json(self) -> str:
        d = {k: np.asarray(v).tolist() for k, v in asdict(self).items()}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkRealization":
        d = json.loads(text)
        return cls(
            user_positions=np.array(d["user_positions"], dtype=float).reshape(-1, 2),
            ap_positions=np.array(d["ap_positions"], dtype=float).reshape(-1, 2),
            user_ap_loss=np.array(d["user_ap_loss"], dtype=float),
            user_user_loss=np.array(d["user_user_loss"], dtype=float),
            assoc=np.array(d["assoc"], dtype=np.int64),
            packet_duration=np.array(d["packet_duration"], dtype=float),
            snr=np.array(d["snr"], dtype=float),
            headings=np.array(d["headings"], dtype=float),
        )


def friis_path_loss(d, f):
    """Free-space attenuation ``20 log10(4 pi d f / c)`` in dB."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0) or f <= 0:
        raise ValueError("distance and frequency must be positive")
    out = 20.0 * np.log10(4.0 * math.pi * d * f / SPEED_OF_LIGHT)
    return float(out) if out.ndim == 0 else out


def associate(loss_row) -> int:
    row = np.asarray(loss_row, dtype=float)
    if row.size == 0:
        raise ValueError("empty loss row")
    return int(np.argmin(row))  # argmin returns the first minimum


def q_function(x):
    """Standard normal tail probability."""
    out = 0.5 * erfc(np.asarray(x, dtype=float) / math.sqrt(2.0))
    return float(out) if np.ndim(out) == 0 else out


def snr_from_loss(loss_db, cfg: ScenarioConfig):
    return 10.0 ** ((cfg.tx_power_dbm - np.asarray(loss_db, dtype=float) - cfg.noise_dbm) / 10.0)


def decode_error_prob(snr, d, L, B):
    """Finite-blocklength decoding error probability (normal approximation)."""
    snr = np.asarray(snr, dtype=float)
    d = np.asarray(d, dtype=float)
    n = d * B
    dispersion = 1.0 - 1.0 / (1.0 + snr) ** 2
    arg = (-L * math.log(2.0) + n * np.log1p(snr)) / np.sqrt(n * dispersion)
    return q_function(arg)


def select_packet_duration(s_to_assoc: float, cfg: ScenarioConfig) -> float:
    snr = snr_from_loss(s_to_assoc, cfg)
    eps = decode_error_prob(snr, MCS_LADDER, cfg.packet_bits, cfg.bandwidth)
    ok = np.flatnonzero(eps <= cfg.max_error)
    if ok.size == 0:
        raise UnservableUser(f"user unservable: path loss {s_to_assoc:.2f} dB")
    return float(MCS_LADDER[ok[0]])


def _pairwise_loss(a: np.ndarray, b: np.ndarray, f: float) -> np.ndarray:
    dist = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    out = np.zeros_like(dist)
    pos = dist > 0
    out[pos] = friis_path_loss(dist[pos], f)
    return out


def build_realization(positions, headings, cfg: ScenarioConfig) -> NetworkRealization:
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    aps = np.asarray(cfg.ap_positions, dtype=float)
    ua = _pairwise_loss(positions, aps, cfg.carrier_freq)
    uu = _pairwise_loss(positions, positions, cfg.carrier_freq)
    np.fill_diagonal(uu, 0.0)
    assoc = np.array([associate(row) for row in ua], dtype=np.int64)
    own = ua[np.arange(len(assoc)), assoc]
    durations = np.array([select_packet_duration(s, cfg) for s in own])
    if headings is None:
        headings = np.zeros(len(positions))
    return NetworkRealization(
        user_positions=positions,
        ap_positions=aps,
        user_ap_loss=ua,
        user_user_loss=uu,
        assoc=assoc,
        packet_duration=durations,
        snr=snr_from_loss(own, cfg),
        headings=np.asarray(headings, dtype=float),
    )


def generate_realization(cfg: ScenarioConfig, seed) -> NetworkRealization:
    rng = np.random.default_rng(seed)
    hw = cfg.area_half_width
    aps = np.asarray(cfg.ap_positions, dtype=float)
    pos = rng.uniform(-hw, hw, size=(cfg.num_users, 2))
    # users exactly on top of an AP have no defined path loss
    while True:
        clash = (pos[:, None, :] == aps[None, :, :]).all(-1).any(-1)
        if not clash.any():
            break
        pos[clash] = rng.uniform(-hw, hw, size=(int(clash.sum()), 2))
    headings = rng.uniform(0.0, 2.0 * math.pi, size=cfg.num_users)
    return build_realization(pos, headings, cfg)


def observe_states(real: NetworkRealization, cfg: ScenarioConfig) -> np.ndarray:
    """Censored, normalized A x K state matrix in [-1, 1]."""
    smax = cfg.sense_threshold_db
    raw = real.user_ap_loss.T
    s = np.where(raw <= smax, raw, 2.0 * smax)
    return s / smax - 1.0


def sensing_matrix(real: NetworkRealization, cfg: ScenarioConfig) -> np.ndarray:
    o = (real.user_user_loss <= cfg.sense_threshold_db).astype(float)
    np.fill_diagonal(o, 0.0)
    return o


def step_mobility(real: NetworkRealization, dt: float, speed: float, rng, cfg: ScenarioConfig,
                  max_tries: int = 64) -> NetworkRealization:
    """Advance users along their headings, turning inward at the area boundary."""
    if speed < 0:
        raise ValueError("speed must be >= 0")
    if speed == 0 or dt == 0:
        return real
    hw = cfg.area_half_width
    step = speed * dt
    pos = real.user_positions.copy()
    head = real.headings.copy()
    for k in range(real.num_users):
        cand = pos[k] + step * np.array([math.cos(head[k]), math.sin(head[k])])
        tries = 0
        while np.any(np.abs(cand) >= hw):
            if tries >= max_tries:
                cand = np.clip(cand, -hw * (1 - 1e-9), hw * (1 - 1e-9))
                break
            head[k] = rng.uniform(0.0, 2.0 * math.pi)
            cand = pos[k] + step * np.array([math.cos(head[k]), math.sin(head[k])])
            tries += 1
        pos[k] = cand
    return build_realization(pos, head, cfg)
